#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace cress::data {

// Continuous speech-feature stand-in: T frames of d_feat values, row-major.
// Values are representable in 32-bit floats so that writing a corpus to disk
// and reading it back is lossless.
struct SpeechFeatures {
  int64_t frames = 0;
  int64_t d_feat = 0;
  std::vector<double> values;
};

struct Triplet {
  SpeechFeatures s;
  std::vector<std::string> x;  // transcription
  std::vector<std::string> y;  // translation
};

// Synthetic dual-modality task: x is a uniform random word sequence, y is a
// word-wise bijection of x with each adjacent pair swapped, s renders x as
// noisy prototype frames.
struct SynthTaskConfig {
  int vocab_size = 50;
  int len_min = 5;
  int len_max = 30;
  int frames_min = 2;
  int frames_max = 5;
  double noise_sigma = 0.1;
  int d_feat = 32;
  uint64_t task_seed = 7;  // fixes the word bijection and the prototypes

  void validate() const;
  std::string word(int index) const;  // "w00", "w01", ...
};

// Permutation of [0, vocab_size) applied word-wise before the pair swap.
std::vector<int> word_bijection(const SynthTaskConfig& cfg);

// y token indices for given x token indices: bijection, then swap (0,1),
// (2,3), ...; an odd trailing token stays in place.
std::vector<int> translate_indices(const SynthTaskConfig& cfg,
                                   const std::vector<int>& x);

// Fixed random unit vector for a word, float-quantized.
std::vector<double> word_prototype(const SynthTaskConfig& cfg, int index);

SpeechFeatures render_speech(const std::vector<int>& word_indices,
                             const SynthTaskConfig& cfg, uint64_t seed);

std::vector<Triplet> generate_synthetic_corpus(const SynthTaskConfig& cfg,
                                               int64_t n, uint64_t seed);

}  // namespace cress::data
