#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace cress::data {

struct Triplet;

// Word-level vocabulary with fixed special ids below all regular ids.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kNumSpecials = 4;

  // Union of transcription and translation tokens, ordered by frequency
  // (descending) with lexicographic tie-break.
  static Vocabulary build(const std::vector<Triplet>& corpus);
  static Vocabulary from_tokens(const std::vector<std::string>& regular_tokens);

  int id(const std::string& token) const;  // kUnk for unseen tokens
  const std::string& token(int id) const;
  int size() const { return static_cast<int>(id_to_token_.size()); }

  std::vector<int> encode(const std::vector<std::string>& words) const;
  std::vector<std::string> decode(const std::vector<int>& ids) const;  // skips specials

  // One regular token per line.
  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);
  std::vector<std::string> regular_tokens() const;

 private:
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> token_to_id_;
};

}  // namespace cress::data
