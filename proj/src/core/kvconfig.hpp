#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace cress {

// Flat dotted-key configuration ("train.mu = 15"). Every key has a schema
// entry with a type and a documented default; setting an unknown key or a
// value of the wrong type is an error naming the field.
class KvConfig {
 public:
  enum class Type { Int, Real, Bool, String };

  struct Entry {
    Type type;
    std::string value;  // canonical text form
    std::string doc;
  };

  KvConfig();  // populated with the full experiment schema + defaults

  // Throws std::invalid_argument naming the key on unknown key / bad value.
  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const;

  const std::string& get(const std::string& key) const;
  int64_t get_int(const std::string& key) const;
  double get_real(const std::string& key) const;
  bool get_bool(const std::string& key) const;

  // Parses a TOML-compatible flat key=value file (comments with '#',
  // optional quotes around string values). Throws with line numbers.
  void load_file(const std::string& path);
  void load_text(const std::string& text, const std::string& origin);

  // Sorted "key = value" lines; used to echo the resolved config.
  std::string to_text() const;
  void write_file(const std::string& path) const;

  std::vector<std::string> keys() const;
  const std::map<std::string, Entry>& entries() const { return entries_; }

 private:
  void define(const std::string& key, Type type, const std::string& def,
              const std::string& doc);
  std::map<std::string, Entry> entries_;
};

}  // namespace cress
