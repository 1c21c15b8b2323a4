#pragma once

// Flat sectioned key=value configuration.
//
//   [loss]
//   lambda = 12      # comments run to end of line
//
// Keys are addressed as "section.key". Every key has a registered default
// and type, so unknown keys and malformed values are rejected up front.

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace disa::config {

// Malformed input from the user, as opposed to a runtime failure.
class UsageError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

enum class ValueType { boolean, integer, real, text, integer_list, real_list };

struct Entry {
    std::string key;
    std::string value;
    ValueType type = ValueType::text;
    std::string help;
};

class Config {
   public:
    // Every recognised key with its default value.
    static Config defaults();

    bool has(const std::string& key) const { return index_.contains(key); }
    void set(const std::string& key, const std::string& value);
    // "section.key=value"
    void apply_override(const std::string& assignment);
    void merge_file(const std::filesystem::path& path);
    void merge_text(const std::string& text, const std::string& origin = "<text>");

    const std::string& raw(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    std::int64_t get_int(const std::string& key) const;
    std::uint64_t get_uint(const std::string& key) const;
    double get_real(const std::string& key) const;
    std::string get_string(const std::string& key) const { return raw(key); }
    std::vector<std::int64_t> get_int_list(const std::string& key) const;
    std::vector<double> get_real_list(const std::string& key) const;

    // Canonical sectioned rendering with every key materialised.
    std::string snapshot() const;
    std::uint64_t digest() const;
    const std::vector<Entry>& entries() const { return entries_; }

   private:
    void declare(std::string key, std::string value, ValueType type, std::string help);
    const Entry& entry(const std::string& key) const;

    std::vector<Entry> entries_;
    std::map<std::string, std::size_t> index_;
};

}  // namespace disa::config
