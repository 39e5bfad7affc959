#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace regfactor {

struct ConfigEntry {
    std::string key;
    std::string value;
    int line = 0;
};

// Flat `key = value` text; `#` starts a comment, blank lines are skipped.
// Throws FormatError("line N: ...") on lines without '=' or with an empty key.
std::vector<ConfigEntry> parse_key_values(std::string_view text);

// Strict numeric conversions; throw FormatError naming the key on trailing garbage.
int parse_int(const std::string& key, const std::string& value);
double parse_double(const std::string& key, const std::string& value);
uint64_t parse_u64(const std::string& key, const std::string& value);
std::vector<int> parse_int_list(const std::string& key, const std::string& value);

// Shortest text that parses back to the same double.
std::string format_double(double v);

}  // namespace regfactor
