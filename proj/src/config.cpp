#include "regfactor/config.hpp"

#include <charconv>
#include <cstdint>
#include <sstream>

#include "regfactor/errors.hpp"

namespace regfactor {

namespace {

std::string_view trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
    T out{};
    const char* first = value.data();
    const char* last = value.data() + value.size();
    auto [ptr, ec] = std::from_chars(first, last, out);
    if (ec != std::errc() || ptr != last || value.empty()) {
        throw FormatError("invalid value '" + value + "' for key '" + key + "'");
    }
    return out;
}

}  // namespace

std::vector<ConfigEntry> parse_key_values(std::string_view text) {
    std::vector<ConfigEntry> entries;
    int line_no = 0;
    size_t pos = 0;
    while (pos <= text.size()) {
        const size_t nl = text.find('\n', pos);
        std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = trim(line);
        if (!line.empty()) {
            const auto eq = line.find('=');
            if (eq == std::string_view::npos) {
                throw FormatError("line " + std::to_string(line_no) + ": expected key=value, got '" + std::string(line) + "'");
            }
            const auto key = trim(line.substr(0, eq));
            if (key.empty()) throw FormatError("line " + std::to_string(line_no) + ": empty key");
            entries.push_back({std::string(key), std::string(trim(line.substr(eq + 1))), line_no});
        }
        if (nl == std::string_view::npos) break;
        pos = nl + 1;
    }
    return entries;
}

int parse_int(const std::string& key, const std::string& value) { return parse_number<int>(key, value); }

double parse_double(const std::string& key, const std::string& value) { return parse_number<double>(key, value); }

uint64_t parse_u64(const std::string& key, const std::string& value) { return parse_number<uint64_t>(key, value); }

std::vector<int> parse_int_list(const std::string& key, const std::string& value) {
    std::vector<int> out;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_int(key, std::string(trim(item))));
    return out;
}

std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    (void)ec;
    return std::string(buf, ptr);
}

}  // namespace regfactor
