#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace asdscreen::io {

std::string read_text(const std::filesystem::path& path);
std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);

// Write to a sibling temp file, then rename over the target.
void write_atomic(const std::filesystem::path& path, std::string_view contents);
void write_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> contents);

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::string_view text);

// Split one line on commas (no quoting). A trailing '\r' is dropped.
std::vector<std::string> split_csv_line(std::string_view line);

// Lines of a text stream, LF or CRLF; a final empty line is not reported.
std::vector<std::string> split_lines(std::string_view text);

// Shortest decimal form that parses back to the same double.
std::string format_double(double v);

}  // namespace asdscreen::io
