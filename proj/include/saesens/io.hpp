#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace saesens {

std::string read_file(const std::filesystem::path& path);

// Writes via a temporary sibling and rename, so readers never see a torn file.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

std::string sha256_hex(std::string_view data);
std::string sha256_file(const std::filesystem::path& path);

std::vector<unsigned char> base64_decode(std::string_view text);
std::string base64_encode(const void* data, std::size_t size);

}  // namespace saesens
