#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace mflow {

/// Writes to a sibling temporary and renames it over `path`, so readers never
/// observe a partial file.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);

std::string read_file(const std::filesystem::path& path);

/// 64-bit FNV-1a, hex encoded. Stable across platforms.
std::string content_hash(std::string_view content);

}  // namespace mflow
