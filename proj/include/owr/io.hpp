#pragma once

#include <filesystem>
#include <string>

namespace owr {

std::string read_text(const std::filesystem::path& path);

/// Writes to a sibling temporary file, then renames over `path`.
void write_text_atomic(const std::filesystem::path& path, const std::string& content);

}  // namespace owr
