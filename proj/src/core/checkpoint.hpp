#pragma once

#include <string>
#include <string_view>

#include "train.hpp"

namespace mwpgen {

inline constexpr std::string_view kCheckpointMagic = "MWPGEN1\n";

std::string checkpoint_bytes(const Models& m);
Models checkpoint_from_bytes(std::string_view bytes, const std::string& source = "<memory>");

// Written to a sibling temporary and renamed into place.
void save_checkpoint(const Models& m, const std::string& path);
Models load_checkpoint(const std::string& path);

void write_file_atomic(const std::string& path, std::string_view contents);
std::string read_file(const std::string& path);

}  // namespace mwpgen
