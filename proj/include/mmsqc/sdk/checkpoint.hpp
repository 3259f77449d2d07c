#pragma once

// JSON persistence for SdkModel. Doubles are written in shortest round-trip
// form, so a save/load cycle reproduces every parameter bit for bit.

#include "mmsqc/sdk/model.hpp"

#include <filesystem>
#include <string>

namespace mmsqc::sdk {

inline constexpr int checkpoint_schema_version = 1;

std::string checkpoint_to_string(const SdkModel& model);
SdkModel checkpoint_from_string(const std::string& text);

void save_checkpoint(const SdkModel& model, const std::filesystem::path& path);
/// Throws LoadError for unreadable files, schema mismatches and inconsistent dimensions.
SdkModel load_checkpoint(const std::filesystem::path& path);

} // namespace mmsqc::sdk
