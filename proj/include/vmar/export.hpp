#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vmar/core.hpp"

namespace vmar {

// Binary PGM (P5, maxval 255) of one frame; values are clamped to [0, 1].
std::string encode_pgm(const PixelVideo& video, std::size_t frame);

// Writes frame_%04d.pgm for every frame plus manifest.json (dims merged with
// `manifest`) into dir, creating it if needed. Returns the frame file names.
std::vector<std::string> export_video(const PixelVideo& video, const std::string& dir,
                                      const nlohmann::json& manifest);

// Whole-file write; throws IoError.
void write_text_file(const std::string& path, const std::string& text);

nlohmann::json motion_spec_json(const MotionSpec& spec);

}  // namespace vmar
