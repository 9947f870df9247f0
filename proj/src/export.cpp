#include "vmar/export.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "vmar/errors.hpp"

namespace vmar {

std::string encode_pgm(const PixelVideo& video, std::size_t frame) {
  if (frame >= video.frames) throw IndexError("frame index outside the video");
  char head[64];
  const int n = std::snprintf(head, sizeof head, "P5\n%zu %zu\n255\n", video.width, video.height);
  std::string out(head, static_cast<std::size_t>(n));
  out.reserve(out.size() + video.height * video.width);
  for (std::size_t r = 0; r < video.height; ++r)
    for (std::size_t c = 0; c < video.width; ++c) {
      const float v = std::clamp(video.at(frame, r, c), 0.0f, 1.0f);
      out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f))));
    }
  return out;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw IoError("write failed for " + path);
}

std::vector<std::string> export_video(const PixelVideo& video, const std::string& dir,
                                      const nlohmann::json& manifest) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
  std::vector<std::string> names;
  for (std::size_t f = 0; f < video.frames; ++f) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%04zu.pgm", f);
    write_text_file(dir + "/" + name, encode_pgm(video, f));
    names.emplace_back(name);
  }
  nlohmann::json m = manifest;
  m["frames"] = video.frames;
  m["height"] = video.height;
  m["width"] = video.width;
  m["files"] = names;
  write_text_file(dir + "/manifest.json", m.dump(2) + "\n");
  return names;
}

nlohmann::json motion_spec_json(const MotionSpec& spec) {
  return {{"class", std::string(motion_class_name(spec.cls))},
          {"row", spec.row},
          {"col", spec.col},
          {"speed", spec.speed}};
}

}  // namespace vmar
