#include <fstream>
#include <sstream>

#include "json.hpp"

#include "davit/datapipe.hpp"

namespace davit {

const std::array<PaletteEntry, kNumClasses>& palette() {
  static const std::array<PaletteEntry, kNumClasses> table{{
      {"vitrinite", {128, 192, 255}, 0},  // light blue
      {"inertinite", {255, 0, 0}, 1},     // red
      {"exinite", {255, 128, 192}, 2},    // pink
      {"mineral", {0, 255, 0}, 3},        // green
      {"adhesive", {0, 0, 160}, 4},       // dark blue
  }};
  return table;
}

const std::string& class_name(int index) { return palette().at(static_cast<size_t>(index)).name; }

PngData encode_palette(const Mask& mask) {
  PngData png{mask.width, mask.height, 3, std::vector<uint8_t>(mask.labels.size() * 3, 0)};
  for (size_t i = 0; i < mask.labels.size(); ++i) {
    const uint8_t v = mask.labels[i];
    if (v == kIgnoreLabel) continue;
    if (v >= kNumClasses) throw std::invalid_argument("cannot palette-encode label " + std::to_string(v));
    const auto& rgb = palette()[v].rgb;
    for (int c = 0; c < 3; ++c) png.bytes[i * 3 + static_cast<size_t>(c)] = rgb[static_cast<size_t>(c)];
  }
  return png;
}

Mask decode_palette(const PngData& png) {
  if (png.channels != 3) throw std::invalid_argument("palette masks must be RGB");
  Mask m(png.height, png.width);
  for (size_t i = 0; i < m.labels.size(); ++i) {
    const std::array<uint8_t, 3> rgb{png.bytes[i * 3], png.bytes[i * 3 + 1], png.bytes[i * 3 + 2]};
    if (rgb == std::array<uint8_t, 3>{0, 0, 0}) {
      m.labels[i] = kIgnoreLabel;
      continue;
    }
    bool found = false;
    for (const auto& e : palette()) {
      if (e.rgb == rgb) {
        m.labels[i] = e.index;
        found = true;
        break;
      }
    }
    if (!found) {
      std::ostringstream os;
      os << "unmapped mask color (" << int(rgb[0]) << ", " << int(rgb[1]) << ", " << int(rgb[2]) << ") at pixel ("
         << static_cast<int64_t>(i) / png.width << ", " << static_cast<int64_t>(i) % png.width << ")";
      throw std::invalid_argument(os.str());
    }
  }
  return m;
}

std::string palette_json() {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& e : palette()) {
    classes.push_back({{"name", e.name}, {"index", e.index}, {"color", {e.rgb[0], e.rgb[1], e.rgb[2]}}});
  }
  nlohmann::json doc{{"classes", classes}, {"ignore", {{"index", kIgnoreLabel}, {"color", {0, 0, 0}}}}};
  return doc.dump(2) + "\n";
}

void write_palette_json(const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << palette_json();
}

}  // namespace davit
