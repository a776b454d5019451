#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "davit/ops.hpp"
#include "davit/tensor.hpp"

namespace davit {

inline constexpr int kNumClasses = 5;
inline constexpr uint8_t kIgnoreLabel = 255;

/// H x W x 3 interleaved values in [0, 1].
struct Image {
  int64_t height = 0;
  int64_t width = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(int64_t h, int64_t w, double fill = 0.0) : height(h), width(w), pixels(static_cast<size_t>(h * w * 3), fill) {}
  double& at(int64_t y, int64_t x, int c) { return pixels[static_cast<size_t>((y * width + x) * 3 + c)]; }
  double at(int64_t y, int64_t x, int c) const { return pixels[static_cast<size_t>((y * width + x) * 3 + c)]; }
};

/// H x W class indices; 255 marks pixels excluded from loss and metrics.
struct Mask {
  int64_t height = 0;
  int64_t width = 0;
  std::vector<uint8_t> labels;

  Mask() = default;
  Mask(int64_t h, int64_t w, uint8_t fill = 0) : height(h), width(w), labels(static_cast<size_t>(h * w), fill) {}
  uint8_t& at(int64_t y, int64_t x) { return labels[static_cast<size_t>(y * width + x)]; }
  uint8_t at(int64_t y, int64_t x) const { return labels[static_cast<size_t>(y * width + x)]; }
};

struct SampleSource {
  enum class Kind { Disk, Terminal, Synthetic };
  Kind kind = Kind::Disk;
  std::string terminal_id;
  uint64_t seed = 0;
};

struct SampleRecord {
  std::string id;
  Image image;
  Mask mask;
  SampleSource source;
  std::vector<std::string> verdict_history;

  // Throws std::invalid_argument if shapes differ or a label is invalid.
  void validate() const;
};

// ---- PNG and palette codecs ------------------------------------------------

struct PngData {
  int64_t width = 0;
  int64_t height = 0;
  int channels = 0;  // 1 (gray) or 3 (RGB)
  std::vector<uint8_t> bytes;
};

class PngError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Reads any PNG and converts to 8-bit gray (if the file is grayscale) or RGB.
PngData read_png(const std::filesystem::path& path);
PngData decode_png(std::span<const uint8_t> encoded);
std::vector<uint8_t> encode_png(const PngData& png);
void write_png(const std::filesystem::path& path, const PngData& png);

PngData image_to_png(const Image& image);
Image image_from_png(const PngData& png);
PngData mask_to_png(const Mask& mask);
// Gray PNGs are taken as class indices; RGB PNGs are decoded through the palette.
Mask mask_from_png(const PngData& png);

struct PaletteEntry {
  std::string name;
  std::array<uint8_t, 3> rgb;
  uint8_t index;
};

const std::array<PaletteEntry, kNumClasses>& palette();
const std::string& class_name(int index);
// Ignore pixels encode as black.
PngData encode_palette(const Mask& mask);
// Throws std::invalid_argument naming the first unmapped color.
Mask decode_palette(const PngData& rgb);
std::string palette_json();
void write_palette_json(const std::filesystem::path& path);

// ---- Dataset directories ---------------------------------------------------

struct LoadError {
  std::string file;
  std::string message;
};

struct LoadResult {
  std::vector<SampleRecord> records;
  std::vector<LoadError> errors;
};

/// Reads `images/<id>.png` and `masks/<id>.png` pairs, sorted by id. Problems
/// with individual files are collected in `errors`.
LoadResult load_dataset(const std::filesystem::path& dir);
void save_sample(const std::filesystem::path& dir, const SampleRecord& rec);

// ---- Augmentation ----------------------------------------------------------

struct Range {
  double lo;
  double hi;
};

struct AugmentConfig {
  int64_t crop = 512;
  Range contrast{0.8, 1.2};
  Range brightness{0.8, 1.2};
  Range scale{0.8, 1.2};
  bool horizontal_flip = true;
  bool vertical_flip = true;
  // Augmented crops drawn from each source image per epoch.
  int expansion = 100;

  void validate() const;
  // All steps reduce to the identity on a crop x crop source.
  static AugmentConfig identity(int64_t crop);
};

/// Random crop, photometric jitter with flips, then random rescale back to
/// crop x crop. The mask follows every geometric step and no photometric one.
SampleRecord augment(const SampleRecord& rec, uint64_t seed, const AugmentConfig& cfg);

// Symmetric (edge-repeating) reflection of an index into [0, n).
int64_t mirror_index(int64_t i, int64_t n);

// ---- Splits and synthetic data ---------------------------------------------

struct FoldPlan {
  std::array<std::vector<size_t>, 5> folds;

  std::vector<size_t> test_indices(int fold) const { return folds.at(static_cast<size_t>(fold)); }
  std::vector<size_t> train_indices(int fold) const;
};

FoldPlan five_fold_split(size_t n, uint64_t seed);

/// Colored, textured regions over the five classes. Region boundaries follow
/// a 16-pixel grid; `size` must be a positive multiple of 16.
std::vector<SampleRecord> synth_generate(size_t n, uint64_t seed, int64_t size);

// ---- Batching --------------------------------------------------------------

Tensor images_to_tensor(std::span<const SampleRecord> batch);
Tensor image_to_tensor(const Image& image);
IndexMap masks_to_index(std::span<const SampleRecord> batch);
Mask index_to_mask(const IndexMap& map, int64_t item);

}  // namespace davit
