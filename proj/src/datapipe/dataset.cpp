#include <algorithm>
#include <map>

#include "davit/datapipe.hpp"

namespace fs = std::filesystem;

namespace davit {

void SampleRecord::validate() const {
  if (image.height != mask.height || image.width != mask.width) {
    throw std::invalid_argument("sample " + id + ": image is " + std::to_string(image.height) + "x" +
                                std::to_string(image.width) + " but mask is " + std::to_string(mask.height) + "x" +
                                std::to_string(mask.width));
  }
  if (image.pixels.size() != static_cast<size_t>(image.height * image.width * 3)) {
    throw std::invalid_argument("sample " + id + ": image buffer size mismatch");
  }
  for (uint8_t v : mask.labels) {
    if (v >= kNumClasses && v != kIgnoreLabel) {
      throw std::invalid_argument("sample " + id + ": invalid class index " + std::to_string(v));
    }
  }
}

LoadResult load_dataset(const fs::path& dir) {
  LoadResult result;
  const fs::path images = dir / "images", masks = dir / "masks";
  if (!fs::exists(images)) return result;
  std::map<std::string, fs::path> by_id;
  for (const auto& entry : fs::directory_iterator(images)) {
    if (entry.is_regular_file() && entry.path().extension() == ".png") by_id[entry.path().stem().string()] = entry.path();
  }
  for (const auto& [id, image_path] : by_id) {
    const fs::path mask_path = masks / (id + ".png");
    try {
      if (!fs::exists(mask_path)) throw std::invalid_argument("missing mask " + mask_path.string());
      SampleRecord rec;
      rec.id = id;
      rec.image = image_from_png(read_png(image_path));
      rec.mask = mask_from_png(read_png(mask_path));
      rec.source.kind = SampleSource::Kind::Disk;
      rec.validate();
      result.records.push_back(std::move(rec));
    } catch (const std::exception& e) {
      result.errors.push_back({image_path.string(), e.what()});
    }
  }
  return result;
}

void save_sample(const fs::path& dir, const SampleRecord& rec) {
  rec.validate();
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  write_png(dir / "images" / (rec.id + ".png"), image_to_png(rec.image));
  write_png(dir / "masks" / (rec.id + ".png"), mask_to_png(rec.mask));
}

Tensor image_to_tensor(const Image& image) {
  const int64_t H = image.height, W = image.width;
  std::vector<double> data(static_cast<size_t>(3 * H * W));
  for (int c = 0; c < 3; ++c)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) data[static_cast<size_t>((c * H + y) * W + x)] = image.at(y, x, c);
  return Tensor::from_data({1, 3, H, W}, std::move(data));
}

Tensor images_to_tensor(std::span<const SampleRecord> batch) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  const int64_t H = batch[0].image.height, W = batch[0].image.width;
  const auto N = static_cast<int64_t>(batch.size());
  std::vector<double> data(static_cast<size_t>(N * 3 * H * W));
  for (int64_t n = 0; n < N; ++n) {
    const Image& img = batch[static_cast<size_t>(n)].image;
    if (img.height != H || img.width != W) throw ShapeError("batch images must share one size");
    for (int c = 0; c < 3; ++c)
      for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x) data[static_cast<size_t>(((n * 3 + c) * H + y) * W + x)] = img.at(y, x, c);
  }
  return Tensor::from_data({N, 3, H, W}, std::move(data));
}

IndexMap masks_to_index(std::span<const SampleRecord> batch) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  const int64_t H = batch[0].mask.height, W = batch[0].mask.width;
  IndexMap out(static_cast<int64_t>(batch.size()), H, W);
  for (size_t n = 0; n < batch.size(); ++n) {
    const Mask& m = batch[n].mask;
    if (m.height != H || m.width != W) throw ShapeError("batch masks must share one size");
    std::copy(m.labels.begin(), m.labels.end(), out.values.begin() + static_cast<std::ptrdiff_t>(n * H * W));
  }
  return out;
}

Mask index_to_mask(const IndexMap& map, int64_t item) {
  Mask m(map.h, map.w);
  for (int64_t y = 0; y < map.h; ++y)
    for (int64_t x = 0; x < map.w; ++x) m.at(y, x) = static_cast<uint8_t>(map.at(item, y, x));
  return m;
}

}  // namespace davit
