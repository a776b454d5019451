#include <cstring>
#include <fstream>

#include "davit/hash.hpp"
#include "davit/model.hpp"

namespace davit {

namespace {

constexpr char kMagic[8] = {'D', 'A', 'V', 'I', 'T', 'C', 'K', 'P'};
using Kind = CheckpointError::Kind;

template <typename T>
void put(std::vector<uint8_t>& out, T value) {
  static_assert(std::is_integral_v<T> || std::is_floating_point_v<T>);
  uint8_t raw[sizeof(T)];
  std::memcpy(raw, &value, sizeof(T));
  // Stored little-endian; the build targets little-endian hosts.
  out.insert(out.end(), raw, raw + sizeof(T));
}

void put_string(std::vector<uint8_t>& out, const std::string& s) {
  put<uint32_t>(out, static_cast<uint32_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

class Reader {
 public:
  explicit Reader(const std::vector<uint8_t>& bytes, size_t end) : bytes_(bytes), end_(end) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  std::string get_string(const char* what) {
    const uint32_t n = get<uint32_t>(what);
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  void read_doubles(std::span<double> out, const char* what) {
    need(out.size() * sizeof(double), what);
    std::memcpy(out.data(), bytes_.data() + pos_, out.size() * sizeof(double));
    pos_ += out.size() * sizeof(double);
  }

  size_t remaining() const { return end_ - pos_; }

 private:
  void need(size_t n, const char* what) const {
    if (n > end_ - pos_) throw CheckpointError(Kind::Truncated, std::string("checkpoint truncated while reading ") + what);
  }

  const std::vector<uint8_t>& bytes_;
  size_t end_;
  size_t pos_ = 0;
};

}  // namespace

std::vector<uint8_t> serialize_checkpoint(const Model& m) {
  std::vector<uint8_t> out(kMagic, kMagic + sizeof(kMagic));
  put<uint32_t>(out, kCheckpointVersion);
  put_string(out, m.config().canonical_text());
  put<uint32_t>(out, static_cast<uint32_t>(m.named_parameters().size()));
  for (const auto& p : m.named_parameters()) {
    put_string(out, p.name);
    put<uint32_t>(out, static_cast<uint32_t>(p.value.rank()));
    for (int64_t d : p.value.shape()) put<uint64_t>(out, static_cast<uint64_t>(d));
    put<uint64_t>(out, static_cast<uint64_t>(p.value.numel()));
    const auto data = p.value.data();
    const auto* raw = reinterpret_cast<const uint8_t*>(data.data());
    out.insert(out.end(), raw, raw + data.size() * sizeof(double));
  }
  const auto digest = sha256(out);
  out.insert(out.end(), digest.begin(), digest.end());
  return out;
}

Model deserialize_checkpoint(const std::vector<uint8_t>& bytes, const ModelConfig* expected) {
  if (bytes.size() < sizeof(kMagic)) throw CheckpointError(Kind::Truncated, "checkpoint shorter than its header");
  if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError(Kind::BadMagic, "not a davit checkpoint (bad magic)");
  }
  if (bytes.size() < sizeof(kMagic) + 4 + 32) throw CheckpointError(Kind::Truncated, "checkpoint shorter than its header");
  Reader r(bytes, bytes.size() - 32);
  r.get<uint64_t>("magic");
  const uint32_t version = r.get<uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError(Kind::VersionMismatch, "checkpoint format version " + std::to_string(version) +
                                                     ", this build reads version " +
                                                     std::to_string(kCheckpointVersion));
  }
  const std::string config_text = r.get_string("config");
  const uint32_t count = r.get<uint32_t>("blob count");
  std::vector<std::pair<std::string, Tensor>> blobs;
  for (uint32_t i = 0; i < count; ++i) {
    std::string name = r.get_string("blob name");
    const uint32_t rank = r.get<uint32_t>("blob rank");
    if (rank > 8) throw CheckpointError(Kind::Malformed, "blob " + name + " has implausible rank");
    Shape shape;
    for (uint32_t d = 0; d < rank; ++d) shape.push_back(static_cast<int64_t>(r.get<uint64_t>("blob shape")));
    const uint64_t numel = r.get<uint64_t>("blob size");
    if (static_cast<int64_t>(numel) != shape_numel(shape)) {
      throw CheckpointError(Kind::Malformed, "blob " + name + " size does not match its shape");
    }
    if (numel * sizeof(double) > r.remaining()) {
      throw CheckpointError(Kind::Truncated, "checkpoint truncated while reading blob " + name);
    }
    Tensor t = Tensor::zeros(shape, true);
    r.read_doubles(t.mutable_data(), "blob data");
    blobs.emplace_back(std::move(name), t);
  }
  if (r.remaining() != 0) throw CheckpointError(Kind::Malformed, "trailing bytes after the last blob");

  const auto actual = sha256(std::span<const uint8_t>(bytes.data(), bytes.size() - 32));
  if (std::memcmp(actual.data(), bytes.data() + bytes.size() - 32, 32) != 0) {
    throw CheckpointError(Kind::DigestMismatch, "checkpoint digest mismatch (file is corrupt)");
  }

  ModelConfig cfg;
  try {
    cfg = ModelConfig::parse_canonical(config_text);
  } catch (const ModelConfigError& e) {
    throw CheckpointError(Kind::Malformed, std::string("checkpoint config is invalid: ") + e.what());
  }
  if (expected && !expected->same_architecture(cfg)) {
    throw CheckpointError(Kind::ConfigMismatch, "checkpoint holds model '" + cfg.name + "' (C=" +
                                                    std::to_string(cfg.base_channels) +
                                                    "), which does not match the requested '" + expected->name +
                                                    "' (C=" + std::to_string(expected->base_channels) + ")");
  }
  const auto layout = parameter_layout(cfg);
  if (layout.size() != blobs.size()) throw CheckpointError(Kind::Malformed, "checkpoint blob count does not match its config");
  std::vector<NamedParameter> params;
  for (size_t i = 0; i < layout.size(); ++i) {
    if (layout[i].name != blobs[i].first || layout[i].shape != blobs[i].second.shape()) {
      throw CheckpointError(Kind::Malformed, "checkpoint blob " + blobs[i].first + " does not match the layout");
    }
    params.push_back({blobs[i].first, blobs[i].second});
  }
  return Model(cfg, std::move(params));
}

void save_checkpoint(const Model& m, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(m);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError(Kind::Io, "cannot write " + tmp);
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw CheckpointError(Kind::Io, "write failed for " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError(Kind::Io, "cannot move checkpoint into place: " + ec.message());
}

Model load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError(Kind::Io, "cannot open " + path.string());
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes, expected);
}

std::string model_digest(const Model& m) {
  const auto bytes = serialize_checkpoint(m);
  return to_hex(std::span<const uint8_t>(bytes.data() + bytes.size() - 32, 32));
}

}  // namespace davit
