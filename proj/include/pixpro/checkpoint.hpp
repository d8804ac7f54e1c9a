#pragma once

#include <cstdint>
#include <bit>
#include <cstring>
#include <map>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "pixpro/config.hpp"
#include "pixpro/lars.hpp"

namespace pixpro {

/// Everything a run needs to continue: both encoders, optimizer buffers, step and the
/// run's random stream.
template <typename T>
struct TrainState {
  TrainRunConfig cfg;
  EncoderParams<T> online;
  EncoderParams<T> target;
  LarsState<T> opt;
  std::int64_t step = 0;
  Rng rng;

  static TrainState fresh(const TrainRunConfig& cfg) {
    cfg.validate();
    TrainState s;
    s.cfg = cfg;
    s.online = init_encoder<T>(cfg.encoder(), static_cast<std::uint64_t>(cfg.seed));
    s.target = make_momentum_copy(s.online);
    s.rng = Rng({static_cast<std::uint64_t>(cfg.seed), 0x72756eULL});
    return s;
  }
};

inline constexpr char kCheckpointMagic[6] = {'P', 'X', 'P', 'R', 'O', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

inline std::string dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

struct ManifestEntry {
  std::string name;
  DType dtype;
  Shape shape;
  std::uint64_t offset;  // from the start of the payload section
  std::uint64_t nbytes;
};

/// Parsed checkpoint: header fields, manifest and raw payload bytes.
struct CheckpointFile {
  std::uint32_t version = 0;
  std::uint64_t config_digest = 0;
  std::int64_t step = 0;
  std::string config_text;
  std::string rng_state;
  std::vector<ManifestEntry> manifest;
  std::vector<char> payload;

  const ManifestEntry* find(const std::string& name) const {
    for (const auto& e : manifest)
      if (e.name == name) return &e;
    return nullptr;
  }

  template <typename T>
  Tensor<T> tensor(const std::string& name) const {
    const auto* e = find(name);
    if (!e) throw Error("checkpoint: missing tensor '" + name + "'");
    if (e->dtype != dtype_of<T>())
      throw Error("checkpoint: tensor '" + name + "' is " + dtype_name(e->dtype) + ", expected " +
                  dtype_name(dtype_of<T>()));
    Tensor<T> t(e->shape);
    std::memcpy(t.data().data(), payload.data() + e->offset, e->nbytes);
    return t;
  }
};

namespace detail {

inline void put_u32(std::string& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& b, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_str(std::string& b, const std::string& s) {
  put_u64(b, s.size());
  b += s;
}

class Reader {
 public:
  Reader(const std::vector<char>& bytes, std::string what) : b_(bytes), what_(std::move(what)) {}
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw Error(what_ + ": truncated file");
  }
  std::uint64_t uint(int bytes) {
    need(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_++])) << (8 * i);
    return v;
  }
  std::string str() {
    const auto n = uint(8);
    need(n);
    std::string s(b_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::vector<char>& b_;
  std::string what_;
  std::size_t pos_ = 0;
};

template <typename T>
struct TensorSource {
  std::string name;
  Tensor<T>* t;
};

template <typename T>
std::vector<TensorSource<T>> collect_tensors(TrainState<T>& s) {
  std::vector<TensorSource<T>> out;
  auto add_encoder = [&](const std::string& prefix, EncoderParams<T>& p) {
    for_each_param(p, [&](const std::string& n, ParamKind, Var<T>& v) { out.push_back({prefix + n, &v.mutable_value()}); });
    for_each_norm(p, [&](const std::string& n, BatchNormState<T>& bn) {
      out.push_back({prefix + n + ".running_mean", &bn.running_mean});
      out.push_back({prefix + n + ".running_var", &bn.running_var});
    });
  };
  add_encoder("online.", s.online);
  add_encoder("momentum.", s.target);
  for (auto& [n, v] : s.opt.velocity) out.push_back({"lars." + n, &v});
  return out;
}

}  // namespace detail

/// Serializes the state to bytes: magic, version, config digest, step, config text,
/// RNG state, tensor manifest, then the raw little-endian payloads.
template <typename T>
std::string checkpoint_bytes(TrainState<T>& s) {
  static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes a little-endian host");
  const auto tensors = detail::collect_tensors(s);
  const std::string cfg = s.cfg.serialize();
  std::string b(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_u32(b, kCheckpointVersion);
  detail::put_u64(b, fnv1a(cfg));
  detail::put_u64(b, static_cast<std::uint64_t>(s.step));
  detail::put_str(b, cfg);
  detail::put_str(b, s.rng.state());
  detail::put_u32(b, static_cast<std::uint32_t>(tensors.size()));
  std::uint64_t off = 0;
  for (const auto& t : tensors) {
    detail::put_str(b, t.name);
    b.push_back(static_cast<char>(dtype_of<T>()));
    detail::put_u32(b, static_cast<std::uint32_t>(t.t->rank()));
    for (auto d : t.t->shape()) detail::put_u64(b, d);
    const std::uint64_t nbytes = t.t->numel() * sizeof(T);
    detail::put_u64(b, off);
    detail::put_u64(b, nbytes);
    off += nbytes;
  }
  for (const auto& t : tensors) b.append(reinterpret_cast<const char*>(t.t->data().data()), t.t->numel() * sizeof(T));
  return b;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, TrainState<T>& s) {
  const auto bytes = checkpoint_bytes(s);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write checkpoint " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("failed writing checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline CheckpointFile parse_checkpoint(const std::vector<char>& bytes, const std::string& what) {
  if (bytes.size() < sizeof kCheckpointMagic || std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0)
    throw Error(what + ": bad magic (not a checkpoint)");
  detail::Reader r(bytes, what);
  r.need(sizeof kCheckpointMagic);
  for (std::size_t i = 0; i < sizeof kCheckpointMagic; ++i) r.uint(1);
  CheckpointFile f;
  f.version = static_cast<std::uint32_t>(r.uint(4));
  if (f.version != kCheckpointVersion)
    throw Error(what + ": format version " + std::to_string(f.version) + ", expected " +
                std::to_string(kCheckpointVersion));
  f.config_digest = r.uint(8);
  f.step = static_cast<std::int64_t>(r.uint(8));
  f.config_text = r.str();
  if (fnv1a(f.config_text) != f.config_digest) throw Error(what + ": config digest mismatch");
  f.rng_state = r.str();
  const auto n = r.uint(4);
  std::uint64_t expected_off = 0;
  for (std::uint64_t i = 0; i < n; ++i) {
    ManifestEntry e;
    e.name = r.str();
    const auto dt = r.uint(1);
    if (dt != 1 && dt != 2) throw Error(what + ": unknown dtype for '" + e.name + "'");
    e.dtype = static_cast<DType>(dt);
    const auto rank = r.uint(4);
    for (std::uint64_t k = 0; k < rank; ++k) e.shape.push_back(r.uint(8));
    e.offset = r.uint(8);
    e.nbytes = r.uint(8);
    const std::size_t width = e.dtype == DType::f32 ? 4 : 8;
    if (e.offset != expected_off || e.nbytes != shape_numel(e.shape) * width)
      throw Error(what + ": inconsistent manifest entry '" + e.name + "'");
    expected_off += e.nbytes;
    f.manifest.push_back(std::move(e));
  }
  const std::size_t start = r.pos();
  if (bytes.size() - start != expected_off)
    throw Error(what + ": truncated file (payload " + std::to_string(bytes.size() - start) + " of " +
                std::to_string(expected_off) + " bytes)");
  f.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(start), bytes.end());
  return f;
}

inline CheckpointFile read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes, path.string());
}

/// Rebuilds a state from a parsed checkpoint. Every tensor is validated before anything
/// is assigned, so a bad file leaves no partial state behind.
template <typename T>
TrainState<T> restore_state(const CheckpointFile& f) {
  auto s = TrainState<T>::fresh(TrainRunConfig::parse(f.config_text));
  std::vector<std::pair<Tensor<T>*, Tensor<T>>> assignments;
  auto names = detail::collect_tensors(s);
  for (const auto& src : names) {
    auto t = f.tensor<T>(src.name);
    if (t.shape() != src.t->shape())
      throw Error("checkpoint: tensor '" + src.name + "' has shape " + shape_str(t.shape()) + ", expected " +
                  shape_str(src.t->shape()));
    assignments.emplace_back(src.t, std::move(t));
  }
  std::map<std::string, Tensor<T>> velocity;
  for (const auto& e : f.manifest)
    if (e.name.rfind("lars.", 0) == 0) velocity.emplace(e.name.substr(5), f.tensor<T>(e.name));
  if (names.size() + velocity.size() != f.manifest.size()) throw Error("checkpoint: unexpected extra tensors");
  for (auto& [dst, t] : assignments) *dst = std::move(t);
  s.opt.velocity = std::move(velocity);
  s.step = f.step;
  s.rng.set_state(f.rng_state);
  return s;
}

template <typename T>
TrainState<T> load_checkpoint(const std::filesystem::path& path) {
  return restore_state<T>(read_checkpoint(path));
}

/// Digest of the whole checkpoint file, used to tag evaluation reports.
inline std::string file_digest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return hex64(fnv1a(bytes));
}

}  // namespace pixpro
