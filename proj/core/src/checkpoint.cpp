#include "osreg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>

namespace osreg {
namespace {

constexpr char kMagic[8] = {'O', 'S', 'R', 'E', 'G', 'C', 'K', 'P'};

class Writer {
 public:
  template <typename U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }
  void f32(float v) { uint(std::bit_cast<std::uint32_t>(v)); }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void str(const std::string& s) {
    uint(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  template <typename T>
  void array(const std::string& name, const Tensor<T>& t) {
    str(name);
    uint(static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) uint(static_cast<std::uint64_t>(d));
    for (T v : t.values()) {
      if constexpr (std::is_same_v<T, float>) f32(v);
      else f64(v);
    }
  }
  std::vector<std::uint8_t>& data() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}

  void need(std::size_t n, const char* what) const {
    if (b_.size() - pos_ < n)
      throw std::runtime_error("checkpoint truncated reading " + std::string(what) + " at byte " +
                               std::to_string(pos_));
  }
  template <typename U>
  U uint(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(b_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  double f64(const char* what) { return std::bit_cast<double>(uint<std::uint64_t>(what)); }
  float f32(const char* what) { return std::bit_cast<float>(uint<std::uint32_t>(what)); }
  std::string str(const char* what) {
    const auto n = uint<std::uint32_t>(what);
    need(n, what);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  template <typename T>
  NamedTensor<T> array() {
    NamedTensor<T> out;
    out.name = str("array name");
    const auto rank = uint<std::uint8_t>("array rank");
    if (rank == 0) throw std::runtime_error("checkpoint array '" + out.name + "' has rank 0");
    Shape shape;
    std::size_t numel = 1;
    for (std::uint8_t i = 0; i < rank; ++i) {
      const auto d = uint<std::uint64_t>("array extent");
      if (d == 0 || d > (b_.size() - pos_)) throw std::runtime_error("checkpoint array '" + out.name + "' has a bad extent");
      shape.push_back(static_cast<std::size_t>(d));
      numel *= shape.back();
    }
    need(numel * sizeof(T), "array values");
    std::vector<T> values(numel);
    for (auto& v : values) {
      if constexpr (std::is_same_v<T, float>) v = f32("value");
      else v = f64("value");
    }
    out.value = Tensor<T>(std::move(shape), std::move(values));
    return out;
  }
  std::size_t pos() const { return pos_; }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename T>
std::vector<std::uint8_t> encode_checkpoint(const Model<T>& model, const AdamState<T>& adam, std::uint32_t epoch) {
  const auto& params = model.params();
  if (adam.m.size() != params.size() || adam.v.size() != params.size())
    throw std::invalid_argument("checkpoint: Adam state does not match the model");
  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.uint(kCheckpointVersion);
  w.uint(static_cast<std::uint8_t>(sizeof(T)));
  w.uint(epoch);
  w.str(model.config().to_json());
  for (double m : model.norm_stats.mean) w.f64(m);
  for (double s : model.norm_stats.stddev) w.f64(s);
  w.uint(static_cast<std::uint64_t>(adam.step));
  const auto buffers = model.buffers();
  w.uint(static_cast<std::uint32_t>(params.size() * 3 + buffers.size()));
  for (const auto& p : params) w.array(p.name, p.value);
  for (const auto& b : buffers) w.array(b.name, b.value);
  for (std::size_t i = 0; i < params.size(); ++i) w.array("adam.m." + params[i].name, adam.m[i]);
  for (std::size_t i = 0; i < params.size(); ++i) w.array("adam.v." + params[i].name, adam.v[i]);
  w.uint(fnv1a64(w.data()));
  return std::move(w.data());
}

template <typename T>
Checkpoint<T> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < sizeof kMagic + 8) throw std::runtime_error("checkpoint truncated: " + std::to_string(bytes.size()) + " bytes");
  if (std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) throw std::runtime_error("not a checkpoint (bad magic)");
  const auto body = bytes.first(bytes.size() - 8);
  Reader tail(bytes.last(8));
  const auto stored = tail.uint<std::uint64_t>("checksum");

  Reader r(body);
  r.need(sizeof kMagic, "magic");
  for (std::size_t i = 0; i < sizeof kMagic; ++i) r.uint<std::uint8_t>("magic");
  const auto version = r.uint<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                             std::to_string(kCheckpointVersion) + ")");
  const auto width = r.uint<std::uint8_t>("scalar width");
  if (width != sizeof(T))
    throw std::runtime_error("checkpoint stores " + std::to_string(width) + "-byte reals, expected " +
                             std::to_string(sizeof(T)));
  if (fnv1a64(body) != stored) throw std::runtime_error("checkpoint checksum mismatch (corrupt or truncated file)");

  const auto epoch = r.uint<std::uint32_t>("epoch");
  Model<T> model(ModelConfig::from_json(r.str("config")), 0);
  for (auto& m : model.norm_stats.mean) m = r.f64("norm mean");
  for (auto& s : model.norm_stats.stddev) s = r.f64("norm stddev");
  auto adam = AdamState<T>::zeros_like(model.params());
  adam.step = r.uint<std::uint64_t>("adam step");

  const auto count = r.uint<std::uint32_t>("array count");
  const auto& params = model.params();
  const auto buffers = model.buffers();
  if (count != params.size() * 3 + buffers.size())
    throw std::runtime_error("checkpoint holds " + std::to_string(count) + " arrays, model needs " +
                             std::to_string(params.size() * 3 + buffers.size()));
  auto expect = [](const NamedTensor<T>& got, const std::string& name, const Shape& shape) {
    if (got.name != name) throw std::runtime_error("checkpoint array '" + got.name + "' where '" + name + "' expected");
    if (got.value.shape() != shape)
      throw std::runtime_error("checkpoint array '" + name + "' has shape " + shape_str(got.value.shape()) +
                               ", expected " + shape_str(shape));
  };
  for (auto& p : model.params()) {
    auto a = r.template array<T>();
    expect(a, p.name, p.value.shape());
    p.value = std::move(a.value);
  }
  for (const auto& b : buffers) {
    auto a = r.template array<T>();
    expect(a, b.name, b.value.shape());
    model.set_buffer(b.name, a.value);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto a = r.template array<T>();
    expect(a, "adam.m." + params[i].name, params[i].value.shape());
    adam.m[i] = std::move(a.value);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto a = r.template array<T>();
    expect(a, "adam.v." + params[i].name, params[i].value.shape());
    adam.v[i] = std::move(a.value);
  }
  if (r.pos() != body.size())
    throw std::runtime_error("checkpoint has " + std::to_string(body.size() - r.pos()) + " trailing bytes");
  return Checkpoint<T>{std::move(model), std::move(adam), epoch};
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& model, const AdamState<T>& adam,
                     std::uint32_t epoch) {
  const auto bytes = encode_checkpoint(model, adam, epoch);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write checkpoint " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("failed writing checkpoint " + path.string());
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint<T>(bytes);
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

#define OSREG_INSTANTIATE_CKPT(T)                                                                             \
  template std::vector<std::uint8_t> encode_checkpoint<T>(const Model<T>&, const AdamState<T>&, std::uint32_t); \
  template Checkpoint<T> decode_checkpoint<T>(std::span<const std::uint8_t>);                                  \
  template void save_checkpoint<T>(const std::filesystem::path&, const Model<T>&, const AdamState<T>&,         \
                                   std::uint32_t);                                                             \
  template Checkpoint<T> load_checkpoint<T>(const std::filesystem::path&);

OSREG_INSTANTIATE_CKPT(float)
OSREG_INSTANTIATE_CKPT(double)

}  // namespace osreg
