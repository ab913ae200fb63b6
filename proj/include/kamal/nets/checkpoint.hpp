#pragma once

// Binary container (all integers little-endian, no padding):
//   "KACP" | u32 version=1 | u32 len + spec text | u32 tensor count |
//   per tensor: u32 len + name, u8 dtype=0 (f32), u8 rank,
//               rank x u64 extents, raw f32 payload.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "kamal/core/error.hpp"
#include "kamal/core/tensor.hpp"
#include "kamal/nets/network.hpp"

namespace kamal {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct Container {
  std::string spec_text;
  std::vector<NamedTensor> tensors;

  [[nodiscard]] const Tensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t.tensor;
    return nullptr;
  }
};

inline constexpr char kCheckpointMagic[4] = {'K', 'A', 'C', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void f32(float f) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    u32(u);
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  [[nodiscard]] const std::vector<unsigned char>& buffer() const { return buf_; }

 private:
  std::vector<unsigned char> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<unsigned char> b) : buf_(std::move(b)) {}
  void need(std::size_t n, const char* what) const {
    require<IoError>(pos_ + n <= buf_.size(), "checkpoint truncated while reading ", what);
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return buf_[pos_++];
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf_[pos_++]) << (8 * i);
    return v;
  }
  float f32(const char* what) {
    const std::uint32_t u = u32(what);
    float f;
    std::memcpy(&f, &u, 4);
    return f;
  }
  std::string str(const char* what) {
    const std::uint32_t n = u32(what);
    need(n, what);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  [[nodiscard]] bool at_end() const { return pos_ == buf_.size(); }

 private:
  std::vector<unsigned char> buf_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<unsigned char> encode_container(const Container& c) {
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  w.str(c.spec_text);
  w.u32(static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& nt : c.tensors) {
    w.str(nt.name);
    w.u8(0);
    w.u8(static_cast<std::uint8_t>(nt.tensor.rank()));
    for (auto e : nt.tensor.shape()) w.u64(e);
    for (float v : nt.tensor.data()) w.f32(v);
  }
  return w.buffer();
}

inline Container decode_container(std::vector<unsigned char> bytes) {
  detail::ByteReader r(std::move(bytes));
  char magic[4];
  for (char& m : magic) m = static_cast<char>(r.u8("magic"));
  require<IoError>(std::memcmp(magic, kCheckpointMagic, 4) == 0, "bad magic: not a KACP checkpoint");
  const std::uint32_t version = r.u32("version");
  require<IoError>(version == kCheckpointVersion, "unsupported checkpoint version ", version);
  Container c;
  c.spec_text = r.str("spec text");
  const std::uint32_t count = r.u32("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor nt;
    nt.name = r.str("tensor name");
    const std::uint8_t dtype = r.u8("dtype");
    require<IoError>(dtype == 0, "tensor '", nt.name, "': unsupported dtype ", int(dtype));
    const std::uint8_t rank = r.u8("rank");
    require<IoError>(rank >= 1 && rank <= 4, "tensor '", nt.name, "': bad rank ", int(rank));
    Shape shape;
    std::size_t total = 1;
    for (int d = 0; d < rank; ++d) {
      const std::uint64_t e = r.u64("extent");
      require<IoError>(e >= 1 && e < (1ULL << 32), "tensor '", nt.name, "': bad extent ", e);
      shape.push_back(static_cast<std::size_t>(e));
      total *= static_cast<std::size_t>(e);
    }
    r.need(total * 4, "tensor payload");
    std::vector<float> data(total);
    for (auto& v : data) v = r.f32("tensor payload");
    nt.tensor = Tensor(std::move(shape), std::move(data));
    c.tensors.push_back(std::move(nt));
  }
  require<IoError>(r.at_end(), "trailing bytes after checkpoint payload");
  return c;
}

inline void write_container(const std::filesystem::path& path, const Container& c) {
  const auto bytes = encode_container(c);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  require<IoError>(static_cast<bool>(os), "cannot open '", path.string(), "' for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require<IoError>(static_cast<bool>(os), "write failed for '", path.string(), "'");
}

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  require<IoError>(static_cast<bool>(is), "cannot open '", path.string(), "'");
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline Container read_container(const std::filesystem::path& path) { return decode_container(read_file_bytes(path)); }

// Network tensors plus any extra named tensors (e.g. "meta.classes").
inline Container to_container(const Network& net, const std::vector<NamedTensor>& extra = {}) {
  Container c;
  c.spec_text = net.spec.canonical();
  for (const Param* p : net.params()) c.tensors.push_back({p->name, p->value});
  for (const auto& e : extra) c.tensors.push_back(e);
  return c;
}

// Rebuilds a network, checking every parameter against the embedded spec.
// Tensors outside the network namespace are returned through `extras`.
inline Network from_container(const Container& c, std::map<std::string, Tensor>* extras = nullptr) {
  NetworkSpec spec;
  try {
    spec = NetworkSpec::parse(c.spec_text);
    spec.validate();
  } catch (const ConfigError& e) {
    fail<IoError>("checkpoint spec invalid: ", e.what());
  }
  const auto shapes = spec.shapes();
  Network net;
  net.spec = spec;
  net.layers.resize(spec.depth());
  std::vector<bool> seen_w(spec.depth()), seen_b(spec.depth());
  for (const auto& nt : c.tensors) {
    if (nt.name.rfind("layer", 0) != 0) {
      if (extras) (*extras)[nt.name] = nt.tensor;
      continue;
    }
    const auto dot = nt.name.find('.');
    require<IoError>(dot != std::string::npos, "bad tensor name '", nt.name, "'");
    const std::size_t l = std::stoul(nt.name.substr(5, dot - 5));
    const std::string what = nt.name.substr(dot + 1);
    require<IoError>(l >= 1 && l <= spec.depth(), "tensor '", nt.name, "' names a layer outside the spec");
    const LayerSpec& ls = spec.layer(l);
    Shape expect;
    if (what == "weight") expect = weight_shape(ls, shapes.in_features[l - 1]);
    else if (what == "bias") expect = {ls.out_ch};
    else if (what == "fam") expect = {ls.in_ch, ls.in_ch};
    else fail<IoError>("unknown tensor '", nt.name, "'");
    require<IoError>(nt.tensor.shape() == expect, "shape mismatch for '", nt.name, "': file has ",
                     shape_str(nt.tensor.shape()), ", spec requires ", shape_str(expect));
    LayerParams& lp = net.layer(l);
    if (what == "weight") {
      lp.weight = Param(nt.name, nt.tensor);
      seen_w[l - 1] = true;
    } else if (what == "bias") {
      lp.bias = Param(nt.name, nt.tensor);
      seen_b[l - 1] = true;
    } else {
      require<IoError>(l >= 2, "FAM on layer 1 is not allowed");
      lp.fam = Param(nt.name, nt.tensor);
    }
  }
  for (std::size_t l = 1; l <= spec.depth(); ++l)
    require<IoError>(seen_w[l - 1] && seen_b[l - 1], "checkpoint lacks parameters of layer ", l);
  return net;
}

inline void save_checkpoint(const Network& net, const std::filesystem::path& path,
                            const std::vector<NamedTensor>& extra = {}) {
  write_container(path, to_container(net, extra));
}

inline Network load_checkpoint(const std::filesystem::path& path, std::map<std::string, Tensor>* extras = nullptr) {
  return from_container(read_container(path), extras);
}

}  // namespace kamal
