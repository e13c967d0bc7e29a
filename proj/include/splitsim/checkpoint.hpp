#pragma once

// Checkpoint layout (all integers and floats little-endian):
//
//   "splitsim-checkpoint 1 role=<role> cut=<cut> layers=<L>\n"   ASCII header line
//   repeated L times:
//     u8  has_params                        0 for activation layers
//     if has_params, two tensors (weight [out,in], then bias [out]), each:
//       u32 rank, u64 dims[rank], f64 values[prod(dims)]
//
// Optimizer state is not stored; a checkpoint holds model parameters only.

#include <bit>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "splitsim/error.hpp"
#include "splitsim/nn.hpp"

namespace splitsim {

struct CheckpointHeader {
  int version = 1;
  std::string role = "full";
  std::size_t cut = 0;
  std::size_t layers = 0;
};

namespace detail {

inline void put_le(std::string& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  explicit ByteReader(const std::string& bytes, std::size_t offset = 0) : bytes_(bytes), pos_(offset) {}

  std::uint64_t le(int n) {
    if (pos_ + static_cast<std::size_t>(n) > bytes_.size()) throw ParseError("checkpoint truncated", pos_);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= std::uint64_t(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::size_t pos_;
};

}  // namespace detail

inline std::string encode_checkpoint(const std::vector<LayerParams>& layers, const CheckpointHeader& hdr) {
  std::string out = "splitsim-checkpoint " + std::to_string(hdr.version) + " role=" + hdr.role +
                    " cut=" + std::to_string(hdr.cut) + " layers=" + std::to_string(layers.size()) + "\n";
  auto put_tensor = [&](const Tensor& t) {
    detail::put_le(out, t.rank(), 4);
    for (std::size_t d : t.shape()) detail::put_le(out, d, 8);
    for (double v : t.values()) detail::put_le(out, std::bit_cast<std::uint64_t>(v), 8);
  };
  for (const auto& l : layers) {
    out.push_back(l.empty() ? '\0' : '\1');
    if (!l.empty()) {
      put_tensor(l.weight);
      put_tensor(l.bias);
    }
  }
  return out;
}

inline std::vector<LayerParams> decode_checkpoint(const std::string& bytes, CheckpointHeader* header = nullptr) {
  const auto nl = bytes.find('\n');
  if (nl == std::string::npos) throw ParseError("checkpoint header line missing", 0);
  CheckpointHeader hdr;
  {
    std::istringstream in(bytes.substr(0, nl));
    std::string magic;
    in >> magic >> hdr.version;
    if (magic != "splitsim-checkpoint" || !in) throw ParseError("not a splitsim checkpoint", 0);
    if (hdr.version != 1) throw ParseError("unsupported checkpoint version " + std::to_string(hdr.version), 0);
    std::string field;
    while (in >> field) {
      const auto eq = field.find('=');
      if (eq == std::string::npos) throw ParseError("malformed header field '" + field + "'", 0);
      const auto key = field.substr(0, eq);
      const auto val = field.substr(eq + 1);
      if (key == "role") hdr.role = val;
      else if (key == "cut") hdr.cut = std::stoul(val);
      else if (key == "layers") hdr.layers = std::stoul(val);
    }
  }
  detail::ByteReader rd(bytes, nl + 1);
  auto get_tensor = [&]() {
    const auto rank = rd.le(4);
    if (rank == 0 || rank > 8) throw ParseError("implausible tensor rank", rd.pos() - 4);
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) d = rd.le(8);
    std::vector<double> data(Tensor::element_count(shape));
    for (double& v : data) v = std::bit_cast<double>(rd.le(8));
    return Tensor(std::move(shape), std::move(data));
  };
  std::vector<LayerParams> layers(hdr.layers);
  for (auto& l : layers) {
    if (rd.le(1) != 0) {
      l.weight = get_tensor();
      l.bias = get_tensor();
    }
  }
  if (!rd.done()) throw ParseError("trailing bytes after checkpoint", rd.pos());
  if (header) *header = hdr;
  return layers;
}

inline void write_checkpoint(const std::string& path, const std::vector<LayerParams>& layers,
                             const CheckpointHeader& hdr) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path + " for writing");
  const auto bytes = encode_checkpoint(layers, hdr);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline std::vector<LayerParams> read_checkpoint(const std::string& path, CheckpointHeader* header = nullptr) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return decode_checkpoint(ss.str(), header);
}

}  // namespace splitsim
