#include "regenlab/checkpoint.h"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "regenlab/errors.h"

static_assert(std::endian::native == std::endian::little,
              "checkpoint io assumes a little-endian host");

namespace regenlab {

namespace {

constexpr char kMagic[] = "REGENLAB1";
constexpr std::size_t kMagicLen = 9;

void write_u64(std::ofstream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint64_t read_u64(std::ifstream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in) throw Error("checkpoint: truncated file");
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const NamedTensors& tensors) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("checkpoint: cannot open " + path + " for writing");
  out.write(kMagic, kMagicLen);
  for (const auto& [name, tensor] : tensors) {
    write_u64(out, name.size());
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    const auto& shape = tensor.shape();
    write_u64(out, shape.size());
    for (std::size_t d : shape) write_u64(out, d);
    const auto data = tensor.data();
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size() * sizeof(double)));
  }
  out.flush();
  if (!out) throw Error("checkpoint: write failed for " + path);
}

NamedTensors load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("checkpoint: cannot open " + path);
  char magic[kMagicLen];
  in.read(magic, kMagicLen);
  if (!in || std::memcmp(magic, kMagic, kMagicLen) != 0)
    throw Error("checkpoint: bad magic in " + path);

  NamedTensors result;
  while (true) {
    in.peek();
    if (in.eof()) break;
    const std::uint64_t name_len = read_u64(in);
    if (name_len > (1u << 20)) throw Error("checkpoint: implausible name length");
    std::string name(name_len, '\0');
    in.read(name.data(), static_cast<std::streamsize>(name_len));
    const std::uint64_t rank = read_u64(in);
    if (rank > 8) throw Error("checkpoint: implausible rank");
    std::vector<std::size_t> shape(rank);
    std::size_t count = 1;
    for (auto& d : shape) {
      d = static_cast<std::size_t>(read_u64(in));
      count *= d;
    }
    std::vector<double> data(count);
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(count * sizeof(double)));
    if (!in) throw Error("checkpoint: truncated tensor payload in " + path);
    result.emplace_back(std::move(name), Tensor::from_data(std::move(shape), std::move(data)));
  }
  return result;
}

}  // namespace regenlab
