#include "refquery/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "refquery/data.hpp"
#include "refquery/errors.hpp"

namespace refquery {

namespace {

constexpr char kMagic[4] = {'R', 'Q', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& buf, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  buf.append(b, 4);
}

std::uint32_t get_u32(std::ifstream& in, const std::string& path) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 4);
  if (!in) throw ValidationError("checkpoint " + path + ": truncated");
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const CheckpointData& ckpt) {
  std::string buf;
  buf.append(kMagic, 4);
  put_u32(buf, kVersion);
  put_u32(buf, static_cast<std::uint32_t>(ckpt.config_json.size()));
  buf += ckpt.config_json;
  put_u32(buf, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    put_u32(buf, static_cast<std::uint32_t>(name.size()));
    buf += name;
    put_u32(buf, static_cast<std::uint32_t>(t.shape().size()));
    for (int d : t.shape()) put_u32(buf, static_cast<std::uint32_t>(d));
    const std::size_t off = buf.size();
    buf.resize(off + t.value().size() * 4);
    std::memcpy(buf.data() + off, t.value().data(), t.value().size() * 4);
  }
  io::write_file_atomic(path, buf.data(), buf.size());
}

CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("missing checkpoint: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw ValidationError("checkpoint " + path + ": bad magic");
  const std::uint32_t version = get_u32(in, path);
  if (version != kVersion)
    throw ValidationError("checkpoint " + path + ": unsupported version " + std::to_string(version));
  CheckpointData ckpt;
  const std::uint32_t cfg_len = get_u32(in, path);
  ckpt.config_json.resize(cfg_len);
  in.read(ckpt.config_json.data(), cfg_len);
  if (!in) throw ValidationError("checkpoint " + path + ": truncated config");
  const std::uint32_t count = get_u32(in, path);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = get_u32(in, path);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in) throw ValidationError("checkpoint " + path + ": truncated tensor name");
    const std::uint32_t ndim = get_u32(in, path);
    Shape shape;
    std::int64_t n = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      shape.push_back(static_cast<int>(get_u32(in, path)));
      n *= shape.back();
    }
    std::vector<float> data(static_cast<std::size_t>(n));
    in.read(reinterpret_cast<char*>(data.data()), n * 4);
    if (!in) throw ValidationError("checkpoint " + path + ": truncated tensor " + name);
    ckpt.tensors.emplace_back(name, Tensor<float>::from(shape, std::move(data)));
  }
  return ckpt;
}

}  // namespace refquery
