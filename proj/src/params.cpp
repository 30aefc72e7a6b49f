#include "foam/params.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>

namespace foam::nets {

namespace {

constexpr char kMagic[6] = {'F', 'O', 'A', 'M', 'C', 'K'};
constexpr uint32_t kFormatVersion = 1;

void write_u32(std::ofstream& out, uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

uint32_t read_u32(std::ifstream& in) {
  uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in) throw std::runtime_error("checkpoint load: truncated file");
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const CheckpointData& data) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint save: cannot open " + tmp);
    out.write(kMagic, sizeof(kMagic));
    write_u32(out, kFormatVersion);
    write_u32(out, static_cast<uint32_t>(data.config_json.size()));
    out.write(data.config_json.data(), static_cast<std::streamsize>(data.config_json.size()));
    write_u32(out, static_cast<uint32_t>(data.arrays.size()));
    for (const auto& a : data.arrays) {
      write_u32(out, static_cast<uint32_t>(a.name.size()));
      out.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
      write_u32(out, static_cast<uint32_t>(a.dims.size()));
      size_t numel = 1;
      for (int d : a.dims) {
        write_u32(out, static_cast<uint32_t>(d));
        numel *= static_cast<size_t>(d);
      }
      if (numel != a.data.size())
        throw std::invalid_argument("checkpoint save: dims/data mismatch for " + a.name);
      out.write(reinterpret_cast<const char*>(a.data.data()),
                static_cast<std::streamsize>(a.data.size() * sizeof(float)));
    }
    if (!out) throw std::runtime_error("checkpoint save: write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("checkpoint save: rename to " + path + " failed");
}

CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint load: cannot open " + path);
  char magic[6] = {};
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("checkpoint load: bad magic in " + path);
  const uint32_t version = read_u32(in);
  if (version != kFormatVersion)
    throw std::runtime_error("checkpoint load: unsupported version " + std::to_string(version));
  CheckpointData data;
  const uint32_t cfg_len = read_u32(in);
  data.config_json.resize(cfg_len);
  in.read(data.config_json.data(), cfg_len);
  if (!in) throw std::runtime_error("checkpoint load: truncated config");
  const uint32_t count = read_u32(in);
  data.arrays.resize(count);
  for (auto& a : data.arrays) {
    const uint32_t name_len = read_u32(in);
    a.name.resize(name_len);
    in.read(a.name.data(), name_len);
    const uint32_t ndim = read_u32(in);
    a.dims.resize(ndim);
    size_t numel = 1;
    for (auto& d : a.dims) {
      d = static_cast<int>(read_u32(in));
      numel *= static_cast<size_t>(d);
    }
    a.data.resize(numel);
    in.read(reinterpret_cast<char*>(a.data.data()),
            static_cast<std::streamsize>(numel * sizeof(float)));
    if (!in) throw std::runtime_error("checkpoint load: truncated array " + a.name);
  }
  return data;
}

}  // namespace foam::nets
