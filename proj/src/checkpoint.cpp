#include "ptrack/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>

#include "ptrack/errors.hpp"

namespace ptrack {

namespace {

constexpr char kMagic[4] = {'P', 'T', 'R', 'K'};
constexpr unsigned char kVersion = 1;

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& buf, double v) { put_u64(buf, std::bit_cast<std::uint64_t>(v)); }

/// Sequential reader over the whole file, kept in memory; checkpoints are a
/// few MB at most.
struct Cursor {
  std::string data;
  std::size_t pos = 0;
  std::string path;

  void need(std::size_t n, const char* what) const {
    if (pos + n > data.size())
      throw DataError("checkpoint " + path + ": truncated " + what + " at byte " +
                      std::to_string(pos));
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
};

}  // namespace

template <typename T>
void save_checkpoint(const std::string& path, const ParamList<T>& params) {
  std::string buf;
  buf.append(kMagic, 4);
  buf.push_back(static_cast<char>(kVersion));
  for (const auto& [name, tensor] : params) {
    if (name.empty()) throw ParameterError("save_checkpoint: empty parameter name");
    put_u32(buf, static_cast<std::uint32_t>(name.size()));
    buf.append(name);
    const Shape& shape = tensor.shape();
    put_u32(buf, static_cast<std::uint32_t>(shape.size()));
    for (std::size_t e : shape) put_u64(buf, e);
    for (T v : tensor.values()) put_f64(buf, static_cast<double>(v));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("save_checkpoint: cannot open " + path + " for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw DataError("save_checkpoint: short write to " + path);
}

std::vector<CheckpointRecord> read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("read_checkpoint: cannot open " + path);
  Cursor cur;
  cur.path = path;
  cur.data.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  cur.need(5, "header");
  if (cur.data.compare(0, 4, kMagic, 4) != 0)
    throw DataError("checkpoint " + path + ": bad magic at byte 0");
  unsigned char version = static_cast<unsigned char>(cur.data[4]);
  if (version != kVersion)
    throw DataError("checkpoint " + path + ": unsupported version " + std::to_string(version) +
                    " at byte 4");
  cur.pos = 5;
  std::vector<CheckpointRecord> records;
  while (cur.pos < cur.data.size()) {
    CheckpointRecord rec;
    std::uint32_t name_len = cur.u32("name length");
    if (name_len == 0)
      throw DataError("checkpoint " + path + ": empty name at byte " + std::to_string(cur.pos));
    cur.need(name_len, "name");
    rec.name.assign(cur.data, cur.pos, name_len);
    cur.pos += name_len;
    std::uint32_t rank = cur.u32("rank");
    std::size_t numel = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      std::uint64_t extent = cur.u64("extent");
      if (extent == 0)
        throw DataError("checkpoint " + path + ": zero extent in " + rec.name + " at byte " +
                        std::to_string(cur.pos - 8));
      rec.shape.push_back(static_cast<std::size_t>(extent));
      numel *= static_cast<std::size_t>(extent);
    }
    rec.values.reserve(numel);
    for (std::size_t i = 0; i < numel; ++i) rec.values.push_back(cur.f64("value"));
    records.push_back(std::move(rec));
  }
  return records;
}

template <typename T>
void load_checkpoint(const std::string& path, ParamList<T>& params) {
  std::vector<CheckpointRecord> records = read_checkpoint(path);
  std::map<std::string, const CheckpointRecord*> by_name;
  for (const CheckpointRecord& rec : records) {
    if (!by_name.emplace(rec.name, &rec).second)
      throw DataError("checkpoint " + path + ": duplicate record " + rec.name);
  }
  std::size_t used = 0;
  for (auto& [name, tensor] : params) {
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw DataError("checkpoint " + path + ": missing parameter " + name);
    const CheckpointRecord& rec = *it->second;
    if (rec.shape != tensor.shape())
      throw DataError("checkpoint " + path + ": shape mismatch for " + name + " (file " +
                      shape_str(rec.shape) + ", model " + shape_str(tensor.shape()) + ")");
    std::vector<T>& dst = tensor.values_mut();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(rec.values[i]);
    ++used;
  }
  if (used != records.size())
    throw DataError("checkpoint " + path + ": file holds " + std::to_string(records.size()) +
                    " records but the model has " + std::to_string(used) + " matching parameters");
}

template void save_checkpoint(const std::string&, const ParamList<float>&);
template void save_checkpoint(const std::string&, const ParamList<double>&);
template void load_checkpoint(const std::string&, ParamList<float>&);
template void load_checkpoint(const std::string&, ParamList<double>&);

}  // namespace ptrack
