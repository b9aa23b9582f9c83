#pragma once

// Parameter file: a text header
//
//   dunets-params 1
//   <count>
//   <name> <rank> <extent...> <offset>      (offset in doubles from payload start)
//   end
//
// followed by the raw little-endian double payload.

#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "dunets/io.hpp"
#include "dunets/layers.hpp"

namespace dunets {

struct NamedTensor {
  std::string name;
  Tensor value;
};

inline std::string encode_params(const ParamStore& store) {
  std::ostringstream head;
  head << "dunets-params 1\n" << store.size() << "\n";
  std::size_t offset = 0;
  for (const auto& p : store) {
    head << p.name << ' ' << p.value.rank();
    for (auto e : p.value.shape()) head << ' ' << e;
    head << ' ' << offset << '\n';
    offset += p.value.size();
  }
  head << "end\n";
  std::string buf = head.str();
  for (const auto& p : store) io::append_le_doubles(buf, p.value.data(), p.value.size());
  return buf;
}

inline std::vector<NamedTensor> decode_params(const std::string& bytes, const std::string& origin) {
  const auto end_marker = bytes.find("\nend\n");
  if (bytes.rfind("dunets-params 1\n", 0) != 0 || end_marker == std::string::npos)
    throw io::IoError(origin + ": not a parameter file");
  const std::size_t payload = end_marker + 5;
  std::istringstream head(bytes.substr(0, end_marker + 1));
  std::string magic, version;
  std::size_t count = 0;
  head >> magic >> version >> count;
  std::vector<NamedTensor> out;
  const std::size_t total = (bytes.size() - payload) / 8;
  for (std::size_t i = 0; i < count; ++i) {
    NamedTensor nt;
    std::size_t rank = 0, offset = 0;
    if (!(head >> nt.name >> rank)) throw io::IoError(origin + ": truncated header");
    Shape shape(rank);
    for (auto& e : shape) head >> e;
    head >> offset;
    if (!head || rank == 0) throw io::IoError(origin + ": malformed entry for " + nt.name);
    nt.value = Tensor(shape);
    if (offset + nt.value.size() > total) throw io::IoError(origin + ": payload too short for " + nt.name);
    io::decode_le_doubles(bytes.data() + payload + 8 * offset, nt.value.data(), nt.value.size());
    out.push_back(std::move(nt));
  }
  return out;
}

inline void save_params(const ParamStore& store, const std::filesystem::path& path) {
  io::write_file(path, encode_params(store));
}

/// Loads values into an existing store; names and shapes must match one-to-one.
inline void load_params(ParamStore& store, const std::filesystem::path& path) {
  auto entries = decode_params(io::read_file(path), path.string());
  if (entries.size() != store.size())
    throw io::IoError(path.string() + ": " + std::to_string(entries.size()) + " tensors, model has " +
                      std::to_string(store.size()));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& p = store[i];
    if (entries[i].name != p.name || entries[i].value.shape() != p.value.shape())
      throw io::IoError(path.string() + ": entry " + entries[i].name + " " + shape_str(entries[i].value.shape()) +
                        " does not match " + p.name + " " + shape_str(p.value.shape()));
    p.value = std::move(entries[i].value);
  }
}

}  // namespace dunets
