#include "qforget/params.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "qforget/error.hpp"

namespace qforget {

namespace {

constexpr char kMagic[8] = {'Q', 'F', 'P', 'A', 'R', 'A', 'M', 'S'};
constexpr std::uint32_t kFormatVersion = 1;

// The container is little-endian regardless of host order.
void put_u64(std::ostream& out, std::uint64_t v) {
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(bytes, 8);
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char bytes[8];
  if (!in.read(reinterpret_cast<char*>(bytes), 8)) throw IoError("truncated parameter file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return v;
}

}  // namespace

const char* kind_name(ParamKind kind) {
  switch (kind) {
    case ParamKind::Base: return "base";
    case ParamKind::AdapterA: return "adapter-A";
    case ParamKind::AdapterB: return "adapter-B";
    case ParamKind::Embedding: return "embedding";
  }
  return "base";
}

ParamKind parse_kind(const std::string& text) {
  if (text == "base") return ParamKind::Base;
  if (text == "adapter-A") return ParamKind::AdapterA;
  if (text == "adapter-B") return ParamKind::AdapterB;
  if (text == "embedding") return ParamKind::Embedding;
  throw IoError("unknown parameter kind '" + text + "'");
}

void ParamSet::add(const std::string& name, Tensor value, ParamKind kind, bool frozen) {
  if (entries_.count(name)) throw Error("duplicate parameter '" + name + "'");
  entries_.emplace(name, ParamEntry{std::move(value), frozen, kind});
}

const ParamEntry& ParamSet::at(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw Error("unknown parameter '" + name + "'");
  return it->second;
}

ParamEntry& ParamSet::at(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw Error("unknown parameter '" + name + "'");
  return it->second;
}

bool ParamSet::has_adapters() const {
  for (const auto& [name, e] : entries_) {
    if (e.kind == ParamKind::AdapterA || e.kind == ParamKind::AdapterB) return true;
  }
  return false;
}

bool ParamSet::is_adapter(const std::string& name) const {
  const ParamKind kind = at(name).kind;
  return kind == ParamKind::AdapterA || kind == ParamKind::AdapterB;
}

void ParamSet::set_trainable(bool adapters_only) {
  for (auto& [name, e] : entries_) {
    e.frozen = adapters_only && e.kind != ParamKind::AdapterA && e.kind != ParamKind::AdapterB;
  }
}

std::vector<std::string> ParamSet::trainable_names() const {
  std::vector<std::string> out;
  for (const auto& [name, e] : entries_) {
    if (!e.frozen) out.push_back(name);
  }
  return out;
}

std::size_t ParamSet::element_count() const {
  std::size_t n = 0;
  for (const auto& [name, e] : entries_) n += e.value.size();
  return n;
}

NamedTensors ParamSet::values() const {
  NamedTensors out;
  for (const auto& [name, e] : entries_) out.emplace(name, e.value);
  return out;
}

double distance(const ParamSet& a, const ParamSet& b, bool trainable_only) {
  double sum = 0.0;
  for (const auto& [name, ea] : a) {
    if (trainable_only && ea.frozen) continue;
    const ParamEntry& eb = b.at(name);
    if (ea.value.shape() != eb.value.shape()) {
      throw ShapeError("distance: shape mismatch for '" + name + "' " + shape_string(ea.value.shape()) + " vs " +
                       shape_string(eb.value.shape()));
    }
    for (std::size_t i = 0; i < ea.value.size(); ++i) {
      const double d = ea.value[i] - eb.value[i];
      sum += d * d;
    }
  }
  return std::sqrt(sum);
}

void save_params(const ParamSet& params, const std::filesystem::path& path) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(kMagic, sizeof kMagic);
    put_u64(out, kFormatVersion);
    put_u64(out, params.size());
    for (const auto& [name, e] : params) {
      put_u64(out, name.size());
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      put_u64(out, static_cast<std::uint64_t>(e.kind));
      put_u64(out, e.frozen ? 1 : 0);
      put_u64(out, e.value.rank());
      for (std::size_t extent : e.value.shape()) put_u64(out, extent);
      for (double v : e.value.values()) put_u64(out, std::bit_cast<std::uint64_t>(v));
    }
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);

  std::ostringstream manifest;
  manifest << "# qforget parameter manifest v" << kFormatVersion << "\n";
  manifest << "# name\tshape\tfrozen\tkind\n";
  for (const auto& [name, e] : params) {
    manifest << name << '\t' << shape_string(e.value.shape()) << '\t' << (e.frozen ? 1 : 0) << '\t'
             << kind_name(e.kind) << '\n';
  }
  const std::filesystem::path mpath = path.string() + ".manifest";
  const std::filesystem::path mtmp = mpath.string() + ".tmp";
  {
    std::ofstream out(mtmp, std::ios::trunc);
    if (!out) throw IoError("cannot write " + mtmp.string());
    out << manifest.str();
  }
  std::filesystem::rename(mtmp, mpath);
}

ParamSet load_params(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open parameter file " + path.string());
  char magic[8];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw IoError(path.string() + " is not a parameter container");
  }
  const std::uint64_t version = get_u64(in);
  if (version != kFormatVersion) throw IoError("unsupported parameter container version " + std::to_string(version));
  const std::uint64_t count = get_u64(in);
  ParamSet params;
  for (std::uint64_t k = 0; k < count; ++k) {
    const std::uint64_t len = get_u64(in);
    if (len > 4096) throw IoError("corrupt parameter name length");
    std::string name(len, '\0');
    if (!in.read(name.data(), static_cast<std::streamsize>(len))) throw IoError("truncated parameter file");
    const std::uint64_t kind = get_u64(in);
    if (kind > 3) throw IoError("corrupt parameter kind");
    const bool frozen = get_u64(in) != 0;
    const std::uint64_t rank = get_u64(in);
    if (rank == 0 || rank > 8) throw IoError("corrupt tensor rank");
    Shape shape(rank);
    std::uint64_t n = 1;
    for (auto& extent : shape) {
      extent = get_u64(in);
      if (extent == 0 || extent > (1u << 28)) throw IoError("corrupt tensor extent");
      n *= extent;
    }
    std::vector<double> values(n);
    for (double& v : values) v = std::bit_cast<double>(get_u64(in));
    params.add(name, Tensor(std::move(shape), std::move(values)), static_cast<ParamKind>(kind), frozen);
  }
  return params;
}

}  // namespace qforget
