#include "ctrack/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "ctrack/config.hpp"

namespace ctrack {

namespace {

constexpr const char* kMagic = "ctrack-checkpoint";

std::string kind_prefix(CheckpointError::Kind k) {
  switch (k) {
    case CheckpointError::Kind::kNotFound: return "checkpoint not found";
    case CheckpointError::Kind::kCorruptManifest: return "corrupt manifest";
    case CheckpointError::Kind::kTruncatedBlob: return "truncated blob";
    case CheckpointError::Kind::kVersionMismatch: return "version mismatch";
    case CheckpointError::Kind::kMissingTensor: return "missing tensor";
  }
  return "checkpoint error";
}

std::size_t dtype_size(DType d) { return d == DType::kF32 ? 4 : 8; }

template <typename T>
constexpr DType dtype_of() {
  return sizeof(T) == 4 ? DType::kF32 : DType::kF64;
}

template <typename T>
std::vector<unsigned char> to_le_bytes(const std::vector<T>& v) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  std::vector<unsigned char> out(v.size() * sizeof(T));
  for (std::size_t i = 0; i < v.size(); ++i) {
    const U u = std::bit_cast<U>(v[i]);
    for (std::size_t b = 0; b < sizeof(T); ++b) {
      out[i * sizeof(T) + b] = static_cast<unsigned char>((u >> (8 * b)) & 0xff);
    }
  }
  return out;
}

template <typename Src, typename Dst>
void from_le_bytes(const std::vector<unsigned char>& bytes, std::vector<Dst>& out) {
  using U = std::conditional_t<sizeof(Src) == 4, std::uint32_t, std::uint64_t>;
  const std::size_t n = bytes.size() / sizeof(Src);
  out.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    U u = 0;
    for (std::size_t b = 0; b < sizeof(Src); ++b) {
      u |= static_cast<U>(bytes[i * sizeof(Src) + b]) << (8 * b);
    }
    out[i] = static_cast<Dst>(std::bit_cast<Src>(u));
  }
}

[[noreturn]] void corrupt(const std::string& what) {
  throw CheckpointError(CheckpointError::Kind::kCorruptManifest, what);
}

std::size_t parse_size(const std::string& s, const std::string& what) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
    corrupt("bad " + what + " '" + s + "'");
  }
  try {
    return std::stoull(s);
  } catch (const std::exception&) {
    corrupt("bad " + what + " '" + s + "'");
  }
}

Regime parse_regime(const std::string& s) {
  for (Regime r : {Regime::kTeacher, Regime::kCompress, Regime::kNaive, Regime::kDistill,
                   Regime::kDecoupled}) {
    if (regime_name(r) == s) return r;
  }
  corrupt("unknown regime '" + s + "'");
}

}  // namespace

CheckpointError::CheckpointError(Kind kind, const std::string& detail)
    : std::runtime_error(kind_prefix(kind) + ": " + detail), kind_(kind) {}

const StoredTensor* Checkpoint::find(const std::string& name) const {
  for (const StoredTensor& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

bool Checkpoint::has_model(const std::string& prefix) const {
  return find(prefix + ".embed.patch.weight") != nullptr;
}

template <typename T>
void add_model(Checkpoint& ckpt, const std::string& prefix, const TrackerModel<T>& model) {
  model.visit_parameters([&](const std::string& name, const Tensor<T>& t) {
    ckpt.tensors.push_back(StoredTensor{prefix + "." + name, dtype_of<T>(), t.shape,
                                        to_le_bytes(t.data)});
  });
}

template <typename T>
TrackerModel<T> extract_model(const Checkpoint& ckpt, const std::string& prefix,
                              const TrackerConfig& config) {
  Rng rng(0);
  TrackerModel<T> m = TrackerModel<T>::init(config, rng);
  m.visit_parameters([&](const std::string& name, Tensor<T>& t) {
    const StoredTensor* s = ckpt.find(prefix + "." + name);
    if (!s) throw CheckpointError(CheckpointError::Kind::kMissingTensor, prefix + "." + name);
    if (s->shape != t.shape) {
      throw CheckpointError(CheckpointError::Kind::kCorruptManifest,
                            s->name + " has shape " + shape_str(s->shape) + ", expected " +
                                shape_str(t.shape));
    }
    if (s->dtype == DType::kF32) {
      from_le_bytes<float>(s->bytes, t.data);
    } else {
      from_le_bytes<double>(s->bytes, t.data);
    }
  });
  return m;
}

std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt) {
  std::ostringstream head;
  head << kMagic << "\n";
  head << "version " << ckpt.version << "\n";
  head << "regime " << regime_name(ckpt.regime) << "\n";
  std::istringstream cfg(serialize_config(ckpt.config));
  std::string line;
  while (std::getline(cfg, line)) head << "config " << line << "\n";
  std::size_t offset = 0;
  for (const StoredTensor& t : ckpt.tensors) {
    if (t.name.empty() || t.name.find_first_of(" \n") != std::string::npos) {
      throw std::invalid_argument("checkpoint: invalid tensor name '" + t.name + "'");
    }
    if (t.bytes.size() != shape_numel(t.shape) * dtype_size(t.dtype)) {
      throw std::invalid_argument("checkpoint: byte length of " + t.name + " does not match its shape");
    }
    head << "tensor " << t.name << " " << (t.dtype == DType::kF32 ? "f32" : "f64") << " ";
    for (std::size_t i = 0; i < t.shape.size(); ++i) head << (i ? "," : "") << t.shape[i];
    head << " " << offset << " " << t.bytes.size() << "\n";
    offset += t.bytes.size();
  }
  head << "blob " << offset << "\n";
  const std::string h = head.str();
  std::vector<unsigned char> out(h.begin(), h.end());
  out.reserve(out.size() + offset);
  for (const StoredTensor& t : ckpt.tensors) out.insert(out.end(), t.bytes.begin(), t.bytes.end());
  return out;
}

Checkpoint decode_checkpoint(const std::vector<unsigned char>& file) {
  std::size_t pos = 0;
  std::size_t line_no = 0;
  auto next_line = [&]() -> std::string {
    const unsigned char* begin = file.data() + pos;
    const void* nl = std::memchr(begin, '\n', file.size() - pos);
    if (!nl) corrupt("unterminated manifest line " + std::to_string(line_no + 1));
    const auto len = static_cast<std::size_t>(static_cast<const unsigned char*>(nl) - begin);
    std::string s(reinterpret_cast<const char*>(begin), len);
    pos += len + 1;
    ++line_no;
    return s;
  };
  if (file.empty()) corrupt("empty file");
  if (next_line() != kMagic) corrupt("missing header");
  {
    const std::string v = next_line();
    if (v.rfind("version ", 0) != 0) corrupt("missing version line");
    const std::string num = v.substr(8);
    const bool negative = !num.empty() && num[0] == '-';
    const std::size_t ver = parse_size(negative ? num.substr(1) : num, "version");
    if (negative || ver != static_cast<std::size_t>(kCheckpointVersion)) {
      throw CheckpointError(CheckpointError::Kind::kVersionMismatch,
                            "file has version " + num + ", reader supports " +
                                std::to_string(kCheckpointVersion));
    }
  }
  Checkpoint ck;
  std::string config_text;
  struct Extent {
    std::size_t offset, length;
  };
  std::vector<Extent> extents;
  std::size_t blob_size = 0;
  bool have_regime = false;
  for (;;) {
    const std::string line = next_line();
    const auto sp = line.find(' ');
    const std::string tag = line.substr(0, sp);
    const std::string rest = sp == std::string::npos ? "" : line.substr(sp + 1);
    if (tag == "regime") {
      ck.regime = parse_regime(rest);
      have_regime = true;
    } else if (tag == "config") {
      config_text += rest + "\n";
    } else if (tag == "tensor") {
      std::istringstream ts(rest);
      std::string name, dtype, shape, off, len, extra;
      if (!(ts >> name >> dtype >> shape >> off >> len) || (ts >> extra)) {
        corrupt("malformed tensor entry on line " + std::to_string(line_no));
      }
      StoredTensor t;
      t.name = name;
      if (dtype == "f32") t.dtype = DType::kF32;
      else if (dtype == "f64") t.dtype = DType::kF64;
      else corrupt("unknown dtype '" + dtype + "' on line " + std::to_string(line_no));
      std::stringstream ss(shape);
      std::string d;
      while (std::getline(ss, d, ',')) t.shape.push_back(parse_size(d, "dimension"));
      const Extent e{parse_size(off, "offset"), parse_size(len, "length")};
      if (e.length != shape_numel(t.shape) * dtype_size(t.dtype)) {
        corrupt("length of " + name + " does not match its shape");
      }
      ck.tensors.push_back(std::move(t));
      extents.push_back(e);
    } else if (tag == "blob") {
      blob_size = parse_size(rest, "blob size");
      break;
    } else {
      corrupt("unexpected line " + std::to_string(line_no));
    }
  }
  if (!have_regime) corrupt("missing regime line");
  for (std::size_t i = 0; i < extents.size(); ++i) {
    if (extents[i].offset > blob_size || extents[i].length > blob_size - extents[i].offset) {
      corrupt("tensor " + ck.tensors[i].name + " lies outside the blob");
    }
  }
  const std::size_t available = file.size() - pos;
  if (available < blob_size) {
    throw CheckpointError(CheckpointError::Kind::kTruncatedBlob,
                          "expected " + std::to_string(blob_size) + " bytes, found " +
                              std::to_string(available));
  }
  if (available > blob_size) corrupt("trailing bytes after the blob");
  for (std::size_t i = 0; i < extents.size(); ++i) {
    const auto* src = file.data() + pos + extents[i].offset;
    ck.tensors[i].bytes.assign(src, src + extents[i].length);
  }
  try {
    ck.config = parse_config_string(config_text);
  } catch (const ConfigError& e) {
    corrupt(std::string("embedded config: ") + e.what());
  }
  return ck;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  const std::vector<unsigned char> bytes = encode_checkpoint(ckpt);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write checkpoint " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("failed writing checkpoint " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError(CheckpointError::Kind::kNotFound, path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

template void add_model(Checkpoint&, const std::string&, const TrackerModel<float>&);
template void add_model(Checkpoint&, const std::string&, const TrackerModel<double>&);
template TrackerModel<float> extract_model(const Checkpoint&, const std::string&,
                                           const TrackerConfig&);
template TrackerModel<double> extract_model(const Checkpoint&, const std::string&,
                                            const TrackerConfig&);

}  // namespace ctrack
