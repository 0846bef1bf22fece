#include "idt/checkpoint.hpp"

#include "idt/io.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <limits>

namespace idt {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

namespace {

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes, std::size_t end) : bytes_(bytes), end_(end) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_bytes(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == end_; }

 private:
  void need(std::size_t n) {
    if (n > end_ - pos_) throw FormatError("checkpoint: unexpected end of tensor table");
  }
  const std::string& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

std::uint32_t crc(const std::string& bytes, std::size_t n) {
  uLong c = crc32(0L, Z_NULL, 0);
  std::size_t off = 0;
  while (off < n) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n - off, 1u << 30));
    c = crc32(c, reinterpret_cast<const Bytef*>(bytes.data() + off), chunk);
    off += chunk;
  }
  return static_cast<std::uint32_t>(c);
}

void put_tensor(std::string& out, const std::string& name, const nd::Tensor& t) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape().size()));
  for (std::size_t e : t.shape()) put<std::uint64_t>(out, e);
  for (double v : t.data()) put<double>(out, v);
}

std::uint32_t narrow(std::size_t v) {
  if (v > std::numeric_limits<std::uint32_t>::max()) throw std::invalid_argument("config field too large");
  return static_cast<std::uint32_t>(v);
}

}  // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
  const auto& c = ckpt.model.config;
  std::string out(kCheckpointMagic);
  put<std::uint32_t>(out, kCheckpointVersion);
  for (std::size_t f : {c.patch_size, c.embed_dim, c.block_pairs, c.heads, c.registers, c.lobes,
                        c.mlp_ratio, static_cast<std::size_t>(c.aux_depth)}) {
    put<std::uint32_t>(out, narrow(f));
  }
  const auto& p = ckpt.model.params;
  put<std::uint32_t>(out, narrow(p.size() + ckpt.optimizer.size()));
  for (std::size_t i = 0; i < p.size(); ++i) put_tensor(out, p.names()[i], p.values()[i]);
  const auto& o = ckpt.optimizer;
  for (std::size_t i = 0; i < o.size(); ++i) {
    put_tensor(out, kOptimPrefix + o.names()[i], o.values()[i]);
  }
  put<std::uint32_t>(out, crc(out, out.size()));
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  const std::size_t magic_len = std::strlen(kCheckpointMagic);
  if (bytes.size() < magic_len || bytes.compare(0, magic_len, kCheckpointMagic) != 0) {
    throw FormatError("checkpoint: bad magic (not an IDTCKPT1 file)");
  }
  if (bytes.size() < magic_len + 4 + 4) throw FormatError("checkpoint: truncated (CRC mismatch)");
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored = 0;
  std::memcpy(&stored, bytes.data() + body, 4);
  if (stored != crc(bytes, body)) throw FormatError("checkpoint: CRC mismatch (file corrupt or truncated)");

  Reader r(bytes, body);
  r.get_bytes(magic_len);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ckpt;
  auto& c = ckpt.model.config;
  c.patch_size = r.get<std::uint32_t>();
  c.embed_dim = r.get<std::uint32_t>();
  c.block_pairs = r.get<std::uint32_t>();
  c.heads = r.get<std::uint32_t>();
  c.registers = r.get<std::uint32_t>();
  c.lobes = r.get<std::uint32_t>();
  c.mlp_ratio = r.get<std::uint32_t>();
  const auto aux = r.get<std::uint32_t>();
  if (aux > 1) throw FormatError("checkpoint: bad aux_depth flag");
  c.aux_depth = aux == 1;
  try {
    c.validate();
  } catch (const std::exception& e) {
    throw FormatError(std::string("checkpoint: invalid model config: ") + e.what());
  }

  const auto count = r.get<std::uint32_t>();
  const std::string prefix(kOptimPrefix);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint32_t>();
    std::string name = r.get_bytes(name_len);
    const auto rank = r.get<std::uint32_t>();
    nd::Shape shape;
    std::size_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const auto e = r.get<std::uint64_t>();
      if (e == 0 || e > (std::size_t{1} << 40)) throw FormatError("checkpoint: bad extent in " + name);
      shape.push_back(static_cast<std::size_t>(e));
      n *= shape.back();
      if (n > (std::size_t{1} << 40)) throw FormatError("checkpoint: tensor too large: " + name);
    }
    std::vector<double> data(n);
    for (auto& v : data) v = r.get<double>();
    nd::Tensor t(std::move(shape), std::move(data));
    try {
      if (name.rfind(prefix, 0) == 0) {
        ckpt.optimizer.add(name.substr(prefix.size()), std::move(t));
      } else {
        ckpt.model.params.add(name, std::move(t));
      }
    } catch (const std::invalid_argument& e) {
      throw FormatError(std::string("checkpoint: ") + e.what());
    }
  }
  if (!r.done()) throw FormatError("checkpoint: trailing bytes after tensor table");

  // The parameter set must match what the stored config builds.
  const model::Model ref = model::Model::init(c, 0);
  if (ref.params.names() != ckpt.model.params.names()) {
    throw FormatError("checkpoint: parameter names do not match the stored model config");
  }
  for (std::size_t i = 0; i < ref.params.size(); ++i) {
    if (ref.params.values()[i].shape() != ckpt.model.params.values()[i].shape()) {
      throw FormatError("checkpoint: shape mismatch for " + ref.params.names()[i]);
    }
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file_atomic(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace idt
