#include "bfr/errors.hpp"
#include "bfr/trainkit.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>

namespace bfr {

namespace fs = std::filesystem;

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

const char kMagic[4] = {'B', 'F', 'R', 'F'};

struct Writer {
  std::vector<std::uint8_t> out;

  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  }
  void u32(std::uint32_t v) { raw(&v, 4); }
  void u64(std::uint64_t v) { raw(&v, 8); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  void tensor(const std::string& name, const Shape& shape, const float* data, Index n) {
    str(name);
    u32(static_cast<std::uint32_t>(shape.size()));
    for (Index d : shape) u32(static_cast<std::uint32_t>(d));
    raw(data, static_cast<std::size_t>(n) * sizeof(float));
  }
};

struct Reader {
  const std::vector<std::uint8_t>& in;
  std::size_t pos = 0;

  void need(std::size_t n, const char* what) {
    if (in.size() - pos < n) {
      throw TruncatedError(std::string("checkpoint truncated while reading ") + what + " at byte " + std::to_string(pos));
    }
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v;
    std::memcpy(&v, &in[pos], 4);
    pos += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v;
    std::memcpy(&v, &in[pos], 8);
    pos += 8;
    return v;
  }
  std::string str(const char* what) {
    const std::uint32_t n = u32(what);
    need(n, what);
    std::string s(reinterpret_cast<const char*>(&in[pos]), n);
    pos += n;
    return s;
  }
};

struct StoredTensor {
  Shape shape;
  std::vector<float> data;
};

struct Decoded {
  std::map<std::string, StoredTensor> tensors;
  std::vector<std::string> order;
  std::string config;
  std::int64_t step = 0;
  std::int64_t g_steps = 0, d_steps = 0;
  std::string rng;
};

// Every float array a checkpoint holds, in file order.
struct Slot {
  std::string name;
  Shape shape;
  float* data;
  Index size;
};

std::vector<Slot> slots(TrainState& s) {
  std::vector<Slot> out;
  auto add_params = [&out](auto params, Adam<float>& opt) {
    for (auto& [name, p] : params) {
      out.push_back({name, p->value.shape(), p->value.mutable_values().data(), p->value.numel()});
      if (p->spectral) {
        auto& sn = *p->spectral;
        out.push_back({name + "#u", {sn.u.size()}, sn.u.data(), sn.u.size()});
        out.push_back({name + "#v", {sn.v.size()}, sn.v.data(), sn.v.size()});
        out.push_back({name + "#sigma", {1}, &sn.sigma, 1});
      }
    }
    for (std::size_t i = 0; i < opt.params().size(); ++i) {
      const auto& [name, p] = opt.params()[i];
      auto& m = opt.moments()[i];
      out.push_back({"adam.m." + name, p->value.shape(), m.m.data(), m.m.size()});
      out.push_back({"adam.v." + name, p->value.shape(), m.v.data(), m.v.size()});
    }
  };
  add_params(s.generator_parameters(), s.g_opt);
  add_params(s.critic_parameters(), s.d_opt);
  return out;
}

Decoded decode(const std::vector<std::uint8_t>& bytes, bool config_only) {
  Reader r{bytes};
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw BadMagicError("not a BFRF checkpoint (bad magic)");
  r.pos = 4;
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                       std::to_string(kCheckpointVersion) + ")");
  }
  Decoded d;
  const std::uint32_t count = r.u32("tensor count");
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::string name = r.str("tensor name");
    StoredTensor st;
    const std::uint32_t ndim = r.u32("tensor rank");
    std::size_t n = 1;
    for (std::uint32_t k = 0; k < ndim; ++k) {
      st.shape.push_back(r.u32("tensor dims"));
      n *= static_cast<std::size_t>(st.shape.back());
    }
    if (n > bytes.size()) throw TruncatedError("checkpoint tensor '" + name + "' is larger than the file");
    r.need(n * sizeof(float), "tensor payload");
    if (!config_only) {
      st.data.resize(n);
      std::memcpy(st.data.data(), &bytes[r.pos], n * sizeof(float));
    }
    r.pos += n * sizeof(float);
    d.order.push_back(name);
    d.tensors[name] = std::move(st);
  }
  d.config = r.str("config");
  if (config_only) return d;
  d.step = static_cast<std::int64_t>(r.u64("step"));
  d.g_steps = static_cast<std::int64_t>(r.u64("optimizer steps"));
  d.d_steps = static_cast<std::int64_t>(r.u64("optimizer steps"));
  d.rng = r.str("rng state");
  const std::size_t body = r.pos;
  const std::uint32_t stored = r.u32("checksum");
  const auto crc = static_cast<std::uint32_t>(crc32(crc32(0L, Z_NULL, 0), bytes.data(), static_cast<uInt>(body)));
  if (crc != stored) throw ChecksumError("checkpoint checksum mismatch (file corrupted)");
  if (r.pos != bytes.size()) throw CheckpointError("trailing bytes after checkpoint checksum");
  return d;
}

std::vector<std::uint8_t> read_all(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(TrainState& s) {
  Writer w;
  w.raw(kMagic, 4);
  w.u32(kCheckpointVersion);
  const auto all = slots(s);
  w.u32(static_cast<std::uint32_t>(all.size()));
  for (const auto& slot : all) w.tensor(slot.name, slot.shape, slot.data, slot.size);
  w.str(format_config(s.config));
  w.u64(static_cast<std::uint64_t>(s.step));
  w.u64(static_cast<std::uint64_t>(s.g_opt.steps()));
  w.u64(static_cast<std::uint64_t>(s.d_opt.steps()));
  std::ostringstream rng;
  rng << s.rng;
  w.str(rng.str());
  const auto crc = static_cast<std::uint32_t>(crc32(crc32(0L, Z_NULL, 0), w.out.data(), static_cast<uInt>(w.out.size())));
  w.u32(crc);
  return std::move(w.out);
}

void decode_checkpoint(TrainState& s, const std::vector<std::uint8_t>& bytes) {
  const Decoded d = decode(bytes, false);
  auto all = slots(s);
  for (const auto& slot : all) {
    const auto it = d.tensors.find(slot.name);
    if (it == d.tensors.end()) throw ShapeConflictError(slot.name, "missing from checkpoint");
    if (it->second.shape != slot.shape) {
      throw ShapeConflictError(slot.name, "checkpoint has " + to_string(it->second.shape) + ", model expects " +
                                              to_string(slot.shape));
    }
  }
  if (d.tensors.size() != all.size()) {
    for (const auto& name : d.order) {
      const bool known = std::any_of(all.begin(), all.end(), [&](const Slot& s) { return s.name == name; });
      if (!known) throw ShapeConflictError(name, "not present in the model");
    }
  }
  std::istringstream rng_text(d.rng);
  Rng rng;
  rng_text >> rng;
  if (rng_text.fail()) throw CheckpointError("checkpoint rng state is unreadable");

  for (auto& slot : all) {
    const auto& src = d.tensors.at(slot.name).data;
    std::memcpy(slot.data, src.data(), src.size() * sizeof(float));
  }
  s.step = d.step;
  s.g_opt.set_steps(d.g_steps);
  s.d_opt.set_steps(d.d_steps);
  s.rng = rng;
}

RunConfig checkpoint_config(const std::vector<std::uint8_t>& bytes) { return parse_config(decode(bytes, true).config); }

void save_checkpoint(TrainState& s, const fs::path& path) {
  const auto bytes = encode_checkpoint(s);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
}

std::unique_ptr<TrainState> load_checkpoint(const fs::path& path) {
  const auto bytes = read_all(path);
  auto state = std::make_unique<TrainState>(checkpoint_config(bytes));
  decode_checkpoint(*state, bytes);
  return state;
}

void load_checkpoint(TrainState& s, const fs::path& path) { decode_checkpoint(s, read_all(path)); }

}  // namespace bfr
