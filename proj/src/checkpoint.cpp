#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "look/error.hpp"
#include "look/model.hpp"

namespace look {

namespace {

constexpr char kMagic[8] = {'L', 'O', 'O', 'K', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

void put_u64(std::ostream& out, std::uint64_t v) {
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(bytes, 8);
}

void put_u32(std::ostream& out, std::uint32_t v) {
  char bytes[4];
  for (int i = 0; i < 4; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(bytes, 4);
}

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  void read(char* dst, std::size_t n) {
    in_.read(dst, static_cast<std::streamsize>(n));
    const auto got = static_cast<std::size_t>(in_.gcount());
    if (got != n) {
      throw ParseError("checkpoint truncated at byte offset " + std::to_string(offset_ + got) +
                       ": expected " + std::to_string(n) + " more bytes, found " +
                       std::to_string(got));
    }
    offset_ += n;
  }

  std::uint64_t u64() {
    unsigned char b[8];
    read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }

  std::uint32_t u32() {
    unsigned char b[4];
    read(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }

  double f64() { return std::bit_cast<double>(u64()); }
  std::size_t offset() const { return offset_; }

 private:
  std::istream& in_;
  std::size_t offset_ = 0;
};

void put_mlp_params(std::ostream& out, const Mlp& mlp) {
  for (const auto& l : mlp.layers) {
    for (double v : l.weight.values()) put_u64(out, std::bit_cast<std::uint64_t>(v));
    for (double v : l.bias.values()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
}

Mlp read_mlp_params(Reader& r, const MlpSpec& spec) {
  Mlp mlp;
  for (std::size_t i = 0; i + 1 < spec.widths.size(); ++i) {
    Linear l{Matrix(spec.widths[i], spec.widths[i + 1]), Matrix(1, spec.widths[i + 1])};
    for (double& v : l.weight.values()) v = r.f64();
    for (double& v : l.bias.values()) v = r.f64();
    mlp.layers.push_back(std::move(l));
  }
  return mlp;
}

}  // namespace

void save_checkpoint(const ModelState& state, std::ostream& out) {
  out.write(kMagic, 8);
  put_u32(out, kVersion);
  std::vector<const Mlp*> online{&state.encoder, &state.projector, &state.predictor};
  if (state.classifier) online.push_back(&*state.classifier);
  put_u32(out, static_cast<std::uint32_t>(online.size()));
  for (const Mlp* m : online) {
    const MlpSpec s = m->spec();
    put_u32(out, static_cast<std::uint32_t>(s.widths.size()));
    for (std::size_t w : s.widths) put_u64(out, w);
  }
  for (const Mlp* m : online) put_mlp_params(out, *m);
  put_mlp_params(out, state.momentum_encoder);
  put_mlp_params(out, state.momentum_projector);
  put_u64(out, state.step);
  if (!out) throw DataError("failed writing checkpoint");
}

ModelState load_checkpoint(std::istream& in) {
  Reader r(in);
  char magic[8];
  r.read(magic, 8);
  if (std::memcmp(magic, kMagic, 8) != 0) throw ParseError("checkpoint: bad magic at byte 0");
  const std::uint32_t version = r.u32();
  if (version != kVersion) {
    throw ParseError("checkpoint: unsupported version " + std::to_string(version));
  }
  const std::uint32_t count = r.u32();
  if (count != 3 && count != 4) {
    throw ParseError("checkpoint: expected 3 or 4 sub-networks, found " + std::to_string(count));
  }
  std::vector<MlpSpec> specs(count);
  for (auto& s : specs) {
    const std::uint32_t n = r.u32();
    if (n < 2 || n > 64) {
      throw ParseError("checkpoint: implausible layer count at byte " + std::to_string(r.offset()));
    }
    for (std::uint32_t i = 0; i < n; ++i) s.widths.push_back(r.u64());
    for (std::size_t w : s.widths) {
      if (w == 0 || w > (1u << 24)) {
        throw ParseError("checkpoint: implausible layer width " + std::to_string(w));
      }
    }
  }
  if (specs[0].out_dim() != specs[1].in_dim() || specs[2].in_dim() != specs[1].out_dim()) {
    throw ParseError("checkpoint: inconsistent shape table");
  }
  ModelState s;
  s.encoder = read_mlp_params(r, specs[0]);
  s.projector = read_mlp_params(r, specs[1]);
  s.predictor = read_mlp_params(r, specs[2]);
  if (count == 4) s.classifier = read_mlp_params(r, specs[3]);
  s.momentum_encoder = read_mlp_params(r, specs[0]);
  s.momentum_projector = read_mlp_params(r, specs[1]);
  s.step = r.u64();
  return s;
}

void save_checkpoint_file(const ModelState& state, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open checkpoint for writing: " + path);
  save_checkpoint(state, out);
}

ModelState load_checkpoint_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  return load_checkpoint(in);
}

}  // namespace look
