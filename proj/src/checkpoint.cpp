#include "p2i/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "p2i/file_util.hpp"
#include "p2i/spec_io.hpp"

namespace p2i {
namespace {

constexpr char kMagic[4] = {'P', '2', 'I', '1'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}

  bool done() const { return pos_ == bytes_.size(); }

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) fail(ErrorCode::kFormat, "checkpoint: truncated file");
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Digest& spec_hash, const ParameterSet<float>& params) {
  std::vector<std::uint8_t> out;
  for (char ch : kMagic) out.push_back(static_cast<std::uint8_t>(ch));
  out.insert(out.end(), spec_hash.begin(), spec_hash.end());
  for (const auto& [id, lp] : params.layers) {
    lp.validate();
    put_u32(out, static_cast<std::uint32_t>(id.size()));
    out.insert(out.end(), id.begin(), id.end());
    put_u32(out, static_cast<std::uint32_t>(lp.out_channels));
    put_u32(out, static_cast<std::uint32_t>(lp.in_channels));
    put_u32(out, static_cast<std::uint32_t>(lp.kernel_h));
    put_u32(out, static_cast<std::uint32_t>(lp.kernel_w));
    for (float v : lp.kernels) put_u32(out, std::bit_cast<std::uint32_t>(v));
    for (float v : lp.biases) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  auto magic = r.take(4);
  if (std::memcmp(magic.data(), kMagic, 4) != 0) fail(ErrorCode::kFormat, "checkpoint: bad magic bytes");
  Checkpoint ck;
  auto h = r.take(32);
  std::copy(h.begin(), h.end(), ck.spec_hash.begin());
  while (!r.done()) {
    const std::uint32_t len = r.u32();
    auto idb = r.take(len);
    std::string id(idb.begin(), idb.end());
    const int out = static_cast<int>(r.u32()), in = static_cast<int>(r.u32());
    const int kh = static_cast<int>(r.u32()), kw = static_cast<int>(r.u32());
    if (out <= 0 || in <= 0 || kh <= 0 || kw <= 0 || out > (1 << 16) || in > (1 << 16) || kh > 255 || kw > 255) {
      fail(ErrorCode::kFormat, "checkpoint: implausible extents for layer '" + id + "'");
    }
    LayerParams<float> lp(out, in, kh, kw);
    for (float& v : lp.kernels) v = r.f32();
    for (float& v : lp.biases) v = r.f32();
    if (!ck.params.layers.emplace(std::move(id), std::move(lp)).second) {
      fail(ErrorCode::kFormat, "checkpoint: duplicate layer record");
    }
  }
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const NetworkSpec& spec, const ParameterSet<float>& params) {
  check_params(spec, params);
  write_bytes_atomic(path, encode_checkpoint(spec_hash(spec), params));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  try {
    return decode_checkpoint(read_bytes(path));
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kFormat) throw;
    fail(ErrorCode::kFormat, "'" + path.string() + "': " + e.what());
  }
}

ParameterSet<float> load_checkpoint_for(const std::filesystem::path& path, const NetworkSpec& spec) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.spec_hash != spec_hash(spec)) {
    fail(ErrorCode::kState, "checkpoint '" + path.string() + "' was written for a different network spec (hash " +
                                to_hex(ck.spec_hash) + ", expected " + to_hex(spec_hash(spec)) + ")");
  }
  check_params(spec, ck.params);
  return std::move(ck.params);
}

Digest checkpoint_hash(const NetworkSpec& spec, const ParameterSet<float>& params) {
  return sha256(encode_checkpoint(spec_hash(spec), params));
}

}  // namespace p2i
