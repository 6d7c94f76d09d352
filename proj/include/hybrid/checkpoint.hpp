#pragma once

// Binary checkpoints. Layout, little-endian throughout:
//   "FHYB" | u16 version | u64 config digest
//   repeated: u16 name length | name | u8 rank | u32 dims[rank] | f32 data[prod(dims)]
// Training metadata travels as extra records whose names start with "meta:".

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "hybrid/errors.hpp"
#include "hybrid/model.hpp"

namespace hyb {

inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Blob {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> data;
};

struct Checkpoint {
  std::uint64_t digest = 0;
  std::string config_text;  // canonical_model_config
  std::vector<Blob> params;
  std::size_t epoch = 0;
  double val_accuracy = 0.0;
  std::uint64_t rng_digest = 0;
  std::vector<float> train_mean;  // per input channel

  ModelConfig config() const { return parse_canonical_model_config(config_text); }
};

struct BlobInfo {
  std::string name;
  std::vector<std::uint32_t> dims;
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf.push_back(v); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(const std::string& s) { buf.insert(buf.end(), s.begin(), s.end()); }
  std::vector<std::uint8_t> buf;
};

class ByteReader {
 public:
  ByteReader(const std::vector<std::uint8_t>& b, std::string path) : buf_(b), path_(std::move(path)) {}
  bool done() const noexcept { return pos_ == buf_.size(); }
  std::size_t offset() const noexcept { return pos_; }
  std::uint64_t uint(int n, const char* what) {
    need(static_cast<std::size_t>(n), what);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(buf_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  float f32(const char* what) { return std::bit_cast<float>(static_cast<std::uint32_t>(uint(4, what))); }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(buf_.begin() + static_cast<std::ptrdiff_t>(pos_), buf_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  void skip(std::size_t n, const char* what) {
    need(n, what);
    pos_ += n;
  }
  [[noreturn]] void fail(const std::string& msg) const {
    throw FormatError(path_ + ": " + msg + " at byte offset " + std::to_string(pos_));
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (buf_.size() - pos_ < n) fail(std::string("truncated checkpoint while reading ") + what);
  }
  const std::vector<std::uint8_t>& buf_;
  std::string path_;
  std::size_t pos_ = 0;
};

inline void write_blob(ByteWriter& w, const Blob& b) {
  if (b.name.size() > 0xffff) throw FormatError("checkpoint: record name too long");
  w.u16(static_cast<std::uint16_t>(b.name.size()));
  w.bytes(b.name);
  w.u8(static_cast<std::uint8_t>(b.dims.size()));
  for (auto d : b.dims) w.u32(d);
  for (float v : b.data) w.f32(v);
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Visits header then every record; `data` is false for inspection-only reads.
template <class F>
std::uint64_t parse_records(const std::vector<std::uint8_t>& bytes, const std::string& path, bool data, F&& on_blob) {
  ByteReader r(bytes, path);
  if (r.str(4, "magic") != "FHYB") r.fail("bad magic (not a checkpoint)");
  const auto version = r.uint(2, "version");
  if (version != kCheckpointVersion) r.fail("unsupported checkpoint version " + std::to_string(version));
  const std::uint64_t digest = r.uint(8, "config digest");
  while (!r.done()) {
    Blob b;
    const auto len = static_cast<std::size_t>(r.uint(2, "record name length"));
    b.name = r.str(len, "record name");
    const auto rank = static_cast<std::size_t>(r.uint(1, "rank"));
    std::uint64_t count = 1;
    for (std::size_t i = 0; i < rank; ++i) {
      b.dims.push_back(static_cast<std::uint32_t>(r.uint(4, "dimension")));
      count *= b.dims.back();
    }
    if (count > (bytes.size() - r.offset()) / 4) r.fail("truncated checkpoint in data of '" + b.name + "'");
    if (data) {
      b.data.resize(count);
      for (auto& v : b.data) v = r.f32("tensor data");
    } else {
      r.skip(count * 4, "tensor data");
    }
    on_blob(std::move(b));
  }
  return digest;
}

inline Blob meta_blob(const std::string& name, std::vector<float> v) {
  return {"meta:" + name, {static_cast<std::uint32_t>(v.size())}, std::move(v)};
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  detail::ByteWriter w;
  w.bytes("FHYB");
  w.u16(kCheckpointVersion);
  w.u64(ck.digest);
  std::vector<float> cfg(ck.config_text.begin(), ck.config_text.end());
  detail::write_blob(w, detail::meta_blob("config", std::move(cfg)));
  detail::write_blob(w, detail::meta_blob("epoch", {static_cast<float>(ck.epoch)}));
  detail::write_blob(w, detail::meta_blob("val_accuracy", {static_cast<float>(ck.val_accuracy)}));
  std::vector<float> rd;
  for (int i = 0; i < 4; ++i) rd.push_back(static_cast<float>((ck.rng_digest >> (16 * i)) & 0xffff));
  detail::write_blob(w, detail::meta_blob("rng_digest", std::move(rd)));
  detail::write_blob(w, detail::meta_blob("train_mean", ck.train_mean));
  for (const Blob& b : ck.params) detail::write_blob(w, b);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(w.buf.data()), static_cast<std::streamsize>(w.buf.size()));
  if (!out) throw FormatError("failed writing checkpoint " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  Checkpoint ck;
  bool have_config = false;
  ck.digest = detail::parse_records(bytes, path.string(), true, [&](Blob b) {
    if (b.name.rfind("meta:", 0) != 0) {
      ck.params.push_back(std::move(b));
      return;
    }
    const std::string key = b.name.substr(5);
    if (key == "config") {
      for (float v : b.data) ck.config_text.push_back(static_cast<char>(static_cast<int>(v)));
      have_config = true;
    } else if (key == "epoch" && b.data.size() == 1) {
      ck.epoch = static_cast<std::size_t>(b.data[0]);
    } else if (key == "val_accuracy" && b.data.size() == 1) {
      ck.val_accuracy = b.data[0];
    } else if (key == "rng_digest" && b.data.size() == 4) {
      for (int i = 0; i < 4; ++i) ck.rng_digest |= static_cast<std::uint64_t>(b.data[static_cast<std::size_t>(i)]) << (16 * i);
    } else if (key == "train_mean") {
      ck.train_mean = b.data;
    }
  });
  if (!have_config) throw FormatError(path.string() + ": checkpoint has no model config record");
  if (fnv1a64(ck.config_text) != ck.digest) throw FormatError(path.string() + ": config digest does not match config record");
  return ck;
}

// Names and shapes only; skips parameter data.
inline std::vector<BlobInfo> inspect_checkpoint(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  std::vector<BlobInfo> out;
  detail::parse_records(bytes, path.string(), false, [&](Blob b) {
    if (b.name.rfind("meta:", 0) != 0) out.push_back({b.name, b.dims});
  });
  return out;
}

template <class T>
Checkpoint capture(const HybridModel<T>& model) {
  Checkpoint ck;
  ck.config_text = canonical_model_config(model.config());
  ck.digest = fnv1a64(ck.config_text);
  for (const auto& p : model.params().all()) {
    const Shape s = p.value.shape();
    Blob b{p.name, {static_cast<std::uint32_t>(s.n), static_cast<std::uint32_t>(s.c), static_cast<std::uint32_t>(s.h),
                    static_cast<std::uint32_t>(s.w)}, {}};
    b.data.assign(p.value.data().begin(), p.value.data().end());
    ck.params.push_back(std::move(b));
  }
  return ck;
}

// Copies parameters into a model built from the same configuration.
template <class T>
void restore(HybridModel<T>& model, const Checkpoint& ck) {
  if (ck.digest != model_config_digest(model.config())) {
    throw ConfigError("checkpoint was written for a different model configuration");
  }
  auto& all = model.params().all();
  if (all.size() != ck.params.size()) throw FormatError("checkpoint parameter count does not match the model");
  for (std::size_t i = 0; i < all.size(); ++i) {
    const Blob& b = ck.params[i];
    auto& p = all[i];
    const Shape s = p.value.shape();
    const bool same = b.name == p.name && b.dims.size() == 4 && b.dims[0] == s.n && b.dims[1] == s.c &&
                      b.dims[2] == s.h && b.dims[3] == s.w;
    if (!same) throw FormatError("checkpoint record '" + b.name + "' does not match parameter '" + p.name + "'");
    auto d = p.value.data();
    for (std::size_t k = 0; k < d.size(); ++k) d[k] = static_cast<T>(b.data[k]);
  }
  model.checkpoint_id = std::to_string(ck.digest) + "@" + std::to_string(ck.epoch);
}

}  // namespace hyb
