#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "flowvae/model.hpp"

namespace flowvae {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads are written in native little-endian");

/// Adam first and second moments, one pair per trainable parameter in
/// registry order.
template <class T>
struct AdamState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::int64_t skipped = 0;  // updates dropped for non-finite gradients

  void reset(const std::vector<Param<T>*>& params) {
    m.clear();
    v.clear();
    for (auto* p : params) {
      m.emplace_back(p->value.shape());
      v.emplace_back(p->value.shape());
    }
    skipped = 0;
  }
};

/// Everything besides parameters that a resumed run needs.
struct TrainProgress {
  std::int64_t update = 0;
  std::string rng_state;
  std::int64_t nonfinite_streak = 0;
};

inline constexpr char kCheckpointMagic[8] = {'F', 'V', 'A', 'E', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  template <class V>
  void pod(V v) {
    bytes(&v, sizeof v);
  }
  void str(const std::string& s) {
    pod<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  const std::string& data() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string data) : buf_(std::move(data)) {}
  void bytes(void* p, std::size_t n) {
    if (pos_ + n > buf_.size()) throw IoError("checkpoint truncated");
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  template <class V>
  V pod() {
    V v;
    bytes(&v, sizeof v);
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint32_t>();
    if (pos_ + n > buf_.size()) throw IoError("checkpoint truncated");
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return buf_.size() - pos_; }

 private:
  std::string buf_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct ManifestEntry {
  std::string name;
  Shape shape;
  std::uint64_t offset;  // bytes into the payload
};

struct CheckpointHeader {
  std::string config_text;
  std::string digest;
  bool initialized = false;
  TrainProgress progress;
  std::int64_t adam_skipped = 0;
  std::vector<ManifestEntry> manifest;
};

inline CheckpointHeader read_header(Reader& r) {
  char magic[8];
  r.bytes(magic, 8);
  if (std::memcmp(magic, kCheckpointMagic, 8) != 0) throw IoError("not a checkpoint file");
  if (r.pod<std::uint32_t>() != kCheckpointVersion) throw IoError("unsupported checkpoint version");
  CheckpointHeader h;
  h.config_text = r.str();
  h.digest = r.str();
  h.initialized = r.pod<std::uint8_t>() != 0;
  h.progress.update = r.pod<std::int64_t>();
  h.progress.nonfinite_streak = r.pod<std::int64_t>();
  h.progress.rng_state = r.str();
  h.adam_skipped = r.pod<std::int64_t>();
  const auto count = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    ManifestEntry e;
    e.name = r.str();
    const auto rank = r.pod<std::uint32_t>();
    for (std::uint32_t k = 0; k < rank; ++k) e.shape.push_back(r.pod<std::int32_t>());
    e.offset = r.pod<std::uint64_t>();
    h.manifest.push_back(std::move(e));
  }
  return h;
}

}  // namespace detail

/// Model config stored in a checkpoint, for commands that only have --ckpt.
inline ModelConfig checkpoint_config(const std::string& path) {
  detail::Reader r(detail::read_file(path));
  auto h = detail::read_header(r);
  ModelConfig cfg = parse_config(h.config_text).model;
  if (cfg.digest() != h.digest) throw IoError(path + ": stored config does not match its digest");
  return cfg;
}

/// Binary checkpoint: magic, version, model config text and digest, actnorm
/// state, progress counters, manifest of {name, shape, byte offset}, then the
/// raw little-endian payload. Adam moments are stored as "<name>#m" and
/// "<name>#v". Output bytes depend only on the saved state.
template <class T>
void save_checkpoint(const std::string& path, Model<T>& model, const std::type_identity_t<AdamState<T>>* adam,
                     const TrainProgress& progress) {
  std::vector<std::pair<std::string, const Tensor<T>*>> tensors;
  for (auto* p : model.params().all()) tensors.emplace_back(p->name, &p->value);
  if (adam) {
    auto tr = model.params().trainable();
    if (adam->m.size() != tr.size() || adam->v.size() != tr.size()) throw ConfigError("adam state does not match model");
    for (std::size_t i = 0; i < tr.size(); ++i) {
      tensors.emplace_back(tr[i]->name + "#m", &adam->m[i]);
      tensors.emplace_back(tr[i]->name + "#v", &adam->v[i]);
    }
  }
  detail::Writer w;
  w.bytes(kCheckpointMagic, 8);
  w.pod<std::uint32_t>(kCheckpointVersion);
  w.str(model.config().to_text());
  w.str(model.config().digest());
  w.pod<std::uint8_t>(model.initialized() ? 1 : 0);
  w.pod<std::int64_t>(progress.update);
  w.pod<std::int64_t>(progress.nonfinite_streak);
  w.str(progress.rng_state);
  w.pod<std::int64_t>(adam ? adam->skipped : 0);
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
  std::uint64_t offset = 0;
  for (auto& [name, t] : tensors) {
    w.str(name);
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(t->rank()));
    for (int d : t->shape()) w.pod<std::int32_t>(d);
    w.pod<std::uint64_t>(offset);
    offset += t->size() * sizeof(T);
  }
  w.pod<std::uint64_t>(offset);
  for (auto& [name, t] : tensors) w.bytes(t->data(), t->size() * sizeof(T));

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out.write(w.data().data(), static_cast<std::streamsize>(w.data().size()));
  if (!out) throw IoError("write failed: " + path);
}

/// Restores parameters (and optionally Adam moments) into a model built from
/// the same config. A digest mismatch is a ConfigError.
template <class T>
TrainProgress load_checkpoint(const std::string& path, Model<T>& model, std::type_identity_t<AdamState<T>>* adam = nullptr) {
  detail::Reader r(detail::read_file(path));
  auto h = detail::read_header(r);
  if (h.digest != model.config().digest())
    throw ConfigError(path + ": config digest " + h.digest + " does not match model " + model.config().digest());
  const auto payload_size = r.pod<std::uint64_t>();
  if (r.remaining() != payload_size) throw IoError(path + ": payload size mismatch");
  std::string payload(payload_size, '\0');
  r.bytes(payload.data(), payload_size);

  auto fetch = [&](const std::string& name, Tensor<T>& dst) {
    for (const auto& e : h.manifest)
      if (e.name == name) {
        if (e.shape != dst.shape()) throw IoError(path + ": shape mismatch for " + name);
        if (e.offset + dst.size() * sizeof(T) > payload.size()) throw IoError(path + ": payload out of range");
        std::memcpy(dst.data(), payload.data() + e.offset, dst.size() * sizeof(T));
        return;
      }
    throw IoError(path + ": missing tensor " + name);
  };
  for (auto* p : model.params().all()) fetch(p->name, p->value);
  model.set_initialized(h.initialized);
  if (adam) {
    auto tr = model.params().trainable();
    adam->reset(tr);
    const bool has_moments = h.manifest.size() > model.params().all().size();
    if (has_moments)
      for (std::size_t i = 0; i < tr.size(); ++i) {
        fetch(tr[i]->name + "#m", adam->m[i]);
        fetch(tr[i]->name + "#v", adam->v[i]);
      }
    adam->skipped = h.adam_skipped;
  }
  return h.progress;
}

}  // namespace flowvae
