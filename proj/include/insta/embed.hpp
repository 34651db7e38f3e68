#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "insta/errors.hpp"
#include "insta/hashing.hpp"

namespace insta {

// Unit-norm embedding. Values are float so that cached vectors are bit-equal
// to freshly computed ones; arithmetic on them is done in double.
struct EmbeddingVector {
  std::vector<float> values;

  std::size_t dim() const { return values.size(); }
  friend bool operator==(const EmbeddingVector&, const EmbeddingVector&) = default;
};

inline double dot(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += double(a[i]) * double(b[i]);
  return s;
}

inline double l2_norm(std::span<const float> v) { return std::sqrt(dot(v, v)); }

inline double cosine(const EmbeddingVector& a, const EmbeddingVector& b) {
  if (a.dim() != b.dim()) throw DimensionMismatchError("cosine of vectors with different dims");
  const double aa = dot(a.values, a.values), bb = dot(b.values, b.values);
  if (aa < 1e-24 || bb < 1e-24) throw ZeroNormError("cosine with zero-norm vector");
  return dot(a.values, b.values) / std::sqrt(aa * bb);
}

inline EmbeddingVector normalize(std::span<const float> raw) {
  for (float x : raw) {
    if (!std::isfinite(x)) throw ProtocolError("embedding contains a non-finite value");
  }
  const double n = l2_norm(raw);
  if (n < 1e-12) throw ZeroNormError("embedding norm below 1e-12");
  EmbeddingVector v;
  v.values.reserve(raw.size());
  for (float x : raw) v.values.push_back(static_cast<float>(double(x) / n));
  return v;
}

// The embedding function. Implementations must be safe to call concurrently.
class EmbeddingBackend {
 public:
  virtual ~EmbeddingBackend() = default;

  virtual std::string id() const = 0;
  virtual std::string model_id() const = 0;
  virtual std::size_t dim() const = 0;
  virtual bool deterministic() const = 0;

  // One raw (unnormalized) row per text, same order.
  virtual std::vector<std::vector<float>> embed_raw(std::span<const std::string> texts) const = 0;
};

// Hashed character n-grams: lowercase, byte 3/4/5-grams, FNV-1a 64 into dim
// buckets, log(1 + bucket count). Texts shorter than three bytes have no
// n-grams and therefore a zero vector.
class ReferenceBackend final : public EmbeddingBackend {
 public:
  static constexpr std::size_t kMinN = 3;
  static constexpr std::size_t kMaxN = 5;

  explicit ReferenceBackend(std::size_t dim = 1024) : dim_(dim) {
    if (dim < 2) throw ConfigError("reference backend needs dim >= 2");
  }

  std::string id() const override { return "ref-char345-fnv1a64-d" + std::to_string(dim_); }
  std::string model_id() const override { return "reference"; }
  std::size_t dim() const override { return dim_; }
  bool deterministic() const override { return true; }

  std::size_t bucket(std::string_view ngram) const { return fnv1a64(ngram) % dim_; }

  std::vector<std::uint32_t> bucket_counts(std::string_view text) const {
    std::string lower(text);
    for (auto& c : lower) {
      if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    }
    std::vector<std::uint32_t> counts(dim_, 0);
    for (std::size_t n = kMinN; n <= kMaxN; ++n) {
      for (std::size_t i = 0; i + n <= lower.size(); ++i) {
        ++counts[bucket(std::string_view(lower).substr(i, n))];
      }
    }
    return counts;
  }

  std::vector<std::vector<float>> embed_raw(std::span<const std::string> texts) const override {
    std::vector<std::vector<float>> out;
    out.reserve(texts.size());
    for (const auto& t : texts) {
      auto counts = bucket_counts(t);
      std::vector<float> row(dim_);
      for (std::size_t b = 0; b < dim_; ++b) row[b] = static_cast<float>(std::log1p(double(counts[b])));
      out.push_back(std::move(row));
    }
    return out;
  }

 private:
  std::size_t dim_;
};

inline std::unique_ptr<EmbeddingBackend> reference_backend(std::size_t dim = 1024) {
  return std::make_unique<ReferenceBackend>(dim);
}

// ---------------------------------------------------------------------------
// On-disk cache: append-only records of
//   key (32 bytes) | dim (u32 LE) | dim x f32 LE
// keyed by SHA-256(backend id, model id, text).

class EmbeddingCache {
 public:
  static constexpr const char* kFileName = "embeddings.cache";

  explicit EmbeddingCache(std::filesystem::path dir) : path_(std::move(dir) / kFileName) {
    std::filesystem::create_directories(path_.parent_path());
    load();
  }

  static Digest key(std::string_view backend_id, std::string_view model_id, std::string_view text) {
    Sha256 h;
    h.update(backend_id).update(std::string_view("\0", 1)).update(model_id).update(std::string_view("\0", 1));
    h.update(text);
    return h.finish();
  }

  std::optional<EmbeddingVector> lookup(const Digest& k) const {
    std::shared_lock lock(mu_);
    auto it = entries_.find(to_hex(k));
    if (it == entries_.end()) return std::nullopt;
    return it->second;
  }

  void store(const Digest& k, const EmbeddingVector& v) {
    std::unique_lock lock(mu_);
    auto hex = to_hex(k);
    if (entries_.count(hex)) return;
    std::ofstream out(path_, std::ios::binary | std::ios::app);
    if (!out) throw IoError("cannot append to cache " + path_.string());
    out.write(reinterpret_cast<const char*>(k.data()), k.size());
    write_u32(out, static_cast<std::uint32_t>(v.dim()));
    for (float x : v.values) {
      std::uint32_t bits;
      std::memcpy(&bits, &x, 4);
      write_u32(out, bits);
    }
    entries_.emplace(std::move(hex), v);
  }

  std::size_t size() const {
    std::shared_lock lock(mu_);
    return entries_.size();
  }

  const std::filesystem::path& path() const { return path_; }

 private:
  static void write_u32(std::ostream& out, std::uint32_t v) {
    const char b[4] = {char(v & 0xff), char((v >> 8) & 0xff), char((v >> 16) & 0xff), char((v >> 24) & 0xff)};
    out.write(b, 4);
  }

  static bool read_u32(std::istream& in, std::uint32_t& v) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) return false;
    v = std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
    return true;
  }

  void load() {
    std::ifstream in(path_, std::ios::binary);
    if (!in) return;
    while (true) {
      Digest k;
      if (!in.read(reinterpret_cast<char*>(k.data()), k.size())) break;
      std::uint32_t dim;
      if (!read_u32(in, dim)) break;
      EmbeddingVector v;
      v.values.resize(dim);
      bool ok = true;
      for (auto& x : v.values) {
        std::uint32_t bits;
        if (!read_u32(in, bits)) {
          ok = false;
          break;
        }
        std::memcpy(&x, &bits, 4);
      }
      // A truncated trailing record (interrupted write) is ignored.
      if (!ok) break;
      entries_.emplace(to_hex(k), std::move(v));
    }
  }

  std::filesystem::path path_;
  mutable std::shared_mutex mu_;
  std::unordered_map<std::string, EmbeddingVector> entries_;
};

// Applies a backend with validation, normalization and optional caching.
// encode_count() counts texts actually sent to the backend.
class Embedder {
 public:
  explicit Embedder(const EmbeddingBackend& backend, EmbeddingCache* cache = nullptr)
      : backend_(backend), cache_(cache) {}

  const EmbeddingBackend& backend() const { return backend_; }
  std::size_t encode_count() const { return encoded_.load(); }

  std::vector<EmbeddingVector> embed(std::span<const std::string> texts) const {
    std::vector<EmbeddingVector> out(texts.size());
    std::vector<std::size_t> miss;
    std::vector<Digest> keys(texts.size());
    for (std::size_t i = 0; i < texts.size(); ++i) {
      if (texts[i].empty()) throw Error("cannot embed an empty text");
      if (cache_) {
        keys[i] = EmbeddingCache::key(backend_.id(), backend_.model_id(), texts[i]);
        if (auto hit = cache_->lookup(keys[i])) {
          out[i] = std::move(*hit);
          continue;
        }
      }
      miss.push_back(i);
    }
    if (miss.empty()) return out;

    std::vector<std::string> batch;
    batch.reserve(miss.size());
    for (auto i : miss) batch.push_back(texts[i]);
    auto rows = backend_.embed_raw(batch);
    encoded_ += batch.size();
    if (rows.size() != batch.size()) {
      throw ProtocolError("backend returned " + std::to_string(rows.size()) + " rows for " +
                          std::to_string(batch.size()) + " texts");
    }
    // Validate everything before touching the cache.
    std::vector<EmbeddingVector> fresh;
    fresh.reserve(rows.size());
    for (const auto& row : rows) {
      if (row.size() != backend_.dim()) {
        throw DimensionMismatchError("backend returned dim " + std::to_string(row.size()) + ", expected " +
                                     std::to_string(backend_.dim()));
      }
      fresh.push_back(normalize(row));
    }
    for (std::size_t m = 0; m < miss.size(); ++m) {
      if (cache_) cache_->store(keys[miss[m]], fresh[m]);
      out[miss[m]] = std::move(fresh[m]);
    }
    return out;
  }

 private:
  const EmbeddingBackend& backend_;
  EmbeddingCache* cache_;
  mutable std::atomic<std::size_t> encoded_{0};
};

inline std::vector<EmbeddingVector> embed_texts(const EmbeddingBackend& backend, std::span<const std::string> texts,
                                                EmbeddingCache* cache = nullptr) {
  return Embedder(backend, cache).embed(texts);
}

}  // namespace insta
