#include <gtest/gtest.h>

#include <thread>

#include "insta/embed.hpp"
#include "support/fixtures.hpp"

using namespace insta;

namespace {

// Independent FNV-1a 64 for the bucket oracle.
std::uint64_t fnv_oracle(const std::string& s) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// Hashed n-gram vector recomputed from scratch.
std::vector<double> oracle_vector(std::string text, std::size_t dim) {
  for (auto& c : text) c = char(std::tolower(static_cast<unsigned char>(c)));
  std::vector<double> counts(dim, 0.0);
  for (std::size_t n = 3; n <= 5; ++n) {
    for (std::size_t i = 0; i + n <= text.size(); ++i) counts[fnv_oracle(text.substr(i, n)) % dim] += 1;
  }
  double norm = 0;
  for (auto& c : counts) {
    c = std::log(1 + c);
    norm += c * c;
  }
  for (auto& c : counts) c /= std::sqrt(norm);
  return counts;
}

EmbeddingVector embed_one(const EmbeddingBackend& b, const std::string& text) {
  std::vector<std::string> t{text};
  return embed_texts(b, t)[0];
}

class ScaledBackend final : public EmbeddingBackend {
 public:
  ScaledBackend(const EmbeddingBackend& inner, float scale) : inner_(inner), scale_(scale) {}
  std::string id() const override { return inner_.id() + "-scaled"; }
  std::string model_id() const override { return inner_.model_id(); }
  std::size_t dim() const override { return inner_.dim(); }
  bool deterministic() const override { return true; }
  std::vector<std::vector<float>> embed_raw(std::span<const std::string> texts) const override {
    auto rows = inner_.embed_raw(texts);
    for (auto& r : rows)
      for (auto& x : r) x *= scale_;
    return rows;
  }

 private:
  const EmbeddingBackend& inner_;
  float scale_;
};

class FixedBackend final : public EmbeddingBackend {
 public:
  explicit FixedBackend(std::vector<float> row, std::size_t dim) : row_(std::move(row)), dim_(dim) {}
  std::string id() const override { return "fixed"; }
  std::string model_id() const override { return "fixed"; }
  std::size_t dim() const override { return dim_; }
  bool deterministic() const override { return true; }
  std::vector<std::vector<float>> embed_raw(std::span<const std::string> texts) const override {
    return std::vector<std::vector<float>>(texts.size(), row_);
  }

 private:
  std::vector<float> row_;
  std::size_t dim_;
};

}  // namespace

TEST(Embed, AaaPopulatesExactlyItsTrigramBucket) {
  ReferenceBackend b(1024);
  auto v = embed_one(b, "aaa");
  const auto bucket = fnv_oracle("aaa") % 1024;
  for (std::size_t i = 0; i < 1024; ++i) {
    if (i == bucket) {
      EXPECT_FLOAT_EQ(v.values[i], 1.0f);
    } else {
      EXPECT_EQ(v.values[i], 0.0f);
    }
  }
  EXPECT_NEAR(l2_norm(v.values), 1.0, 1e-6);
}

TEST(Embed, MatchesIndependentOracle) {
  ReferenceBackend b(256);
  for (const std::string text : {"Does the word have the same meaning?", "ABCdef ghij", "x y z w", "Hello"}) {
    auto v = embed_one(b, text);
    auto o = oracle_vector(text, 256);
    for (std::size_t i = 0; i < 256; ++i) EXPECT_NEAR(v.values[i], o[i], 1e-6) << text << " @" << i;
  }
}

TEST(Embed, IdenticalTextsIdenticalVectors) {
  ReferenceBackend b;
  std::vector<std::string> texts{"abc", "abc"};
  auto v = embed_texts(b, texts);
  EXPECT_EQ(v[0], v[1]);
  EXPECT_DOUBLE_EQ(cosine(v[0], v[1]), 1.0);
}

TEST(Embed, DisjointBucketsGiveZeroCosine) {
  ReferenceBackend b(1024);
  // "abc" and "xyz" each have a single 3-gram and no longer n-grams.
  ASSERT_NE(fnv_oracle("abc") % 1024, fnv_oracle("xyz") % 1024);
  EXPECT_EQ(cosine(embed_one(b, "abc"), embed_one(b, "xyz")), 0.0);
}

TEST(Embed, ParaphraseCloserThanUnrelated) {
  ReferenceBackend b;
  auto q = embed_one(b, "does the word have the same meaning");
  auto near = embed_one(b, "do the words share a meaning");
  auto far = embed_one(b, "write a summary of the article");
  EXPECT_GT(cosine(q, near), cosine(q, far));
}

TEST(Embed, ShortTextIsZeroNorm) {
  ReferenceBackend b;
  EXPECT_THROW(embed_one(b, "ab"), ZeroNormError);
  EXPECT_THROW(embed_one(b, ""), Error);
}

TEST(Embed, DimValidation) {
  EXPECT_THROW(ReferenceBackend(1), ConfigError);
  FixedBackend wrong({1.0f, 0.0f}, 3);
  EXPECT_THROW(embed_one(wrong, "abc"), DimensionMismatchError);
  FixedBackend nan({std::nanf(""), 1.0f}, 2);
  EXPECT_THROW(embed_one(nan, "abc"), ProtocolError);
}

TEST(Embed, NormalizationAndBoundsProperty) {
  ReferenceBackend b(64);  // small dim forces collisions
  Rng rng(5);
  std::vector<std::string> texts;
  for (int i = 0; i < 300; ++i) texts.push_back(fixtures::word(rng) + " " + fixtures::word(rng));
  auto vs = embed_texts(b, texts);
  for (const auto& v : vs) EXPECT_LT(std::abs(l2_norm(v.values) - 1.0), 1e-6);
  for (std::size_t i = 0; i + 1 < vs.size(); i += 3) {
    const double c = cosine(vs[i], vs[i + 1]);
    EXPECT_GE(c, -1 - 1e-9);
    EXPECT_LE(c, 1 + 1e-9);
  }
}

TEST(Embed, PermutationEquivariance) {
  ReferenceBackend b;
  Rng rng(9);
  std::vector<std::string> texts;
  for (int i = 0; i < 50; ++i) texts.push_back(fixtures::word(rng) + " task " + std::to_string(i));
  auto base = embed_texts(b, texts);
  std::vector<std::size_t> perm(texts.size());
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  std::vector<std::string> shuffled;
  for (auto p : perm) shuffled.push_back(texts[p]);
  auto out = embed_texts(b, shuffled);
  for (std::size_t i = 0; i < perm.size(); ++i) EXPECT_EQ(out[i], base[perm[i]]);
}

TEST(Embed, CacheIsTransparentAndPersistent) {
  fixtures::TempDir dir;
  ReferenceBackend b(128);
  std::vector<std::string> texts{"first text", "second text", "first text", "third one"};
  const auto cold = embed_texts(b, texts);
  {
    EmbeddingCache cache(dir.path());
    Embedder e(b, &cache);
    EXPECT_EQ(e.embed(texts), cold);
    EXPECT_EQ(cache.size(), 3u);
    EXPECT_EQ(e.encode_count(), 4u);
    EXPECT_EQ(e.embed(texts), cold);
    EXPECT_EQ(e.encode_count(), 4u);
  }
  EmbeddingCache reopened(dir.path());
  EXPECT_EQ(reopened.size(), 3u);
  Embedder warm(b, &reopened);
  EXPECT_EQ(warm.embed(texts), cold);
  EXPECT_EQ(warm.encode_count(), 0u);

  // A different backend id must miss.
  ReferenceBackend other(64);
  Embedder e2(other, &reopened);
  e2.embed(std::vector<std::string>{"first text"});
  EXPECT_EQ(e2.encode_count(), 1u);
}

TEST(Embed, CacheIgnoresTruncatedTail) {
  fixtures::TempDir dir;
  ReferenceBackend b(32);
  {
    EmbeddingCache cache(dir.path());
    Embedder(b, &cache).embed(std::vector<std::string>{"alpha beta", "gamma delta"});
  }
  const auto p = dir / EmbeddingCache::kFileName;
  std::filesystem::resize_file(p, std::filesystem::file_size(p) - 5);
  EmbeddingCache cache(dir.path());
  EXPECT_EQ(cache.size(), 1u);
}

TEST(Embed, CacheUntouchedOnBackendFailure) {
  fixtures::TempDir dir;
  EmbeddingCache cache(dir.path());
  FixedBackend wrong({1.0f}, 2);
  EXPECT_THROW(Embedder(wrong, &cache).embed(std::vector<std::string>{"abc"}), DimensionMismatchError);
  EXPECT_EQ(cache.size(), 0u);
}

TEST(Embed, ScaleInvariance) {
  ReferenceBackend b;
  ScaledBackend s(b, 7.5f);
  auto x = embed_one(b, "scale invariant text"), y = embed_one(s, "scale invariant text");
  for (std::size_t i = 0; i < x.dim(); ++i) EXPECT_NEAR(x.values[i], y.values[i], 1e-7);
}

TEST(Embed, ConcurrentEmbedding) {
  fixtures::TempDir dir;
  ReferenceBackend b(128);
  EmbeddingCache cache(dir.path());
  Embedder e(b, &cache);
  std::vector<std::thread> threads;
  std::vector<std::vector<EmbeddingVector>> results(6);
  for (int t = 0; t < 6; ++t) {
    threads.emplace_back([&, t] {
      std::vector<std::string> texts;
      for (int i = 0; i < 40; ++i) texts.push_back("shared text " + std::to_string(i));
      results[std::size_t(t)] = e.embed(texts);
    });
  }
  for (auto& th : threads) th.join();
  for (int t = 1; t < 6; ++t) EXPECT_EQ(results[std::size_t(t)], results[0]);
  EXPECT_EQ(cache.size(), 40u);
}
