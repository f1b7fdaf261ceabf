#include <gtest/gtest.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <random>

#include "qr/corpus_io.hpp"
#include "test_util.hpp"

namespace qr {
namespace {

using testing::TempDir;

KnowledgeCorpus random_corpus(std::uint64_t seed, std::size_t count, std::size_t dim) {
  std::mt19937_64 rng(seed);
  std::vector<Vector> rows;
  for (std::size_t i = 0; i < count; ++i) rows.push_back(testing::random_vector(rng, dim));
  return testing::make_corpus(rows);
}

std::vector<unsigned char> slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void dump(const std::filesystem::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

TEST(CorpusFile, EmptyCorpusIsHeaderOnly) {
  TempDir dir("io");
  const auto path = dir / "empty.qemb";
  save_corpus(KnowledgeCorpus{}, path);
  EXPECT_EQ(std::filesystem::file_size(path), kQembHeaderSize);
  EXPECT_EQ(std::filesystem::file_size(sidecar_path(path)), 0u);
  const auto loaded = load_knowledge(path);
  EXPECT_EQ(loaded.size(), 0u);
}

TEST(CorpusFile, HeaderLayout) {
  TempDir dir("io");
  const auto path = dir / "one.qemb";
  save_corpus(testing::make_corpus({{1.0, 2.0, 3.0, 4.0}}), path);
  const auto bytes = slurp(path);
  ASSERT_EQ(bytes.size(), kQembHeaderSize + 16);  // 1 entry x 4 dims x 4 bytes
  EXPECT_EQ(std::memcmp(bytes.data(), "QEMB", 4), 0);
  EXPECT_EQ(bytes[4], 1);  // version, little-endian
  EXPECT_EQ(bytes[5], 0);
  EXPECT_EQ(bytes[8], 4);  // dimension
  EXPECT_EQ(bytes[16], 1);  // count
  float first;
  std::uint32_t bits = bytes[24] | bytes[25] << 8 | bytes[26] << 16 | static_cast<std::uint32_t>(bytes[27]) << 24;
  first = std::bit_cast<float>(bits);
  EXPECT_EQ(first, 1.0f);
}

TEST(CorpusFile, RoundTripIsBitwiseIdentity) {
  TempDir dir("io");
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    const auto corpus = random_corpus(seed, 100, 16);
    const auto path = dir / ("c" + std::to_string(seed) + ".qemb");
    save_corpus(corpus, path);
    const auto loaded = load_knowledge(path, {.normalize = false});
    EXPECT_EQ(loaded.ids, corpus.ids);
    EXPECT_EQ(loaded.text_refs, corpus.text_refs);
    ASSERT_EQ(loaded.embeddings.data().size(), corpus.embeddings.data().size());
    EXPECT_EQ(std::memcmp(loaded.embeddings.data().data(), corpus.embeddings.data().data(),
                          corpus.embeddings.data().size() * sizeof(float)),
              0);
  }
}

TEST(CorpusFile, LabelAndImageRoundTrip) {
  TempDir dir("io");
  auto labels = testing::make_label_space({{1.0, 0.0}, {0.0, 1.0}, {0.6, 0.8}});
  save_corpus(labels, dir / "labels.qemb");
  const auto loaded = std::get<LabelSpace>(load_corpus(dir / "labels.qemb", {.normalize = false}));
  EXPECT_EQ(loaded.texts, labels.texts);
  EXPECT_EQ(loaded.hierarchies, labels.hierarchies);
  EXPECT_EQ(loaded.embeddings, labels.embeddings);

  ImageSet images;
  images.ids = {"a", "b"};
  images.labels = {labels.texts[0], labels.texts[2]};
  images.splits = {"train", "test"};
  images.embeddings.append_row(Vector{0.1, 0.2});
  images.embeddings.append_row(Vector{0.3, -0.2});
  save_corpus(images, dir / "images.qemb");
  const auto back = std::get<ImageSet>(load_corpus(dir / "images.qemb", {.normalize = false}));
  EXPECT_EQ(back.ids, images.ids);
  EXPECT_EQ(back.labels, images.labels);
  EXPECT_EQ(back.splits, images.splits);
  EXPECT_EQ(back.embeddings, images.embeddings);
}

TEST(CorpusFile, NormalizesAtIngestion) {
  TempDir dir("io");
  save_corpus(random_corpus(3, 50, 12), dir / "c.qemb");
  const auto c = load_knowledge(dir / "c.qemb");
  for (std::size_t i = 0; i < c.size(); ++i) EXPECT_NEAR(norm(c.embedding(i)), 1.0, kUnitNormTolerance);
}

TEST(CorpusFile, WikipediaScaleCorpusLoads) {
  TempDir dir("io");
  constexpr std::size_t k = 122408;
  EmbeddingTable t;
  t.vectors = FloatMatrix(k, 4);
  for (std::size_t i = 0; i < k; ++i) {
    t.vectors(i, i % 4) = 1.0f;
    t.records.push_back({.id = "wiki-" + std::to_string(i), .kind = RecordKind::owk});
  }
  write_table(t, dir / "wiki.qemb");
  const auto c = load_knowledge(dir / "wiki.qemb");
  EXPECT_EQ(c.size(), k);
}

TEST(CorpusFile, EveryHeaderByteFlipIsRejected) {
  TempDir dir("io");
  const auto path = dir / "c.qemb";
  save_corpus(random_corpus(5, 7, 5), path);
  const auto pristine = slurp(path);
  for (std::size_t byte = 0; byte < kQembHeaderSize; ++byte) {
    for (unsigned char mask : {0x01, 0x10, 0x80, 0xFF}) {
      auto bytes = pristine;
      bytes[byte] ^= mask;
      dump(path, bytes);
      EXPECT_THROW(read_table(path), DataError) << "byte " << byte << " mask " << int(mask);
    }
  }
  // Same for an empty file, where the payload length gives no protection.
  save_corpus(KnowledgeCorpus{}, path);
  const auto empty = slurp(path);
  for (std::size_t byte = 0; byte < kQembHeaderSize; ++byte) {
    auto bytes = empty;
    bytes[byte] ^= 0x04;
    dump(path, bytes);
    EXPECT_THROW(read_table(path), DataError) << "byte " << byte;
  }
}

TEST(CorpusFile, RejectsTruncationAndNonFinite) {
  TempDir dir("io");
  const auto path = dir / "c.qemb";
  save_corpus(random_corpus(6, 3, 4), path);
  auto bytes = slurp(path);
  bytes.pop_back();
  dump(path, bytes);
  EXPECT_THROW(read_table(path), DataError);

  save_corpus(random_corpus(6, 3, 4), path);
  bytes = slurp(path);
  const auto nan_bits = std::bit_cast<std::uint32_t>(std::numeric_limits<float>::quiet_NaN());
  for (int i = 0; i < 4; ++i) bytes[kQembHeaderSize + 8 + i] = static_cast<unsigned char>(nan_bits >> (8 * i));
  dump(path, bytes);
  EXPECT_THROW(read_table(path), DataError);
}

TEST(CorpusFile, RejectsSidecarDisagreement) {
  TempDir dir("io");
  const auto path = dir / "c.qemb";
  save_corpus(random_corpus(7, 2, 4), path);
  {
    std::ofstream side(sidecar_path(path), std::ios::trunc);
    side << R"({"id":"a","kind":"owk","dim":5})" << "\n" << R"({"id":"b","kind":"owk","dim":5})" << "\n";
  }
  EXPECT_THROW(read_table(path), DataError);
  {
    std::ofstream side(sidecar_path(path), std::ios::trunc);
    side << R"({"id":"a","kind":"owk"})" << "\n";
  }
  EXPECT_THROW(read_table(path), DataError);
  {
    std::ofstream side(sidecar_path(path), std::ios::trunc);
    side << R"({"id":"a","kind":"owk"})" << "\n" << R"({"id":"b","kind":"nonsense"})" << "\n";
  }
  EXPECT_THROW(read_table(path), DataError);
  std::filesystem::remove(sidecar_path(path));
  EXPECT_THROW(read_table(path), DataError);
}

TEST(CorpusFile, KindMismatchIsRejected) {
  TempDir dir("io");
  save_corpus(random_corpus(8, 3, 4), dir / "c.qemb");
  EXPECT_THROW(load_labels(dir / "c.qemb"), DataError);
  EXPECT_THROW(load_images(dir / "c.qemb"), DataError);
}

TEST(CorpusFile, UnwritablePath) {
  TempDir dir("io");
  std::ofstream(dir / "blocker") << "x";
  EXPECT_THROW(save_corpus(random_corpus(1, 1, 2), dir / "blocker" / "c.qemb"), std::exception);
}

TEST(ParamFile, RoundTripsChunkedTensors) {
  TempDir dir("io");
  ParamTensors t{{"a", {1.0, 2.0, 3.0, 4.0, 5.0}}, {"b", {0.25}}, {"empty", {}}};
  write_params(t, 2, dir / "p.qemb", {{"model", "test"}});
  nlohmann::json meta;
  const auto back = read_params(dir / "p.qemb", &meta);
  EXPECT_EQ(back, t);
  EXPECT_EQ(meta["model"], "test");
  EXPECT_THROW(load_knowledge(dir / "p.qemb"), DataError);
}

}  // namespace
}  // namespace qr
