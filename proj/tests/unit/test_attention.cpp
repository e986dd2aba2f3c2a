#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "condenser/attention.hpp"
#include "condenser/io_util.hpp"
#include "support/attention_fixture.hpp"

using namespace condenser;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "condenser_attention_test";
  std::filesystem::create_directories(dir);
  return dir / name;
}

using condenser::testing::AttentionFixture;
using Fixture = AttentionFixture;

}  // namespace

TEST(Entropy, UniformAndOneHot) {
  for (std::size_t n : {1u, 2u, 5u, 31u}) {
    std::vector<double> p(n, 1.0 / static_cast<double>(n));
    EXPECT_NEAR(entropy(p), std::log(static_cast<double>(n)), 1e-12);
  }
  std::vector<double> one_hot{0, 0, 1, 0};
  EXPECT_EQ(entropy(one_hot), 0.0);
  std::vector<double> bad{0.5, -0.1};
  EXPECT_THROW(entropy(bad), NumericError);
}

TEST(ClsEntropyByLayer, ReadsRowZeroWithinLength) {
  // [B=2, H=2, T=3, T=3]; only the CLS rows matter.
  std::vector<double> map(2 * 2 * 3 * 3, 0.0);
  auto set_row = [&](std::size_t b, std::size_t h, std::vector<double> row) {
    for (std::size_t j = 0; j < 3; ++j) map[((b * 2 + h) * 3) * 3 + j] = row[j];
  };
  set_row(0, 0, {1.0 / 3, 1.0 / 3, 1.0 / 3});
  set_row(0, 1, {1, 0, 0});
  set_row(1, 0, {0.5, 0.5, 0});
  set_row(1, 1, {0.5, 0.5, 0});
  std::vector<Tensor> maps{Tensor({2, 2, 3, 3}, map)};
  EXPECT_NEAR(cls_entropy_by_layer(maps, 0, 3)[0], std::log(3.0) / 2, 1e-12);
  EXPECT_NEAR(cls_entropy_by_layer(maps, 1, 2)[0], std::log(2.0), 1e-12);
  EXPECT_THROW(cls_entropy_by_layer(maps, 2, 3), ShapeError);
  EXPECT_THROW(cls_entropy_by_layer(maps, 0, 4), ShapeError);
}

TEST(ClsAttentionEntropy, HandSetLogitsMatchHandComputation) {
  Fixture fx;
  Encoder encoder = fx.build();
  const std::vector<std::string> docs{"a b c", "d a", "b", "c c d b a"};
  auto profile = cls_attention_entropy(encoder, fx.vocab, docs, 8, 100, "fixture");
  ASSERT_EQ(profile.layers(), 2u);
  EXPECT_EQ(profile.samples, 3u);  // "b" has one token and is skipped
  EXPECT_EQ(profile.tag, "fixture");

  std::vector<std::vector<long double>> per_doc;
  for (const auto& doc : {docs[0], docs[1], docs[3]}) per_doc.push_back(fx.expected(fx.vocab.encode(doc, 8)));
  for (std::size_t l = 0; l < 2; ++l) {
    long double mean = 0, var = 0;
    for (const auto& d : per_doc) mean += d[l];
    mean /= 3;
    for (const auto& d : per_doc) var += (d[l] - mean) * (d[l] - mean);
    EXPECT_NEAR(profile.mean[l], static_cast<double>(mean), 1e-6) << "layer " << l;
    EXPECT_NEAR(profile.stddev[l], static_cast<double>(std::sqrt(var / 2)), 1e-6) << "layer " << l;
  }
}

TEST(ClsAttentionEntropy, UniformAttentionGivesLogN) {
  Fixture fx;
  for (auto& k : fx.key)
    for (auto& row : k) std::fill(row.begin(), row.end(), 0.0L);
  Encoder encoder = fx.build();
  auto profile = cls_attention_entropy(encoder, fx.vocab, {"a b c d"}, 8, 10);
  for (double m : profile.mean) EXPECT_NEAR(m, std::log(5.0), 1e-12);
  for (double s : profile.stddev) EXPECT_EQ(s, 0.0);
}

TEST(ClsAttentionEntropy, PaddingDoesNotChangeEntropy) {
  ModelConfig c;
  c.early_layers = 1;
  c.late_layers = 2;
  c.hidden_dim = 16;
  c.num_heads = 4;
  c.ffn_dim = 32;
  c.max_position = 16;
  c.dropout_rate = 0.0;
  c.init_std = 0.3;
  auto vocab = text::Vocabulary::from_tokens({"a", "b", "c", "d", "e"});
  c.vocab_size = vocab.size();
  Encoder encoder(c, 4);
  auto alone = cls_attention_entropy(encoder, vocab, {"a b c"}, 16, 10);
  // Measured in one padded batch with a longer document, then isolated.
  ForwardOptions options;
  options.capture_attention = true;
  NoGradGuard no_grad;
  auto batch = text::TokenBatch::pad({vocab.encode("a b c", 16), vocab.encode("e d c b a e d c b a", 16)});
  auto out = encoder.encode(batch, options);
  auto padded = cls_entropy_by_layer(out.attentions, 0, 4);
  for (std::size_t l = 0; l < 3; ++l) EXPECT_NEAR(padded[l], alone.mean[l], 1e-12);
}

TEST(ClsAttentionEntropy, BoundsOnRandomModel) {
  ModelConfig c;
  c.early_layers = 2;
  c.late_layers = 2;
  c.hidden_dim = 16;
  c.num_heads = 4;
  c.ffn_dim = 32;
  c.max_position = 12;
  c.dropout_rate = 0.0;
  c.init_std = 0.5;
  std::vector<std::string> docs;
  const std::vector<std::string> words{"w0", "w1", "w2", "w3", "w4", "w5"};
  for (int i = 0; i < 40; ++i) {
    std::string d;
    for (int j = 0; j <= i % 13; ++j) d += (j ? " " : "") + words[(i * 7 + j * 3) % words.size()];
    docs.push_back(d);
  }
  auto vocab = text::Vocabulary::build(docs);
  c.vocab_size = vocab.size();
  Encoder encoder(c, 8);
  auto profile = cls_attention_entropy(encoder, vocab, docs, 12, 1000);
  ASSERT_EQ(profile.layers(), 4u);
  for (double m : profile.mean) {
    EXPECT_GE(m, 0.0);
    EXPECT_LE(m, std::log(12.0));
  }
}

TEST(ClsAttentionEntropy, MaxSamplesAndEmpty) {
  Fixture fx;
  Encoder encoder = fx.build();
  auto two = cls_attention_entropy(encoder, fx.vocab, {"a b", "c d", "a c", "b d"}, 8, 2);
  EXPECT_EQ(two.samples, 2u);
  auto none = cls_attention_entropy(encoder, fx.vocab, {"a", ""}, 8, 10);
  EXPECT_EQ(none.samples, 0u);
  EXPECT_EQ(none.mean, std::vector<double>(2, 0.0));
}

TEST(SummarizeEntropies, SampleStandardDeviation) {
  auto p = summarize_entropies({{1.0, 2.0}, {3.0, 2.0}, {5.0, 2.0}}, "t");
  EXPECT_EQ(p.mean, (std::vector<double>{3.0, 2.0}));
  EXPECT_EQ(p.stddev, (std::vector<double>{2.0, 0.0}));
  EXPECT_THROW(summarize_entropies({{1.0}, {1.0, 2.0}}, "t"), ShapeError);
}

TEST(CompareProfiles, IdenticalAndShifted) {
  EntropyProfile a{{1.0, 2.0, 0.5}, {0.1, 0.1, 0.1}, 10, "a"};
  auto same = compare_profiles(a, a);
  for (const auto& d : same.layers) EXPECT_EQ(d.delta, 0.0);
  EXPECT_EQ(same.max_abs_delta, 0.0);

  EntropyProfile b = a;
  b.tag = "b";
  for (auto& m : b.mean) m += 0.1;
  auto shifted = compare_profiles(a, b);
  ASSERT_EQ(shifted.layers.size(), 3u);
  for (const auto& d : shifted.layers) EXPECT_NEAR(d.delta, 0.1, 1e-12);
  EXPECT_NEAR(shifted.layers[1].relative, 0.05, 1e-12);
  EXPECT_NEAR(shifted.mean_abs_delta, 0.1, 1e-12);

  EntropyProfile c{{1.0}, {0.0}, 1, "c"};
  EXPECT_THROW(compare_profiles(a, c), ShapeError);
  EntropyProfile zero{{0.0}, {0.0}, 1, "z"};
  EXPECT_TRUE(std::isnan(compare_profiles(zero, c).layers[0].relative));
}

TEST(ProfileCsv, RoundTripAndHeader) {
  EntropyProfile p{{1.25, 0.1 + 0.2}, {0.5, 1e-3}, 7, "condenser-full"};
  auto path = temp_path("profile.csv");
  write_profile_csv(path, p);
  auto lines = io::read_lines(path);
  EXPECT_EQ(lines[0], "layer,mean_entropy_nats,std,n_samples,model_tag");
  EXPECT_EQ(lines[1], "0,1.25,0.5,7,condenser-full");
  EXPECT_EQ(read_profile_csv(path), p);

  p.tag = "bad,tag";
  EXPECT_THROW(write_profile_csv(path, p), Error);
  io::write_atomic(path, "layer,x\n");
  EXPECT_THROW(read_profile_csv(path), FormatError);

  auto cpath = temp_path("compare.csv");
  write_comparison_csv(cpath, compare_profiles(EntropyProfile{{1.0}, {0.0}, 1, "a"}, EntropyProfile{{1.5}, {0.0}, 1, "b"}));
  auto clines = io::read_lines(cpath);
  EXPECT_EQ(clines[0], "layer,entropy_a,entropy_b,delta,relative_delta,tag_a,tag_b");
  EXPECT_EQ(clines[1], "0,1,1.5,0.5,0.5,a,b");
}
