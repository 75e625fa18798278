#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "audiotf/model.hpp"
#include "fd_check.hpp"

using namespace audiotf;
namespace fs = std::filesystem;

namespace {

const fs::path kTmp = "tmp_test_model";
struct TmpDir {
  TmpDir() { fs::create_directories(kTmp); }
  ~TmpDir() { fs::remove_all(kTmp); }
} tmp_dir;

// Small stand-in configuration so double-precision forward/backward stays fast.
ModelConfig tiny_config(Variant v = Variant::baseline, int num_layers = 3) {
  ModelConfig c;
  c.num_layers = num_layers;
  c.embed_dim = 4;
  c.num_heads = 2;
  c.attn_head_dim = 3;
  c.ff_dim = 5;
  c.frontend_hidden = 6;
  c.frame_len = 8;
  c.num_frames = 4;
  c.head_hidden = 5;
  c.head_layers = 2;
  c.n_labels = 3;
  c.variant = v;
  return c;
}

template <typename T>
Tensor<T> random_frames(const ModelConfig& cfg, int batch, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<T> v(size_t(batch) * size_t(cfg.num_frames) * size_t(cfg.frame_len));
  for (auto& x : v) x = T(rng.uniform(-1.0, 1.0));
  return Tensor<T>::from({batch, cfg.num_frames, cfg.frame_len}, v, /*requires_grad=*/true);
}

// Independent parameter-count formula: dense front end, per-block attention
// (per-head q/k/v projections plus output projection, no biases), two layer
// norms, three-layer feed-forward, then the classification head.
std::int64_t expected_params(const ModelConfig& c) {
  auto dense = [](std::int64_t in, std::int64_t out) { return in * out + out; };
  std::int64_t n = dense(c.frame_len, c.frontend_hidden) + dense(c.frontend_hidden, c.embed_dim);
  const std::int64_t attn = 3LL * c.num_heads * c.embed_dim * c.attn_head_dim +
                            std::int64_t(c.num_heads) * c.attn_head_dim * c.embed_dim;
  const std::int64_t ff = dense(c.embed_dim, c.ff_dim) + dense(c.ff_dim, c.ff_dim) +
                          dense(c.ff_dim, c.embed_dim);
  n += c.num_layers * (attn + ff + 4LL * c.embed_dim);
  std::int64_t in = c.embed_dim;
  for (int l = 0; l < c.head_layers - 1; ++l) {
    n += dense(in, c.head_hidden);
    in = c.head_hidden;
  }
  return n + dense(in, c.n_labels);
}

}  // namespace

TEST_CASE("param counts: small and large configurations land in their budgets") {
  AudioTransformer<float> small(ModelConfig::small(), 1);
  AudioTransformer<float> large(ModelConfig::large(), 1);
  CHECK(small.param_count() == 1020104);
  CHECK(large.param_count() == 1989512);
  CHECK(small.param_count() == expected_params(ModelConfig::small()));
  CHECK(large.param_count() == expected_params(ModelConfig::large()));
  CHECK(small.param_count() >= 770000);
  CHECK(small.param_count() <= 1040000);
  CHECK(large.param_count() >= 1950000);
  CHECK(large.param_count() <= 2650000);
}

TEST_CASE("param counts: pooling and multi-scale variants add no parameters") {
  AudioTransformer<float> base(ModelConfig::large(Variant::baseline), 1);
  AudioTransformer<float> pooled(ModelConfig::large(Variant::pooled), 1);
  AudioTransformer<float> ms(ModelConfig::large(Variant::multiscale), 1);
  CHECK(pooled.param_count() == base.param_count());
  CHECK(ms.param_count() == base.param_count());
}

TEST_CASE("initialization is deterministic in the seed") {
  AudioTransformer<double> a(tiny_config(), 42), b(tiny_config(), 42), c(tiny_config(), 43);
  auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  REQUIRE(pa.size() == pb.size());
  bool any_diff = false;
  for (size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].first == pb[i].first);
    CHECK(pa[i].second.values() == pb[i].second.values());
    if (pa[i].second.values() != pc[i].second.values()) any_diff = true;
  }
  CHECK(any_diff);
}

TEST_CASE("forward: shape and sigmoid range") {
  const auto cfg = tiny_config();
  AudioTransformer<double> m(cfg, 7);
  auto y = m.forward(random_frames<double>(cfg, 2, 5));
  CHECK(y.shape() == Shape{2, cfg.n_labels});
  for (double v : y.values()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
}

TEST_CASE("forward: identical inputs in a batch produce identical rows") {
  const auto cfg = tiny_config();
  AudioTransformer<double> m(cfg, 7);
  auto one = random_frames<double>(cfg, 1, 9);
  std::vector<double> doubled = one.values();
  doubled.insert(doubled.end(), one.values().begin(), one.values().end());
  auto y = m.forward(Tensor<double>::from({2, cfg.num_frames, cfg.frame_len}, doubled));
  for (int j = 0; j < cfg.n_labels; ++j)
    CHECK(y.values()[size_t(j)] == y.values()[size_t(cfg.n_labels + j)]);
}

TEST_CASE("forward: input shape is validated") {
  AudioTransformer<double> m(tiny_config(), 7);
  CHECK_THROWS_AS(m.forward(Tensor<double>::zeros({2, 3, 8})), DimensionError);
  CHECK_THROWS_AS(m.forward(Tensor<double>::zeros({4, 8})), DimensionError);
}

TEST_CASE("probe mode: baseline keeps T, pooled halves per site, multi-scale keeps T") {
  for (int layers : {3, 6}) {
    ModelConfig cfg = tiny_config(Variant::baseline, layers);
    cfg.num_frames = 8;
    AudioTransformer<double> base(cfg, 3);
    CHECK(base.forward_embeddings(random_frames<double>(cfg, 1, 1)).shape() ==
          Shape{1, 8, cfg.embed_dim});

    cfg.variant = Variant::pooled;
    AudioTransformer<double> pooled(cfg, 3);
    const int t_final = layers == 3 ? 4 : 2;  // pool after blocks 2 (and 4)
    CHECK(pooled.forward_embeddings(random_frames<double>(cfg, 1, 1)).shape() ==
          Shape{1, t_final, cfg.embed_dim});

    cfg.variant = Variant::multiscale;
    AudioTransformer<double> ms(cfg, 3);
    CHECK(ms.forward_embeddings(random_frames<double>(cfg, 1, 1)).shape() ==
          Shape{1, 8, cfg.embed_dim});
  }
}

TEST_CASE("probe mode: causality through the full baseline stack") {
  const auto cfg = tiny_config(Variant::baseline, 3);
  AudioTransformer<double> m(cfg, 11);
  Rng rng(77);
  for (int trial = 0; trial < 30; ++trial) {
    auto x = random_frames<double>(cfg, 1, 1000 + std::uint64_t(trial));
    const int t = 1 + int(rng.below(std::uint64_t(cfg.num_frames - 1)));
    auto x2 = x;
    for (int k = 0; k < cfg.frame_len; ++k)
      x2.values()[size_t(t * cfg.frame_len + k)] += rng.uniform(-1.0, 1.0);
    auto ya = m.forward_embeddings(x).values();
    auto yb = m.forward_embeddings(x2).values();
    for (int u = 0; u < t; ++u)
      for (int e = 0; e < cfg.embed_dim; ++e)
        CHECK(ya[size_t(u * cfg.embed_dim + e)] == yb[size_t(u * cfg.embed_dim + e)]);
  }
}

TEST_CASE("full-model gradients match finite differences") {
  for (Variant v : {Variant::baseline, Variant::pooled, Variant::multiscale}) {
    const auto cfg = tiny_config(v, 3);
    AudioTransformer<double> m(cfg, 21);
    auto x = random_frames<double>(cfg, 2, 33);
    std::vector<Tensor<double>> leaves;
    // Jitter every parameter off its init point: zero-initialized biases can
    // put relu inputs exactly at the kink, where the central difference and
    // the subgradient convention legitimately disagree.
    Rng jitter(99);
    for (auto& [name, t] : m.parameters()) {
      for (auto& v : const_cast<Tensor<double>&>(t).values()) v += jitter.uniform(-0.05, 0.05);
      leaves.push_back(t);
    }
    leaves.push_back(x);
    auto res = fd::check_gradients(leaves, [&] { return sum_all(m.forward(x)); }, 1e-5);
    CHECK(res.checked > 700);
    CHECK(res.max_rel_err < 1e-4);
  }
}

TEST_CASE("checkpoint: save/load round trip reproduces the forward pass bit-exactly") {
  const auto cfg = tiny_config(Variant::multiscale, 3);
  AudioTransformer<float> m(cfg, 55);
  const std::string path = (kTmp / "rt.atfm").string();
  save_checkpoint(m, path);
  auto m2 = load_checkpoint<float>(path);
  auto pa = m.parameters(), pb = m2.parameters();
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].first == pb[i].first);
    CHECK(pa[i].second.values() == pb[i].second.values());
  }
  auto x = random_frames<float>(cfg, 2, 5);
  CHECK(m.forward(x).values() == m2.forward(x).values());
  CHECK(m2.config().to_text() == cfg.to_text());
}

TEST_CASE("checkpoint: corrupted magic is rejected") {
  AudioTransformer<float> m(tiny_config(), 1);
  const std::string path = (kTmp / "bad.atfm").string();
  save_checkpoint(m, path);
  std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
  f.write("XXXX", 4);
  f.close();
  CHECK_THROWS_AS(load_checkpoint<float>(path), CheckpointError);
}

TEST_CASE("checkpoint: truncated file is rejected") {
  AudioTransformer<float> m(tiny_config(), 1);
  const std::string full = (kTmp / "full.atfm").string();
  save_checkpoint(m, full);
  std::ifstream in(full, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string cut = (kTmp / "cut.atfm").string();
  std::ofstream(cut, std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  CHECK_THROWS_AS(load_checkpoint<float>(cut), CheckpointError);
}

TEST_CASE("checkpoint: config mismatch against a requested config is rejected") {
  AudioTransformer<float> m(tiny_config(Variant::baseline, 3), 1);
  const std::string path = (kTmp / "cfg.atfm").string();
  save_checkpoint(m, path);
  CHECK_NOTHROW(load_checkpoint<float>(path, tiny_config(Variant::baseline, 3)));
  CHECK_THROWS_AS(load_checkpoint<float>(path, tiny_config(Variant::pooled, 3)), CheckpointError);
  CHECK_THROWS_AS(load_checkpoint<float>(path, ModelConfig::large()), CheckpointError);
}

TEST_CASE("config: canonical text round trip and validation") {
  for (Variant v : {Variant::baseline, Variant::pooled, Variant::multiscale}) {
    auto cfg = ModelConfig::small(v, 17);
    CHECK(ModelConfig::from_text(cfg.to_text()).to_text() == cfg.to_text());
  }
  ModelConfig bad;
  bad.embed_dim = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  ModelConfig odd = ModelConfig::large(Variant::pooled);
  odd.num_frames = 6;  // 6 -> 3 -> pooling at block 4 needs an even length
  CHECK_THROWS_AS(odd.validate(), ConfigError);
  CHECK_THROWS_AS(variant_from_name("bogus"), ConfigError);
}
