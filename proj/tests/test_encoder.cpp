#include <gtest/gtest.h>

#include "plse/gradcheck.hpp"
#include "test_util.hpp"

using namespace plse;

namespace {

EncoderConfig small_config(std::uint64_t seed = 3) {
  EncoderConfig c;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 4;
  c.d_ff = 32;
  c.max_len = 24;
  c.vocab_size = 40;
  c.dropout_p = 0.1;
  c.seed = seed;
  return c;
}

EncoderParams<double> noisy_encoder(const EncoderConfig& c, double scale = 0.3) {
  auto p = init_encoder<double>(c);
  Rng r(derive_seed(c.seed, {99}));
  for (auto& t : p.tensors())
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data[i] += scale * normal(r);
  return p;
}

PromptEncoding random_prompt(Rng& rng, std::size_t vocab, std::size_t pad_to) {
  std::vector<TokenId> a1(1 + uniform_index(rng, 6)), a2(1 + uniform_index(rng, 6));
  for (auto& t : a1) t = static_cast<TokenId>(Vocab::kNumSpecial + uniform_index(rng, vocab - Vocab::kNumSpecial));
  for (auto& t : a2) t = static_cast<TokenId>(Vocab::kNumSpecial + uniform_index(rng, vocab - Vocab::kNumSpecial));
  return templatize_ids(a1, a2, pad_to, pad_to);
}

}  // namespace

TEST(EncoderInit, SameSeedIsBitIdentical) {
  auto a = init_encoder<float>(small_config(5));
  auto b = init_encoder<float>(small_config(5));
  auto c = init_encoder<float>(small_config(6));
  auto ta = a.tensors(), tb = b.tensors(), tc = c.tensors();
  bool any_diff = false;
  for (std::size_t k = 0; k < ta.size(); ++k) {
    ASSERT_EQ(std::memcmp(ta[k].data, tb[k].data, sizeof(float) * static_cast<std::size_t>(ta[k].size())), 0) << ta[k].name;
    any_diff |= std::memcmp(ta[k].data, tc[k].data, sizeof(float) * static_cast<std::size_t>(ta[k].size())) != 0;
  }
  EXPECT_TRUE(any_diff);
}

TEST(EncoderInit, IndivisibleHeadsIsAnError) {
  auto c = small_config();
  c.d_model = 130;
  c.n_heads = 4;
  EXPECT_THROW(init_encoder<float>(c), Error);
  c = small_config();
  c.dropout_p = 1.0;
  EXPECT_THROW(init_encoder<float>(c), Error);
  c = small_config();
  c.max_len = kTemplateMinLength - 1;
  EXPECT_THROW(init_encoder<float>(c), Error);
}

TEST(EncoderInit, ParameterCountMatchesHandCount) {
  EncoderConfig c;
  c.d_model = 128;
  c.n_layers = 4;
  c.n_heads = 4;
  c.d_ff = 512;
  c.vocab_size = 8000;
  c.max_len = 64;
  // embeddings 8000*128 + 64*128; per layer q,k,v,o with biases 66048,
  // feed-forward 131712, two norms 512; final norm 256; output bias 8000
  const std::size_t hand = 1024000 + 8192 + 4 * (66048 + 131712 + 512) + 256 + 8000;
  EXPECT_EQ(hand, 1833536u);
  EXPECT_EQ(encoder_parameter_count(c), hand);
  auto p = init_encoder<float>(c);
  EXPECT_EQ(count_parameters(p), hand);
}

TEST(EncoderInit, StatisticsOfInitialWeights) {
  EncoderConfig c;
  c.vocab_size = 2000;
  auto p = init_encoder<double>(c);
  const double sd = std::sqrt(p.tok_emb.array().square().mean());
  EXPECT_NEAR(sd, kInitStd, 1e-3);
  EXPECT_EQ(p.layers[0].bq.squaredNorm(), 0.0);
  EXPECT_TRUE((p.layers[1].ln2_g.array() == 1.0).all());
}

TEST(EncoderForward, EvalModeIsDeterministic) {
  auto p = noisy_encoder(small_config());
  Rng rng(1);
  const auto e = random_prompt(rng, 40, 20);
  EncoderActivations<double> a, b;
  Rng r1(5), r2(77);
  encoder_forward(p, e.token_ids, e.attn_mask, Mode::eval, &r1, a);
  encoder_forward(p, e.token_ids, e.attn_mask, Mode::eval, &r2, b);
  EXPECT_EQ(a.H, b.H);
}

TEST(EncoderForward, TrainModeDropoutFollowsSeed) {
  auto p = noisy_encoder(small_config());
  Rng rng(1);
  const auto e = random_prompt(rng, 40, 20);
  EncoderActivations<double> a, b, c;
  Rng r1(5), r2(5), r3(6);
  encoder_forward(p, e.token_ids, e.attn_mask, Mode::train, &r1, a);
  encoder_forward(p, e.token_ids, e.attn_mask, Mode::train, &r2, b);
  encoder_forward(p, e.token_ids, e.attn_mask, Mode::train, &r3, c);
  EXPECT_EQ(a.H, b.H);
  EXPECT_NE(a.H, c.H);
}

TEST(EncoderForward, AttentionRowsAreNormalizedOverUnpaddedKeys) {
  auto p = noisy_encoder(small_config(), 1.0);
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const auto e = random_prompt(rng, 40, 24);
    EncoderActivations<double> act;
    encoder_forward(p, e.token_ids, e.attn_mask, Mode::eval, nullptr, act);
    for (const auto& layer : act.layers)
      for (const auto& P : layer.probs)
        for (Eigen::Index i = 0; i < P.rows(); ++i) {
          EXPECT_NEAR(P.row(i).sum(), 1.0, 1e-6);
          for (Eigen::Index j = 0; j < P.cols(); ++j)
            if (!e.attn_mask[static_cast<std::size_t>(j)]) EXPECT_EQ(P(i, j), 0.0);
        }
  }
}

TEST(EncoderForward, PaddedPositionsDoNotLeak) {
  auto p = noisy_encoder(small_config(), 1.0);
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto e = random_prompt(rng, 40, 24);
    auto scrambled = e.token_ids;
    // rewrite the pad tail with arbitrary ids
    for (std::size_t i = 0; i < scrambled.size(); ++i)
      if (!e.attn_mask[i]) scrambled[i] = static_cast<TokenId>(uniform_index(rng, 40));
    EncoderActivations<double> a, b;
    encoder_forward(p, e.token_ids, e.attn_mask, Mode::eval, nullptr, a);
    encoder_forward(p, scrambled, e.attn_mask, Mode::eval, nullptr, b);
    for (std::size_t i = 0; i < e.length(); ++i)
      if (e.attn_mask[i])
        EXPECT_LT((a.H.row(static_cast<Eigen::Index>(i)) - b.H.row(static_cast<Eigen::Index>(i))).norm(), 1e-12);
  }
}

TEST(EncoderForward, EquivariantUnderConsistentPositionPermutation) {
  auto c = small_config();
  c.max_len = 9;
  auto p = noisy_encoder(c, 1.0);
  Rng rng(8);
  std::vector<TokenId> ids(9);
  for (auto& t : ids) t = static_cast<TokenId>(uniform_index(rng, 40));
  const std::vector<std::uint8_t> mask(9, 1);
  std::vector<std::size_t> perm(9);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  shuffle(perm, rng);
  auto q = p;
  std::vector<TokenId> pids(9);
  for (std::size_t i = 0; i < 9; ++i) {
    pids[i] = ids[perm[i]];
    q.pos_emb.row(static_cast<Eigen::Index>(i)) = p.pos_emb.row(static_cast<Eigen::Index>(perm[i]));
  }
  EncoderActivations<double> a, b;
  encoder_forward(p, ids, mask, Mode::eval, nullptr, a);
  encoder_forward(q, pids, mask, Mode::eval, nullptr, b);
  for (std::size_t i = 0; i < 9; ++i)
    EXPECT_LT((b.H.row(static_cast<Eigen::Index>(i)) - a.H.row(static_cast<Eigen::Index>(perm[i]))).norm(), 1e-10);
}

TEST(EncoderForward, InvalidInputsAreErrors) {
  auto p = init_encoder<double>(small_config());
  const std::vector<std::uint8_t> m3(3, 1);
  EXPECT_THROW(encoder_forward(p, {2, 40, 3}, m3, Mode::eval, nullptr, *std::make_unique<EncoderActivations<double>>()), Error);
  EXPECT_THROW(encoder_forward(p, {2, -1, 3}, m3, Mode::eval, nullptr, *std::make_unique<EncoderActivations<double>>()), Error);
  EXPECT_THROW(encoder_forward(p, std::vector<TokenId>(25, 5), std::vector<std::uint8_t>(25, 1), Mode::eval, nullptr,
                               *std::make_unique<EncoderActivations<double>>()),
               Error);
  EXPECT_THROW(encoder_forward(p, {2, 5, 3}, m3, Mode::train, nullptr, *std::make_unique<EncoderActivations<double>>()), Error);
}

TEST(EncoderForward, NoNonFiniteValuesOverManyBatches) {
  auto c = small_config();
  auto p = init_encoder<float>(c);
  Rng rng(12);
  for (int b = 0; b < 1000; ++b) {
    std::vector<MaskedEncoding> batch;
    for (int i = 0; i < 4; ++i) {
      MaskedEncoding m;
      m.base = random_prompt(rng, 40, 16);
      batch.push_back(std::move(m));
    }
    for (const auto& H : forward(p, batch, b % 2 ? Mode::train : Mode::eval, static_cast<std::uint64_t>(b)))
      ASSERT_TRUE(H.allFinite());
  }
}

TEST(LayerNorm, NormalizedStatistics) {
  Rng rng(3);
  Mat<double> x(50, 32);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = 5.0 * normal(rng) + 3.0;
  RowVec<double> g = RowVec<double>::Ones(32), b = RowVec<double>::Zero(32);
  LayerNormCache<double> cache;
  const auto y = layer_norm_forward(x, g, b, cache);
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    const double mean = y.row(i).mean();
    EXPECT_NEAR(mean, 0.0, 1e-5);
    EXPECT_NEAR((y.row(i).array() - mean).square().mean(), 1.0, 1e-3);
  }
  EXPECT_EQ(y, cache.xhat);
}

TEST(MlmLogits, SoftmaxRowsSumToOne) {
  auto p = noisy_encoder(small_config(), 1.0);
  Rng rng(1);
  const auto e = random_prompt(rng, 40, 20);
  EncoderActivations<double> act;
  encoder_forward(p, e.token_ids, e.attn_mask, Mode::eval, nullptr, act);
  std::vector<std::size_t> pos(e.length());
  std::iota(pos.begin(), pos.end(), std::size_t{0});
  const auto L = mlm_logits(p, act.H, pos);
  ASSERT_EQ(L.cols(), 40);
  for (Eigen::Index i = 0; i < L.rows(); ++i) {
    const auto ex = (L.row(i).array() - L.row(i).maxCoeff()).exp();
    EXPECT_NEAR((ex / ex.sum()).sum(), 1.0, 1e-6);
  }
  EXPECT_THROW(mlm_logits(p, act.H, {e.length()}), Error);
}

TEST(MlmLogits, ZeroParametersGiveUniformDistribution) {
  const auto c = small_config();
  auto p = EncoderParams<double>::zeros(c);
  Rng rng(1);
  const auto e = random_prompt(rng, 40, 20);
  EncoderActivations<double> act;
  encoder_forward(p, e.token_ids, e.attn_mask, Mode::eval, nullptr, act);
  const auto L = mlm_logits(p, act.H, {0, 3, 7});
  for (Eigen::Index i = 0; i < L.rows(); ++i) {
    const auto ex = (L.row(i).array() - L.row(i).maxCoeff()).exp();
    const auto prob = ex / ex.sum();
    for (Eigen::Index j = 0; j < prob.size(); ++j) EXPECT_NEAR(prob(j), 1.0 / 40.0, 1e-12);
  }
}

TEST(MlmLogits, OutputProjectionIsTiedToEmbedding) {
  auto p = noisy_encoder(small_config(), 0.5);
  const std::vector<TokenId> ids = {Vocab::kCls, 10, 11, Vocab::kSep, Vocab::kMask, 12, 13, Vocab::kSep};
  const std::vector<std::uint8_t> mask(ids.size(), 1);
  const std::vector<std::size_t> pos = {0, 1, 2, 3, 4, 5, 6, 7};
  const TokenId t = 30;  // absent from the input, so H does not move
  EncoderActivations<double> act;
  encoder_forward(p, ids, mask, Mode::eval, nullptr, act);
  const auto base = mlm_logits(p, act.H, pos);
  const double eps = 1e-4;
  for (Eigen::Index k = 0; k < p.tok_emb.cols(); ++k) {
    auto q = p;
    q.tok_emb(t, k) += eps;
    EncoderActivations<double> act2;
    encoder_forward(q, ids, mask, Mode::eval, nullptr, act2);
    const auto moved = mlm_logits(q, act2.H, pos);
    for (Eigen::Index i = 0; i < moved.rows(); ++i) {
      EXPECT_NEAR((moved(i, t) - base(i, t)) / eps, act.H(i, k), 1e-6);
      for (Eigen::Index j = 0; j < moved.cols(); ++j)
        if (j != t) EXPECT_EQ(moved(i, j), base(i, j));
    }
  }
}

TEST(GradCheck, QuadraticProbeIsExact) {
  Mat<double> theta(4, 5);
  Rng rng(1);
  fill_normal(theta, rng, 1.0);
  Mat<double> grad = 2.0 * theta;
  std::vector<TensorRef<double>> pr, gr;
  add_ref(pr, "theta", theta);
  add_ref(gr, "grad", grad);
  auto loss = [&](bool) { return theta.squaredNorm(); };
  EXPECT_LT(tensor_error(pr[0], gr[0], loss, 1e-3), 1e-8);
}

TEST(GradCheck, EncoderBackwardMatchesFiniteDifferences) {
  const auto r = run_gradcheck("encoder");
  EXPECT_LT(r.max_rel_err, 1e-4) << r.worst;
  EXPECT_GT(r.probes, 1000u);
}

TEST(GradCheck, InjectedFaultIsDetected) {
  for (int layer : {0, 1}) {
    GradCheckOptions o;
    o.fault_layer = layer;
    const auto r = run_gradcheck("encoder", o);
    EXPECT_GT(r.max_rel_err, 1e-2);
    EXPECT_EQ(r.worst, "enc.layer" + std::to_string(layer) + ".w1");
  }
}

TEST(GradCheck, UnknownModuleIsAnError) { EXPECT_THROW(run_gradcheck("decoder"), Error); }
