#include <gtest/gtest.h>

#include <cmath>

#include "levasa/vae.hpp"
#include "oracles.hpp"

using namespace levasa;

namespace {

ModelConfig small(ModelKind kind = ModelKind::levasa, AnnotationMode mode = AnnotationMode::continuous) {
  ModelConfig c;
  c.kind = kind;
  c.mode = mode;
  c.layout = {2, 2, 3};
  c.image_height = 4;
  c.image_width = 4;
  c.hidden = 6;
  c.head_hidden = 4;
  c.n_classes = 5;
  return c;
}

ImageTensor random_image(const ModelConfig& c, SeededRng& rng) {
  ImageTensor img(c.image_height, c.image_width);
  for (auto& p : img.pixels) p = rng.uniform();
  return img;
}

std::vector<AnnotatedSample> random_batch(const ModelConfig& c, std::size_t n, SeededRng& rng) {
  std::vector<AnnotatedSample> out(n);
  for (auto& s : out) {
    s.image = random_image(c, rng);
    s.va = VAPoint{rng.uniform(-1, 1), rng.uniform(-1, 1)};
    s.va_discrete = DiscreteVA{static_cast<int>(rng.uniform_index(5)) - 2, static_cast<int>(rng.uniform_index(5)) - 2};
  }
  return out;
}

}  // namespace

TEST(Encode, ZeroParamsGiveStandardPosterior) {
  const auto p = zero_params(small());
  SeededRng rng(0), img_rng(1);
  const auto code = encode(p, random_image(p.config, img_rng), rng);
  for (const auto* post : {&code.post_v, &code.post_a, &code.post_z}) {
    for (double m : post->mu) EXPECT_EQ(m, 0.0);
    for (double l : post->log_var) EXPECT_EQ(l, 0.0);
  }
  Graph g;
  EXPECT_EQ(g.value(g.kl_diag_gaussian(g.constant(Tensor::vector(code.post_z.mu)),
                                       g.constant(Tensor::vector(code.post_z.log_var))))
                .item(),
            0.0);
}

TEST(Encode, DeterministicAndChunkWidthsFollowLayout) {
  const auto p = init_params(small(), 3);
  SeededRng img_rng(2);
  const auto img = random_image(p.config, img_rng);
  SeededRng a(5), b(5);
  const auto ca = encode(p, img, a), cb = encode(p, img, b);
  EXPECT_EQ(ca.z_v, cb.z_v);
  EXPECT_EQ(ca.z_z, cb.z_z);
  EXPECT_EQ(ca.z_v.size(), 2u);
  EXPECT_EQ(ca.z_a.size(), 2u);
  EXPECT_EQ(ca.z_z.size(), 3u);
}

TEST(Encode, OnePixelChangeChangesCode) {
  const auto p = init_params(small(), 3);
  SeededRng img_rng(2);
  auto img = random_image(p.config, img_rng);
  const auto before = encode_mean(p, img);
  img.pixels[5] = 1.0 - img.pixels[5];
  EXPECT_NE(encode_mean(p, img).concat(), before.concat());
}

TEST(Encode, DimensionMismatchIsAnError) {
  const auto p = init_params(small(), 3);
  EXPECT_THROW(encode_mean(p, ImageTensor(5, 5)), ShapeError);
}

TEST(Decode, ZeroParamsGiveHalfGreyAndRangeIsOpenUnitInterval) {
  const auto z = zero_params(small());
  LatentCode code{{0.3, -0.2}, {1, 2}, {0, 0, 0}, {}, {}, {}};
  for (double px : decode(z, code).pixels) EXPECT_EQ(px, 0.5);
  const auto p = init_params(small(), 1);
  SeededRng rng(4);
  for (int t = 0; t < 20; ++t) {
    for (auto* c : {&code.z_v, &code.z_a, &code.z_z})
      for (auto& x : *c) x = 3 * rng.normal();
    for (double px : decode(p, code).pixels) {
      EXPECT_GT(px, 0.0);
      EXPECT_LT(px, 1.0);
    }
  }
}

TEST(Decode, WidthMismatchIsAnError) {
  const auto p = init_params(small(), 1);
  EXPECT_THROW(decode(p, LatentCode{{0}, {0, 0}, {0, 0, 0}, {}, {}, {}}), Error);
}

TEST(ProjectVa, ZeroHeadWeightsPredictZero) {
  auto p = init_params(small(), 2);
  for (std::size_t k = kHvW1; k <= kHaB2; ++k) p[k] = Tensor::zeros_like(p[k]);
  const auto h = project_va(p, LatentCode{{0.5, 1}, {-1, 2}, {0, 0, 0}, {}, {}, {}});
  EXPECT_EQ(h.v, std::vector<double>{0.0});
  EXPECT_EQ(h.a, std::vector<double>{0.0});
}

TEST(ProjectVa, HeadsSeeOnlyTheirChunk) {
  const auto p = init_params(small(), 2);
  const LatentCode base{{0.5, 1}, {-1, 2}, {0.1, 0.2, 0.3}, {}, {}, {}};
  const auto h = project_va(p, base);
  LatentCode z = base;
  z.z_z = {5, -5, 5};
  EXPECT_EQ(project_va(p, z).v, h.v);
  EXPECT_EQ(project_va(p, z).a, h.a);
  LatentCode v = base;
  v.z_v[0] += 1.0;
  EXPECT_NE(project_va(p, v).v, h.v);
  EXPECT_EQ(project_va(p, v).a, h.a);
}

TEST(ProjectVa, DiscreteHeadsEmitClassLogitsAndVanillaHasNoHeads) {
  const auto d = init_params(small(ModelKind::levasa, AnnotationMode::discrete), 2);
  const auto h = project_va(d, LatentCode{{0, 0}, {0, 0}, {0, 0, 0}, {}, {}, {}});
  EXPECT_EQ(h.v.size(), 5u);
  EXPECT_EQ(h.a.size(), 5u);
  const auto van = init_params(small(ModelKind::vanilla), 2);
  EXPECT_THROW(project_va(van, LatentCode{{0, 0}, {0, 0}, {0, 0, 0}, {}, {}, {}}), Error);
}

TEST(ProjectVa, ChunkIsolationByGradient) {
  const auto p = init_params(small(), 6);
  Graph g;
  auto b = bind_params(g, p, false);
  Var z = g.parameter(Tensor::matrix(1, 7, {0.1, -0.4, 0.3, 0.8, -0.2, 0.5, 0.9}));
  g.backward(g.sum(head_forward(g, p, b, Chunk::v, chunk_of(g, p.config.layout, z, Chunk::v))));
  const Tensor dz = g.grad(z);
  EXPECT_NE(dz[0], 0.0);
  for (std::size_t i = 2; i < 7; ++i) EXPECT_EQ(dz[i], 0.0) << i;
}

TEST(Params, SameBackboneForBothKinds) {
  const auto van = init_params(small(ModelKind::vanilla), 11);
  const auto lev = init_params(small(ModelKind::levasa), 11);
  EXPECT_EQ(van.backbone_count(), lev.backbone_count());
  EXPECT_EQ(van.count(), van.backbone_count());
  EXPECT_GT(lev.count(), lev.backbone_count());
  for (std::size_t k = 0; k < kBackboneParams; ++k) EXPECT_EQ(van.tensors[k], lev.tensors[k]);
  ModelConfig full;
  full.kind = ModelKind::vanilla;
  // 576-128-64 encoder and 32-128-576 decoder.
  EXPECT_EQ(init_params(full, 0).backbone_count(), 576u * 128 + 128 + 128 * 64 + 64 + 32 * 128 + 128 + 128 * 576 + 576);
}

TEST(Params, InitWithinFanInBound) {
  const auto p = init_params(small(), 8);
  for (std::size_t k = 0; k < p.tensors.size(); ++k) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(p[k - k % 2].cols()));
    for (double x : p[k].data()) EXPECT_LE(std::abs(x), bound);
  }
}

TEST(TotalLoss, ZeroWeightsLeaveReconstructionOnly) {
  const auto p = init_params(small(), 1);
  SeededRng data_rng(3), rng(4);
  const auto batch = random_batch(p.config, 5, data_rng);
  const auto lg = total_loss(p, batch, {0.0, 0.0}, rng);
  EXPECT_EQ(lg.components.total, lg.components.reconstruction);
}

TEST(TotalLoss, VanillaHasNoAlignmentTerm) {
  const auto p = init_params(small(ModelKind::vanilla), 1);
  SeededRng data_rng(3), rng(4);
  auto batch = random_batch(p.config, 5, data_rng);
  for (auto& s : batch) s.va.reset();
  const auto lg = total_loss(p, batch, {1.0, 10.0}, rng);
  EXPECT_EQ(lg.components.alignment, 0.0);
  EXPECT_EQ(lg.components.total, lg.components.reconstruction + lg.components.kl);
}

TEST(TotalLoss, MissingAnnotationNamesTheSample) {
  const auto p = init_params(small(), 1);
  SeededRng data_rng(3), rng(4);
  auto batch = random_batch(p.config, 4, data_rng);
  batch[2].va.reset();
  try {
    total_loss(p, batch, {}, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("sample 2"), std::string::npos) << e.what();
  }
}

TEST(TotalLoss, NonNegative) {
  SeededRng rng(12);
  for (auto mode : {AnnotationMode::continuous, AnnotationMode::discrete}) {
    for (int t = 0; t < 10; ++t) {
      const auto p = init_params(small(ModelKind::levasa, mode), rng.next_u64());
      const auto batch = random_batch(p.config, 3, rng);
      EXPECT_GE(total_loss(p, batch, {rng.uniform(0, 2), rng.uniform(0, 20)}, rng).components.total, 0.0);
    }
  }
}

// Two pixels, one-dimensional chunks, every layer one unit wide; Eqs. worked
// through by hand with scalar arithmetic.
TEST(TotalLoss, MatchesHandComputedTinyNet) {
  ModelConfig c;
  c.layout = {1, 1, 1};
  c.image_height = 1;
  c.image_width = 2;
  c.hidden = 1;
  c.head_hidden = 1;
  auto p = zero_params(c);
  const std::vector<std::vector<double>> values = {
      {0.5, -0.3},           {0.1},  // enc.w1 [1x2], enc.b1
      {0.4, -0.2, 0.3, 0.2, -0.5, 0.1}, {0.05, 0.0, -0.1, 0.1, 0.2, -0.3},  // enc.w2 [6x1], enc.b2
      {0.3, -0.6, 0.9},      {-0.2},  // dec.w1 [1x3], dec.b1
      {1.2, -0.7},           {0.1, 0.2},  // dec.w2 [2x1], dec.b2
      {0.8}, {0.1}, {1.5}, {-0.2},  // hv
      {-0.9}, {0.0}, {0.7}, {0.3},  // ha
  };
  for (std::size_t k = 0; k < values.size(); ++k) p[k] = Tensor(p[k].shape(), values[k]);
  AnnotatedSample s;
  s.image = ImageTensor(1, 2, std::vector<double>{0.9, 0.2});
  s.va = VAPoint{0.4, -0.6};
  const LossWeights w{0.7, 3.0};

  SeededRng eps_rng(21);
  const double e0 = eps_rng.normal(), e1 = eps_rng.normal(), e2 = eps_rng.normal();
  const double x0 = 0.9, x1 = 0.2;
  const double h = std::tanh(0.5 * x0 - 0.3 * x1 + 0.1);
  const double mu[3] = {0.4 * h + 0.05, -0.2 * h + 0.0, 0.3 * h - 0.1};
  const double lv[3] = {0.2 * h + 0.1, -0.5 * h + 0.2, 0.1 * h - 0.3};
  const double eps[3] = {e0, e1, e2};
  double z[3], kl = 0;
  for (int i = 0; i < 3; ++i) {
    z[i] = mu[i] + std::exp(0.5 * lv[i]) * eps[i];
    kl += 0.5 * (mu[i] * mu[i] + std::exp(lv[i]) - 1 - lv[i]);
  }
  const double hd = std::tanh(0.3 * z[0] - 0.6 * z[1] + 0.9 * z[2] - 0.2);
  const double y0 = 1 / (1 + std::exp(-(1.2 * hd + 0.1))), y1 = 1 / (1 + std::exp(-(-0.7 * hd + 0.2)));
  const double l_r = -(x0 * std::log(y0) + (1 - x0) * std::log(1 - y0)) - (x1 * std::log(y1) + (1 - x1) * std::log(1 - y1));
  const double rv = 1.5 * std::tanh(0.8 * z[0] + 0.1) - 0.2;
  const double ra = 0.7 * std::tanh(-0.9 * z[1]) + 0.3;
  const double l_c = (rv - 0.4) * (rv - 0.4) + (ra + 0.6) * (ra + 0.6);
  const double expected = l_r + 0.7 * kl + 3.0 * l_c;

  SeededRng rng(21);
  const auto lg = total_loss(p, std::span<const AnnotatedSample>(&s, 1), w, rng);
  EXPECT_NEAR(lg.components.reconstruction, l_r, 1e-12);
  EXPECT_NEAR(lg.components.kl, kl, 1e-12);
  EXPECT_NEAR(lg.components.alignment, l_c, 1e-12);
  EXPECT_NEAR(lg.components.total, expected, 1e-12);
}

TEST(TotalLoss, GradientMatchesFiniteDifferences) {
  for (auto mode : {AnnotationMode::continuous, AnnotationMode::discrete}) {
    const auto p0 = init_params(small(ModelKind::levasa, mode), 31);
    SeededRng data_rng(32);
    const auto batch = random_batch(p0.config, 3, data_rng);
    const LossWeights w{1.0, 10.0};
    SeededRng rng(33);
    auto lg = total_loss(p0, batch, w, rng);
    lg.graph.backward(lg.total);
    std::vector<double> analytic, flat;
    for (std::size_t k = 0; k < p0.tensors.size(); ++k) {
      const Tensor gr = lg.graph.grad(lg.params[k]);
      analytic.insert(analytic.end(), gr.data().begin(), gr.data().end());
      flat.insert(flat.end(), p0[k].data().begin(), p0[k].data().end());
    }
    auto f = [&](const std::vector<double>& x) {
      auto p = p0;
      std::size_t off = 0;
      for (auto& t : p.tensors)
        for (auto& v : t.value.data()) v = x[off++];
      SeededRng r(33);
      return total_loss(p, batch, w, r).components.total;
    };
    EXPECT_LT(oracle::max_rel_error(analytic, oracle::central_difference(f, flat)), 1e-4) << to_string(mode);
  }
}

TEST(ModelConfig, ParsingAndValidation) {
  EXPECT_EQ(parse_model_kind("vanilla"), ModelKind::vanilla);
  EXPECT_EQ(parse_annotation_mode("discrete"), AnnotationMode::discrete);
  EXPECT_THROW(parse_model_kind("beta"), Error);
  ModelConfig c;
  c.layout.d_v = 0;
  EXPECT_THROW(c.validate(), Error);
}
