#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mrw/backbone.hpp"
#include "mrw/gradcheck.hpp"
#include "support/test_util.hpp"

using namespace mrw;
using namespace mrw::testutil;

namespace {

std::vector<Tensor> collect_trainable(const std::function<void(ParamList&)>& fill) {
  ParamList params;
  fill(params);
  std::vector<Tensor> out;
  for (const ParamRef& p : params)
    if (p.trainable) {
      Tensor t = p.tensor;
      t.set_requires_grad(true);
      out.push_back(t);
    }
  return out;
}

}  // namespace

TEST_CASE("feature-map scaling halves the input when the gate is neutral") {
  Rng rng(3);
  AFMS afms(5, rng);
  for (int64_t i = 0; i < afms.gate.w.numel(); ++i) afms.gate.w.data()[i] = 0.0;
  for (int64_t i = 0; i < afms.gate.b.numel(); ++i) afms.gate.b.data()[i] = 0.0;
  const Tensor x = rand_tensor(rng, {2, 5, 4});
  const Tensor y = afms.forward(x);
  for (int64_t i = 0; i < x.numel(); ++i)
    CHECK(y.data()[i] == doctest::Approx(x.data()[i] / 2.0).epsilon(1e-12));
}

TEST_CASE("feature-map scaling adds the learned offset under a saturated gate") {
  Rng rng(5);
  AFMS afms(3, rng);
  for (int64_t i = 0; i < afms.gate.w.numel(); ++i) afms.gate.w.data()[i] = 0.0;
  for (int64_t i = 0; i < afms.gate.b.numel(); ++i) afms.gate.b.data()[i] = 25.0;
  afms.alpha.values() = {0.5, -0.25, 1.0};
  const Tensor x = rand_tensor(rng, {1, 3, 4});
  const Tensor y = afms.forward(x);
  for (int c = 0; c < 3; ++c)
    for (int t = 0; t < 4; ++t) {
      const double want = x.data()[c * 4 + t] + afms.alpha.data()[c];
      CHECK(std::fabs(y.data()[c * 4 + t] - want) < 1e-6);
    }
}

TEST_CASE("feature-map scaling gradients") {
  Rng rng(7);
  AFMS afms(4, rng);
  Tensor x = rand_tensor_off_origin(rng, {2, 4, 5});
  x.set_requires_grad(true);
  const Tensor weight = rand_tensor(rng, {2, 4, 5});
  auto tensors = collect_trainable([&](ParamList& p) { afms.collect("afms", p); });
  tensors.push_back(x);
  const auto f = [&] { return reduce_sum_all(mul(afms.forward(x), weight)); };
  const GradCheckResult r = finite_diff_check(f, tensors);
  INFO(r.worst);
  CHECK(r.pass);
}

TEST_CASE("hierarchical-residual conv passes the first group through") {
  Rng rng(9);
  Res2Dilated res2(8, 2, rng);
  CHECK(res2.group == 2);
  for (const Conv1dLayer& c : res2.convs) {
    Tensor bias = c.b;  // shared storage
    for (int64_t i = 0; i < bias.numel(); ++i) bias.data()[i] = 0.0;
  }

  Tensor x({1, 8, 6});
  for (int t = 0; t < 6; ++t) {
    x.data()[0 * 6 + t] = 0.3 * t;  // group 1
    x.data()[1 * 6 + t] = -0.1 * t;
  }
  const Tensor y = res2.forward(x);
  REQUIRE(y.same_shape(x));
  // first group copied verbatim, later groups all zero on zero input
  for (int t = 0; t < 6; ++t) {
    CHECK(y.data()[0 * 6 + t] == x.data()[0 * 6 + t]);
    CHECK(y.data()[1 * 6 + t] == x.data()[1 * 6 + t]);
  }
  for (int c = 2; c < 8; ++c)
    for (int t = 0; t < 6; ++t) CHECK(y.data()[c * 6 + t] == 0.0);

  CHECK_THROWS_AS(Res2Dilated(6, 2, rng), std::invalid_argument);
}

TEST_CASE("hierarchical-residual conv gradients") {
  Rng rng(11);
  Res2Dilated res2(8, 2, rng);
  Tensor x = rand_tensor_off_origin(rng, {2, 8, 7});
  x.set_requires_grad(true);
  const Tensor weight = rand_tensor(rng, {2, 8, 7});
  auto tensors = collect_trainable([&](ParamList& p) { res2.collect("res2", p); });
  tensors.push_back(x);
  const auto f = [&] { return reduce_sum_all(mul(res2.forward(x), weight)); };
  const GradCheckResult r = finite_diff_check(f, tensors);
  INFO(r.worst);
  CHECK(r.pass);
}

TEST_CASE("halving and duplication resamplers") {
  const Tensor x({1, 1, 4}, {1.0, 3.0, 5.0, 7.0});
  const Tensor down = downsample_half(x, nullptr);
  REQUIRE(down.shape() == std::vector<int>{1, 1, 2});
  CHECK(down.data()[0] == 2.0);
  CHECK(down.data()[1] == 6.0);

  ForwardTrace trace;
  const Tensor odd = downsample_half(Tensor({1, 1, 3}, {1.0, 3.0, 5.0}), &trace);
  REQUIRE(odd.shape() == std::vector<int>{1, 1, 2});
  CHECK(odd.data()[0] == 2.0);
  CHECK(odd.data()[1] == 5.0);  // replicated final frame
  CHECK(trace.odd_down_pad);

  Rng rng(13);
  MRABlock block(4, 2, rng);
  // duplication-initialized up-sampler repeats each frame
  Tensor pair({1, 4, 2});
  for (int c = 0; c < 4; ++c) {
    pair.data()[c * 2 + 0] = 1.0 + c;
    pair.data()[c * 2 + 1] = 2.0 + c;
  }
  const Tensor up = block.up_low.forward(pair);
  REQUIRE(up.shape() == std::vector<int>{1, 4, 4});
  for (int c = 0; c < 4; ++c) {
    CHECK(up.data()[c * 4 + 0] == 1.0 + c);
    CHECK(up.data()[c * 4 + 1] == 1.0 + c);
    CHECK(up.data()[c * 4 + 2] == 2.0 + c);
    CHECK(up.data()[c * 4 + 3] == 2.0 + c);
  }

  // a constant signal survives halving followed by duplication
  const Tensor flat = Tensor::full({1, 4, 6}, 0.75);
  const Tensor round_trip = block.up_low.forward(downsample_half(flat, nullptr));
  REQUIRE(round_trip.shape() == flat.shape());
  for (int64_t i = 0; i < flat.numel(); ++i) CHECK(round_trip.data()[i] == 0.75);
}

TEST_CASE("branch gate produces a convex combination") {
  Rng rng(17);
  const Gate gate(8, 4, rng);
  const Tensor h1 = rand_tensor(rng, {2, 8, 5});
  const Tensor h2 = rand_tensor(rng, {2, 8, 5});
  const Tensor h3 = rand_tensor(rng, {2, 8, 5});
  const Tensor alphas = gate.alphas(h1, h2, h3, Mode::kEval);
  REQUIRE(alphas.shape() == std::vector<int>{2, 3, 8});
  for (int b = 0; b < 2; ++b)
    for (int c = 0; c < 8; ++c) {
      double sum = 0.0;
      for (int k = 0; k < 3; ++k) {
        const double v = alphas.data()[(b * 3 + k) * 8 + c];
        CHECK(v > 0.0);
        CHECK(v < 1.0);
        sum += v;
      }
      CHECK(std::fabs(sum - 1.0) <= 1e-12);
    }

  // uniform weights average the branches
  const Tensor uniform = Tensor::full({2, 3, 8}, 1.0 / 3.0);
  const Tensor mixed = Gate::combine(uniform, h1, h2, h3);
  for (int64_t i = 0; i < mixed.numel(); ++i) {
    const double want = (h1.data()[i] + h2.data()[i] + h3.data()[i]) / 3.0;
    CHECK(std::fabs(mixed.data()[i] - want) <= 1e-12);
  }

  // identical branches are a fixed point for any normalized weights
  const Tensor same = Gate::combine(alphas, h1, h1, h1);
  for (int64_t i = 0; i < same.numel(); ++i)
    CHECK(std::fabs(same.data()[i] - h1.data()[i]) <= 1e-12);
}

TEST_CASE("branch gate gradients") {
  Rng rng(19);
  Gate gate(8, 4, rng);
  Tensor h1 = rand_tensor_off_origin(rng, {2, 8, 5});
  Tensor h2 = rand_tensor_off_origin(rng, {2, 8, 5});
  Tensor h3 = rand_tensor_off_origin(rng, {2, 8, 5});
  for (Tensor h : {h1, h2, h3}) h.set_requires_grad(true);
  const Tensor weight = rand_tensor(rng, {2, 8, 5});
  auto tensors = collect_trainable([&](ParamList& p) { gate.collect("gate", p); });
  tensors.push_back(h1);
  tensors.push_back(h2);
  tensors.push_back(h3);
  const auto f = [&] {
    return reduce_sum_all(mul(gate.forward(h1, h2, h3, Mode::kTrain), weight));
  };
  const GradCheckResult r = finite_diff_check(f, tensors);
  INFO(r.worst);
  CHECK(r.pass);
}

TEST_CASE("attention block with silenced branches is the identity") {
  Rng rng(23);
  MRABlock block(8, 3, rng);
  for (const AFMSRes2Block* b : {&block.low, &block.orig, &block.high}) {
    Tensor w = b->conv_out.w, bias = b->conv_out.b;  // shared storage
    for (int64_t i = 0; i < w.numel(); ++i) w.data()[i] = 0.0;
    for (int64_t i = 0; i < bias.numel(); ++i) bias.data()[i] = 0.0;
  }
  const Tensor x = rand_tensor(rng, {2, 8, 10});
  const Tensor y = block.forward(x, Mode::kEval, nullptr);
  REQUIRE(y.same_shape(x));
  for (int64_t i = 0; i < x.numel(); ++i)
    CHECK(y.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-12));
}

TEST_CASE("attention block keeps the frame count, even or odd") {
  Rng rng(29);
  const MRABlock block(8, 2, rng);
  const Tensor even = rand_tensor(rng, {1, 8, 12});
  CHECK(block.forward(even, Mode::kEval, nullptr).shape() == std::vector<int>{1, 8, 12});

  ForwardTrace trace;
  const Tensor odd = rand_tensor(rng, {1, 8, 13});
  CHECK(block.forward(odd, Mode::kEval, &trace).shape() == std::vector<int>{1, 8, 13});
  CHECK(trace.odd_down_pad);

  CHECK_THROWS_AS(block.forward(rand_tensor(rng, {1, 8, 1}), Mode::kEval, nullptr),
                  std::invalid_argument);
}

TEST_CASE("attention block gradients") {
  Rng rng(31);
  MRABlock block(8, 2, rng);
  Tensor x = rand_tensor_off_origin(rng, {2, 8, 10});
  x.set_requires_grad(true);
  const Tensor weight = rand_tensor(rng, {2, 8, 10});
  auto tensors = collect_trainable([&](ParamList& p) { block.collect("block", p); });
  tensors.push_back(x);
  const auto f = [&] {
    return reduce_sum_all(mul(block.forward(x, Mode::kTrain, nullptr), weight));
  };
  const GradCheckResult r = finite_diff_check(f, tensors, 1e-5, 1e-4, 64, 8);
  INFO(r.worst);
  CHECK(r.pass);
  CHECK(r.max_rel_err < 1e-4);
}

TEST_CASE("backbone stages follow the configured dilations") {
  Rng rng(37);
  BackboneConfig cfg;
  cfg.channels = 8;
  cfg.blocks_per_stage = 2;
  cfg.head_channels = 16;
  const Backbone bb(cfg, rng);
  REQUIRE(bb.stages.size() == 3);
  for (int s = 0; s < 3; ++s) {
    REQUIRE(bb.stages[s].size() == 2);
    for (const MRABlock& block : bb.stages[s])
      CHECK(block.orig.res2.convs[0].dilation == cfg.stage_dilations[s]);
  }

  const Tensor o2 = rand_tensor(rng, {2, 8, 10});
  ForwardTrace trace;
  const Backbone::Outputs out = bb.forward(o2, Mode::kEval, &trace);
  CHECK(out.o3.shape() == std::vector<int>{2, 8, 10});
  CHECK(out.o4.shape() == std::vector<int>{2, 8, 10});
  CHECK(out.o5.shape() == std::vector<int>{2, 8, 10});
  CHECK(out.o6.shape() == std::vector<int>{2, 24, 10});
  CHECK(out.o7.shape() == std::vector<int>{2, 16, 10});
  // head output is non-negative after the closing rectifier
  for (int64_t i = 0; i < out.o7.numel(); ++i) CHECK(out.o7.data()[i] >= 0.0);

  CHECK_THROWS_AS(bb.forward(rand_tensor(rng, {1, 9, 10}), Mode::kEval, nullptr),
                  std::invalid_argument);
}
