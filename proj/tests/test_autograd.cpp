#include <cmath>

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "ssmprune/autograd.hpp"
#include "ssmprune/error.hpp"
#include "ssmprune/toy.hpp"

namespace ssmprune {
namespace {

TEST(TapeTest, LinearFormGradientIsInput) {
  Tape tape;
  const Tensor x = Tensor::vector({1.5F, -2.0F, 0.25F});
  Var w = tape.leaf(Tensor::vector({0.3F, 0.1F, -0.7F}));
  tape.backward(ad::sum(ad::mul(w, tape.leaf(x))));
  EXPECT_EQ(tape.grad(w), x);
}

TEST(TapeTest, SoftplusGradientIsSigmoid) {
  Tape tape;
  Var w = tape.leaf(Tensor::vector({-1.0F, 0.0F, 2.0F}));
  tape.backward(ad::sum(ad::softplus(w)));
  const Tensor g = tape.grad(w);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(g[i], sigmoid(w.value()[i]), 1e-6);
}

TEST(TapeTest, NonScalarLossIsRejected) {
  Tape tape;
  Var w = tape.leaf(Tensor({3}));
  EXPECT_THROW(tape.backward(w), DimensionError);
}

TEST(TapeTest, LossFromAnotherTapeIsRejected) {
  Tape a, b;
  Var w = a.leaf(Tensor({1}, 2.0F));
  EXPECT_THROW(b.backward(ad::sum(w)), ContractError);
}

TEST(TapeTest, SharedInputAccumulatesBothPaths) {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({3.0F}));
  tape.backward(ad::sum(ad::mul(x, x)));
  EXPECT_FLOAT_EQ(tape.grad(x)[0], 6.0F);
}

TEST(TapeTest, UnreachedLeafHasZeroGradient) {
  Tape tape;
  Var used = tape.leaf(Tensor::vector({1.0F}));
  Var unused = tape.leaf(Tensor::vector({5.0F, 6.0F}));
  tape.backward(ad::sum(used));
  EXPECT_EQ(tape.grad(unused), Tensor({2}));
}

TEST(GradCheckTest, ThreeOpGraphMatchesFiniteDifferences) {
  Rng rng(11);
  gradcheck::Graph g;
  g.leaves = {testutil::uniform_tensor({2, 3}, rng), testutil::uniform_tensor({3, 2}, rng),
              testutil::uniform_tensor({2, 2}, rng)};
  g.steps.push_back({"matmul", [](Var v, const std::vector<Var>& l) { return ad::matmul(v, l[1]); },
                     [](const gradcheck::D& v, const std::vector<gradcheck::D>& l) {
                       return gradcheck::detail::matmul(v, l[1]);
                     }});
  g.steps.push_back({"silu", [](Var v, const std::vector<Var>&) { return ad::silu(v); },
                     [](const gradcheck::D& v, const std::vector<gradcheck::D>&) {
                       return gradcheck::detail::map(v, gradcheck::detail::silu_fn);
                     }});
  EXPECT_LT(gradcheck::graph_error(g), 1e-4);
}

TEST(GradCheckTest, RandomGraphsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 120; ++seed) {
    const auto g = gradcheck::random_graph(seed);
    EXPECT_LT(gradcheck::graph_error(g), 1e-4) << "seed " << seed << ": " << g.describe();
  }
}

TEST(GradCheckTest, TinyBlockMatchesFiniteDifferences) {
  for (const char* preset : {"tiny", "toy-gva"}) {
    const Model m = make_toy_model(preset_dims(preset), 5);
    EXPECT_LT(gradcheck::block_error(m, 9, 4), 1e-4) << preset;
  }
}

TEST(GradCheckTest, SequenceLossMatchesReferenceDifferences) {
  Model m = make_toy_model(preset_dims("tiny"), 21);
  const TokenSeq tokens{1, 5, 2, 7, 3};
  Tape tape;
  const auto vars = ad::record_params(tape, m);
  tape.backward(ad::sequence_loss(vars, m.dims, tokens));
  const Tensor g = tape.grad(vars.layers[0].in_proj);
  Tensor fd(g.shape());
  const double h = std::ldexp(1.0, -10);
  auto& w = m.params.layers[0].in_proj;
  for (std::int64_t j = 0; j < w.numel(); ++j) {
    const float orig = w.data()[j];
    w.data()[j] = static_cast<float>(orig + h);
    const double up = ref::loss(m, tokens);
    w.data()[j] = static_cast<float>(orig - h);
    const double down = ref::loss(m, tokens);
    w.data()[j] = orig;
    fd.data()[j] = static_cast<float>((up - down) / (2 * h));
  }
  EXPECT_LT(testutil::rel_error(g, fd), 1e-4);
}

}  // namespace
}  // namespace ssmprune
