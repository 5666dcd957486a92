#include <doctest.h>

#include <cmath>

#include "cmkt/autodiff.hpp"
#include "cmkt/config.hpp"
#include "cmkt/errors.hpp"
#include "cmkt/gradcheck.hpp"
#include "cmkt/io.hpp"
#include "cmkt/text_branch.hpp"
#include "test_util.hpp"

using namespace cmkt;
using cmkt::testing::random_tensor;
using cmkt::testing::TempDir;

namespace {

text::Vocabulary abc() { return text::Vocabulary::from_transcripts({"cab", "abba"}); }

ModelConfig text_config(int d_t = 8) {
  ModelConfig cfg = tiny_preset();
  cfg.encoder.d_t = d_t;
  cfg.M_t = 2;
  return cfg;
}

ParameterTable text_params(const ModelConfig& cfg, int V, std::uint64_t seed = 5) {
  ParameterTable t;
  text::init_parameters(cfg, V, seed, t);
  return t;
}

}  // namespace

TEST_CASE("vocabulary layout") {
  const auto v = abc();
  CHECK(v.size() == 7);
  CHECK(v.token(text::kBlank) == "<blank>");
  CHECK(v.token(text::kUnk) == "<unk>");
  CHECK(v.token(text::kCls) == "<cls>");
  CHECK(v.token(text::kSep) == "<sep>");
  CHECK(v.id("a") == 4);
  CHECK(v.id("b") == 5);
  CHECK(v.id("c") == 6);
  CHECK(v.id("z") == text::kUnk);
  CHECK_THROWS_AS(v.token(7), ShapeError);
  CHECK_THROWS_AS(text::Vocabulary({"a", "b"}), DataError);
  CHECK(text::Vocabulary(v.tokens()).tokens() == v.tokens());
}

TEST_CASE("utf-8 characters are single tokens") {
  const auto chars = text::split_chars("a\xC3\xA9\xE4\xB8\xAD");
  REQUIRE(chars.size() == 3);
  CHECK(chars[1] == "\xC3\xA9");
  CHECK(chars[2] == "\xE4\xB8\xAD");
  const auto v = text::Vocabulary::from_transcripts({"\xE4\xB8\xAD\xE6\x96\x87"});
  CHECK(v.size() == 6);
  CHECK(text::tokenize("\xE6\x96\x87", v).ids.size() == 3);
}

TEST_CASE("tokenize examples") {
  const auto v = abc();
  CHECK(text::tokenize("ab", v).ids == std::vector<int>{text::kCls, 4, 5, text::kSep});
  CHECK(text::tokenize("", v).ids == std::vector<int>{text::kCls, text::kSep});
  CHECK(text::tokenize("azb", v).ids == std::vector<int>{text::kCls, 4, text::kUnk, 5, text::kSep});
  CHECK(text::tokenize("cab", v).interior() == std::vector<int>{6, 4, 5});
  CHECK(text::detokenize({6, 4, 5}, v) == "cab");
}

TEST_CASE("embedding adds positions and is deterministic") {
  const ModelConfig cfg = text_config();
  const auto v = abc();
  auto params = text_params(cfg, v.size());
  const auto tokens = text::tokenize("cab", v);
  auto embed = [&](const ParameterTable& t) {
    Graph g;
    ParamBinder p(g, t, false);
    return text::embed_tokens(p, tokens).value();
  };
  const auto z = embed(params);
  CHECK(z.rows() == 5);
  CHECK(z.cols() == 8);
  CHECK(z == embed(params));
  for (std::size_t c = 0; c < 8; ++c)
    CHECK(z(0, c) == doctest::Approx(params["text.emb"](text::kCls, c) + (c % 2 == 0 ? 0.0 : 1.0)));

  text::TokenSequence bad{{text::kCls, 99, text::kSep}};
  Graph g;
  ParamBinder p(g, params, false);
  CHECK_THROWS_AS(text::embed_tokens(p, bad), ShapeError);
}

TEST_CASE("cm_block shape and errors") {
  const ModelConfig cfg = text_config();
  const auto params = text_params(cfg, 7);
  for (std::size_t l_a : {1u, 4u, 9u}) {
    Graph g;
    ParamBinder p(g, params, false);
    const auto out = text::cm_block(p, cfg, g.constant(random_tensor(3, 8, 1)), g.constant(random_tensor(l_a, 8, 2)), 1);
    CHECK(out.Z.rows() == 3);
    CHECK(out.Z.cols() == 8);
    CHECK(out.cost.cols() == l_a);
    CHECK(out.plan.gamma.rows() == 3);
  }
  Graph g;
  ParamBinder p(g, params, false);
  CHECK_THROWS_AS(text::cm_block(p, cfg, g.constant(random_tensor(3, 8, 1)), g.constant(random_tensor(4, 6, 2)), 1),
                  ConfigError);
  CHECK_THROWS_AS(text::cm_block(p, cfg, g.constant(random_tensor(3, 8, 1)), g.constant(random_tensor(4, 8, 2)), 3),
                  ConfigError);
}

TEST_CASE("cm_block with zero sweeps transports like cross-attention") {
  ModelConfig cfg = text_config();
  cfg.sinkhorn_K = 0;
  cfg.final_row_norm = true;
  cfg.cost_norm = false;
  const auto params = text_params(cfg, 7);
  const auto Z = random_tensor(3, 8, 31);
  const auto H = random_tensor(5, 8, 32);
  Graph g;
  ParamBinder p(g, params, false);
  const auto out = text::cm_block(p, cfg, g.constant(Z), g.constant(H), 1);
  Var q = ad::matmul(g.constant(Z), g.constant(params.at("cm.1.w_z")));
  Var k = ad::matmul(g.constant(H), g.constant(params.at("cm.1.w_h")));
  Var att = ad::softmax_rows(ad::scale(ad::matmul_nt(q, k), 1.0 / std::sqrt(8.0)));
  CHECK(max_abs_diff(out.transported.value(), ad::matmul(att, g.constant(H)).value()) < 1e-6);
}

TEST_CASE("cm_stack runs every layer") {
  const ModelConfig cfg = text_config();
  const auto params = text_params(cfg, 7);
  Graph g;
  ParamBinder p(g, params, false);
  const auto st = text::cm_stack(p, cfg, g.constant(random_tensor(4, 8, 1)), g.constant(random_tensor(6, 8, 2)));
  CHECK(st.Z.size() == 3);
  CHECK(st.layers.size() == 2);
  for (const auto& z : st.Z) CHECK(z.rows() == 4);
}

TEST_CASE("alignment loss examples") {
  auto loss = [](const Tensor2D& a, const Tensor2D& b) {
    Graph g;
    return text::alignment_loss(g.constant(a), g.constant(b)).scalar();
  };
  const auto Z = random_tensor(5, 4, 3);
  // Only the norm guard keeps these from being exactly zero.
  CHECK(std::abs(loss(Z, Z)) < 1e-6);

  Tensor2D neg = Z;
  for (std::size_t r = 1; r < 4; ++r)
    for (double& v : neg.row(r)) v = -v;
  CHECK(loss(neg, Z) == doctest::Approx(6.0));

  Tensor2D cls = Z;
  for (double& v : cls.row(0)) v += 3.0;
  for (double& v : cls.row(4)) v -= 2.0;
  CHECK(loss(cls, Z) == loss(Z, Z));

  CHECK(loss(random_tensor(2, 4, 1), random_tensor(2, 4, 2)) == 0.0);
  for (std::uint64_t s = 0; s < 20; ++s) {
    const double l = loss(random_tensor(6, 3, s), random_tensor(6, 3, s + 50));
    CHECK(l >= 0.0);
    CHECK(l <= 2.0 * 4 + 1e-12);
  }
  CHECK_THROWS_AS(loss(random_tensor(3, 4, 1), random_tensor(4, 4, 1)), ShapeError);
}

TEST_CASE("oracle target provider is frozen and seeded") {
  const auto v = abc();
  TargetConfig tc;
  tc.seed = 7;
  tc.depth = 2;
  const text::TargetProvider a(tc, v.size(), 8);
  const text::TargetProvider b(tc, v.size(), 8);
  const auto tokens = text::tokenize("cab", v);
  const auto za = a.target(tokens);
  CHECK(za.rows() == 5);
  CHECK(za.cols() == 8);
  CHECK(za == a.target(tokens));
  CHECK(za == b.target(tokens));
  tc.seed = 8;
  CHECK(!(text::TargetProvider(tc, v.size(), 8).target(tokens) == za));
}

TEST_CASE("file target provider") {
  TempDir dir("targets");
  const auto v = abc();
  TargetConfig tc;
  tc.mode = TargetMode::kFile;
  tc.dir = dir.path().string();
  const text::TargetProvider provider(tc, v.size(), 4);
  const auto tokens = text::tokenize("ab", v);
  const auto m = io::round_to_float(random_tensor(4, 4, 3));
  io::write_feature_file(dir / "u1.feat", m);
  CHECK(provider.target(tokens, "u1") == m);
  CHECK_THROWS_AS(provider.target(tokens, "missing"), DataError);
  io::write_feature_file(dir / "u2.feat", Tensor2D(3, 4));
  CHECK_THROWS_AS(provider.target(tokens, "u2"), DataError);
}

TEST_CASE("alignment gradient reaches the acoustic features") {
  const ModelConfig cfg = text_config();
  const auto v = abc();
  const auto params = text_params(cfg, v.size());
  const auto tokens = text::tokenize("cab", v);
  const auto target = random_tensor(5, 8, 40);
  Graph g;
  ParamBinder p(g, params);
  Var H = g.leaf(random_tensor(6, 8, 41));
  const auto st = text::cm_stack(p, cfg, text::embed_tokens(p, tokens), H);
  g.backward(text::alignment_loss(st.Z.back(), g.constant(target)));
  double norm = 0;
  for (double x : H.grad().data()) norm += x * x;
  CHECK(std::sqrt(norm) > 0.0);
}

TEST_CASE("text branch gradients") {
  ModelConfig cfg = text_config();
  const auto v = abc();
  ParameterTable params = text_params(cfg, v.size());
  params["H"] = random_tensor(4, 8, 51);
  const auto tokens = text::tokenize("a", v);
  const auto target = random_tensor(3, 8, 52);

  SUBCASE("one cm_block with three sweeps") {
    params["Z"] = random_tensor(3, 8, 53);
    auto fn = [&](ParamBinder& p) {
      const auto out = text::cm_block(p, cfg, p("Z"), p("H"), 1);
      return ad::dot(out.Z, p.graph().constant(target));
    };
    CHECK(grad_check(fn, params).max_relative_error < 1e-4);
  }
  SUBCASE("embedding through the stack into the alignment loss") {
    auto fn = [&](ParamBinder& p) {
      const auto st = text::cm_stack(p, cfg, text::embed_tokens(p, tokens), p("H"));
      return text::alignment_loss(st.Z.back(), p.graph().constant(target));
    };
    CHECK(grad_check(fn, params).max_relative_error < 1e-4);
  }
}
