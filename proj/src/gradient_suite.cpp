#include "cmkt/gradient_suite.hpp"

#include "cmkt/acoustic_encoder.hpp"
#include "cmkt/ctc.hpp"
#include "cmkt/model.hpp"
#include "cmkt/ot_align.hpp"
#include "cmkt/rng.hpp"
#include "cmkt/text_branch.hpp"

namespace cmkt {

namespace {

Tensor2D random_matrix(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  Tensor2D t(r, c);
  for (double& v : t.data()) v = scale * rng.normal();
  return t;
}

// Smooth scalar readout of a matrix node: sum(x .* weights) with fixed weights.
Var readout(Var x, std::uint64_t seed) {
  Rng rng(seed);
  return ad::dot(x, x.graph->constant(random_matrix(rng, x.rows(), x.cols())));
}

}  // namespace

std::vector<GradSuiteEntry> run_gradient_suite(std::uint64_t seed) {
  std::vector<GradSuiteEntry> out;
  Rng rng(seed);
  auto run = [&](std::string name, const ScalarFn& fn, const ParameterTable& params) {
    GradReport r = grad_check(fn, params, kGradStep);
    out.push_back({std::move(name), r, r.max_relative_error < kGradTolerance});
  };

  {
    ParameterTable p{{"x", random_matrix(rng, 4, 6)}, {"g", random_matrix(rng, 1, 6)}, {"b", random_matrix(rng, 1, 6)}};
    run("layer_norm", [](ParamBinder& b) { return readout(ad::layer_norm(b("x"), b("g"), b("b")), 11); }, p);
  }
  {
    ParameterTable p{{"x", random_matrix(rng, 3, 5)}};
    run("softmax_rows", [](ParamBinder& b) { return readout(ad::softmax_rows(b("x")), 12); }, p);
    run("log_softmax_cols", [](ParamBinder& b) { return readout(ad::log_softmax_cols(b("x")), 13); }, p);
  }
  {
    ParameterTable p{{"a", random_matrix(rng, 4, 3)}, {"b", random_matrix(rng, 4, 3)}};
    run("cosine_rows", [](ParamBinder& b) { return readout(ad::cosine_rows(b("a"), b("b")), 14); }, p);
  }
  {
    ModelConfig cfg = tiny_preset();
    ParameterTable p;
    acoustic::init_parameters(cfg, 6, seed, p);
    p["x"] = random_matrix(rng, 3, static_cast<std::size_t>(cfg.encoder.d_a));
    ParameterTable block;
    for (const auto& [name, t] : p)
      if (name.rfind("enc.1.", 0) == 0 || name == "x") block.emplace(name, t);
    run("encoder_block",
        [cfg](ParamBinder& b) { return readout(acoustic::encoder_block(b, cfg, b("x"), 1), 15); }, block);

    ParameterTable fuse;
    for (const auto& [name, t] : p)
      if (name.rfind("adapter.", 0) == 0) fuse.emplace(name, t);
    for (auto& [name, t] : fuse)
      if (name.find("ln") != std::string::npos) t = random_matrix(rng, t.rows(), t.cols());
    fuse["G"] = random_matrix(rng, 3, 8);
    fuse["H"] = random_matrix(rng, 3, 12);
    run("adapter_fuse", [cfg](ParamBinder& b) { return readout(acoustic::adapter_fuse(b, cfg, b("G"), b("H")), 16); },
        fuse);
  }
  {
    ModelConfig cfg = tiny_preset();
    cfg.encoder.d_t = 8;
    cfg.M_t = 1;
    cfg.sinkhorn_K = 3;
    ParameterTable p;
    text::init_parameters(cfg, 6, seed, p);
    p.erase("text.emb");
    p["Z"] = random_matrix(rng, 3, 8);
    p["H"] = random_matrix(rng, 4, 8);
    run("cm_block_sinkhorn_k3",
        [cfg](ParamBinder& b) { return readout(text::cm_block(b, cfg, b("Z"), b("H"), 1).Z, 17); }, p);
  }
  {
    ParameterTable p{{"Z", random_matrix(rng, 5, 4)}, {"T", random_matrix(rng, 5, 4)}};
    run("alignment_loss", [](ParamBinder& b) { return text::alignment_loss(b("Z"), b("T")); }, p);
  }
  {
    ParameterTable p{{"Z", random_matrix(rng, 2, 3)},
                     {"H", random_matrix(rng, 2, 3)},
                     {"W_Z", random_matrix(rng, 3, 3, 0.5)},
                     {"W_H", random_matrix(rng, 3, 3, 0.5)}};
    run("eot_loss", [](ParamBinder& b) {
      Var C = ot::cost_matrix(b("Z"), b("H"), b("W_Z"), b("W_H"));
      ot::PlanVars plan = ot::sinkhorn(C, {1.0, 3, true});
      return ot::eot_loss(plan.gamma, C, 1.0);
    }, p);
  }
  {
    ParameterTable p{{"logits", random_matrix(rng, 5, 4)}};
    const std::vector<int> target = {1, 2, 2};
    run("ctc_loss", [target](ParamBinder& b) { return ctc::ctc_loss(ad::log_softmax_rows(b("logits")), target); }, p);
  }
  {
    ModelConfig cfg = tiny_preset();
    const text::Vocabulary vocab = text::Vocabulary::from_transcripts({"ab"});
    Model model = Model::create(cfg, vocab, seed);
    text::TargetProvider targets(cfg.target, vocab.size(), cfg.encoder.d_t, cfg.layer_norm_eps);
    Utterance utt{"u0", random_matrix(rng, 7, static_cast<std::size_t>(cfg.encoder.d_in)), "ab"};
    run("end_to_end_total_loss",
        [model, targets, utt](ParamBinder& b) { return forward_utterance(b, model, &targets, utt).total; },
        model.params);
  }
  return out;
}

}  // namespace cmkt
