#include "cmkt/model.hpp"

#include <cmath>

#include "cmkt/errors.hpp"

namespace cmkt {

double LossBundle::align_sum() const {
  double s = 0.0;
  for (const auto& [_, v] : align) s += v;
  return s;
}

double LossBundle::eot_sum() const {
  double s = 0.0;
  for (const auto& [_, v] : eot) s += v;
  return s;
}

LossBundle total_loss(double ctc, std::map<int, double> align, std::map<int, double> eot, double lambda, double w) {
  LossBundle b{ctc, std::move(align), std::move(eot), 0.0};
  b.total = lambda * ctc + (1.0 - lambda) * w * (b.align_sum() + b.eot_sum());
  return b;
}

bool recomposition_holds(const LossBundle& b, double lambda, double w, double tol) {
  const double expect = lambda * b.ctc + (1.0 - lambda) * w * (b.align_sum() + b.eot_sum());
  return std::abs(expect - b.total) <= tol;
}

Model Model::create(const ModelConfig& config, text::Vocabulary vocab, std::uint64_t seed) {
  config.validate();
  Model m{config, std::move(vocab), {}};
  acoustic::init_parameters(config, m.vocab.size(), seed, m.params);
  text::init_parameters(config, m.vocab.size(), seed, m.params);
  return m;
}

Model Model::from_checkpoint(const io::Checkpoint& ckpt) {
  ModelConfig cfg = paper_preset();
  cfg.apply_kv(ckpt.config);
  cfg.validate();
  Model m{cfg, text::Vocabulary(ckpt.vocab), ckpt.parameters};
  Model reference = create(cfg, m.vocab, 0);
  for (const auto& [name, t] : reference.params) {
    auto it = m.params.find(name);
    if (it == m.params.end()) throw CheckpointError("checkpoint lacks parameter '" + name + "'");
    if (it->second.rows() != t.rows() || it->second.cols() != t.cols())
      throw CheckpointError("parameter '" + name + "' has shape " + it->second.shape_string() + ", expected " +
                            t.shape_string());
  }
  return m;
}

io::Checkpoint Model::to_checkpoint() const {
  io::Checkpoint c;
  c.config = config.to_kv();
  c.vocab = vocab.tokens();
  c.parameters = params;
  return c;
}

bool is_text_parameter(const std::string& name) {
  return name.rfind("text.", 0) == 0 || name.rfind("cm.", 0) == 0;
}

UtteranceForward forward_utterance(ParamBinder& p, const Model& model, const text::TargetProvider* targets,
                                   const Utterance& utt) {
  const ModelConfig& cfg = model.config;
  Graph& g = p.graph();
  const text::TokenSequence tokens = text::tokenize(utt.transcript, model.vocab);
  const std::vector<int> ctc_target = tokens.interior();

  std::map<int, Var> align_vars, eot_vars;
  acoustic::AttachmentHook hook;
  Var z0{}, z_target{};
  if (cfg.cmkt_enabled) {
    if (targets == nullptr) throw ConfigError("text branch enabled but no target provider given");
    z0 = text::embed_tokens(p, tokens);
    z_target = g.constant(targets->target(tokens, utt.id));
    hook = [&](int block, Var H) {
      text::TextState st = text::cm_stack(p, cfg, z0, H);
      align_vars.emplace(block, text::alignment_loss(st.Z.back(), z_target));
      Var eot{};
      if (cfg.eot_source == EotSource::kLastLayer) {
        const auto& last = st.layers.back();
        eot = ot::eot_loss(last.plan.gamma, last.cost, cfg.alpha);
      } else {
        for (const auto& layer : st.layers) {
          Var e = ot::eot_loss(layer.plan.gamma, layer.cost, cfg.alpha);
          eot = eot.graph == nullptr ? e : ad::add(eot, e);
        }
      }
      eot_vars.emplace(block, eot);
    };
  }

  UtteranceForward out;
  out.acoustic = acoustic::encode(p, cfg, g.constant(utt.features), hook);
  Var log_post = acoustic::output_log_posteriors(p, out.acoustic.final);
  Var ctc = ctc::ctc_loss(log_post, ctc_target);

  Var total = ad::scale(ctc, cfg.lambda);
  std::map<int, double> align, eot;
  if (!align_vars.empty()) {
    Var aux{};
    for (const auto& [block, a] : align_vars) {
      Var term = ad::add(a, eot_vars.at(block));
      aux = aux.graph == nullptr ? term : ad::add(aux, term);
      align.emplace(block, a.scalar());
      eot.emplace(block, eot_vars.at(block).scalar());
    }
    total = ad::add(total, ad::scale(aux, (1.0 - cfg.lambda) * cfg.w));
  }
  out.bundle = total_loss(ctc.scalar(), std::move(align), std::move(eot), cfg.lambda, cfg.w);
  out.bundle.total = total.scalar();
  out.total = total;
  return out;
}

Tensor2D infer_log_posteriors(const Model& model, const Tensor2D& features) {
  Graph g;
  ParamBinder p(g, model.params, false);
  acoustic::AcousticState st = acoustic::encode(p, model.config, g.constant(features));
  return acoustic::output_log_posteriors(p, st.final).value();
}

ctc::Hypothesis decode(const Model& model, const Tensor2D& features) {
  return ctc::greedy_decode(infer_log_posteriors(model, features));
}

bool ctc_feasible(const Model& model, const Utterance& utt) {
  std::size_t frames = 0;
  try {
    frames = acoustic::subsampled_length(utt.features.rows(), model.config.encoder.subsample_layers);
  } catch (const DataError&) {
    return false;
  }
  const auto target = text::tokenize(utt.transcript, model.vocab).interior();
  return ctc::feasible(frames, target);
}

}  // namespace cmkt
