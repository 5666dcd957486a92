#include "cmkt/text_branch.hpp"

#include <algorithm>
#include <filesystem>
#include <set>

#include "cmkt/errors.hpp"
#include "cmkt/io.hpp"
#include "cmkt/layers.hpp"
#include "cmkt/rng.hpp"

namespace cmkt::text {

namespace {

const std::vector<std::string> kReserved = {"<blank>", "<unk>", "<cls>", "<sep>"};

std::string layer_prefix(int layer) { return "cm." + std::to_string(layer); }

Tensor2D normal_table(int rows, int cols, std::uint64_t seed) {
  Rng rng(seed);
  Tensor2D t(static_cast<std::size_t>(rows), static_cast<std::size_t>(cols));
  for (double& v : t.data()) v = rng.normal();
  return t;
}

}  // namespace

std::vector<std::string> split_chars(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto lead = static_cast<unsigned char>(text[i]);
    std::size_t len = 1;
    if ((lead & 0xE0) == 0xC0) len = 2;
    else if ((lead & 0xF0) == 0xE0) len = 3;
    else if ((lead & 0xF8) == 0xF0) len = 4;
    if (i + len > text.size()) len = 1;
    for (std::size_t k = 1; k < len; ++k)
      if ((static_cast<unsigned char>(text[i + k]) & 0xC0) != 0x80) len = 1;
    out.emplace_back(text.substr(i, len));
    i += len;
  }
  return out;
}

Vocabulary::Vocabulary() : Vocabulary(kReserved) {}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  if (tokens_.size() < kReserved.size() || !std::equal(kReserved.begin(), kReserved.end(), tokens_.begin()))
    throw DataError("vocabulary must start with the reserved tokens <blank> <unk> <cls> <sep>");
  for (std::size_t i = 0; i < tokens_.size(); ++i)
    if (!ids_.emplace(tokens_[i], static_cast<int>(i)).second)
      throw DataError("duplicate vocabulary token '" + tokens_[i] + "'");
}

Vocabulary Vocabulary::from_transcripts(const std::vector<std::string>& transcripts) {
  std::set<std::string> chars;
  for (const auto& t : transcripts)
    for (auto& c : split_chars(t)) chars.insert(std::move(c));
  std::vector<std::string> tokens = kReserved;
  for (const auto& c : chars)
    if (std::find(kReserved.begin(), kReserved.end(), c) == kReserved.end()) tokens.push_back(c);
  return Vocabulary(std::move(tokens));
}

int Vocabulary::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw ShapeError("token id " + std::to_string(id) + " outside vocabulary");
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> TokenSequence::interior() const {
  if (ids.size() < 2) return {};
  return {ids.begin() + 1, ids.end() - 1};
}

TokenSequence tokenize(std::string_view text, const Vocabulary& vocab) {
  TokenSequence seq;
  seq.ids.push_back(kCls);
  for (const auto& c : split_chars(text)) seq.ids.push_back(vocab.id(c));
  seq.ids.push_back(kSep);
  return seq;
}

std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab) {
  std::string out;
  for (int id : ids) out += vocab.token(id);
  return out;
}

void init_parameters(const ModelConfig& cfg, int vocab_size, std::uint64_t seed, ParameterTable& t) {
  const int d_t = cfg.encoder.d_t;
  t["text.emb"] = normal_table(vocab_size, d_t, derive_seed(seed, "text.emb"));
  for (int i = 1; i <= cfg.M_t; ++i) {
    const std::string b = layer_prefix(i);
    t[b + ".w_z"] = layers::glorot_uniform(d_t, cfg.cost_width(), derive_seed(seed, b + ".w_z"));
    t[b + ".w_h"] = layers::glorot_uniform(d_t, cfg.cost_width(), derive_seed(seed, b + ".w_h"));
    layers::add_layer_norm(t, b + ".ln1", d_t);
    layers::add_linear(t, b + ".fc", d_t, d_t, seed);
    layers::add_layer_norm(t, b + ".ln2", d_t);
  }
}

Var embed_tokens(ParamBinder& p, const TokenSequence& tokens) {
  Var emb = ad::gather_rows(p("text.emb"), tokens.ids);
  return ad::add(emb, p.graph().constant(sinusoidal_positions(emb.rows(), emb.cols())));
}

CmBlockOutput cm_block(ParamBinder& p, const ModelConfig& cfg, Var Z_prev, Var H, int layer) {
  const auto d_t = static_cast<std::size_t>(cfg.encoder.d_t);
  if (Z_prev.cols() != d_t || H.cols() != d_t)
    throw ConfigError("cm_block: text width " + std::to_string(Z_prev.cols()) + " and acoustic width " +
                      std::to_string(H.cols()) + " must both equal d_t=" + std::to_string(d_t));
  if (layer < 1 || layer > cfg.M_t) throw ConfigError("cm_block: layer index out of range");
  const std::string b = layer_prefix(layer);
  CmBlockOutput out;
  out.cost = ot::cost_matrix(Z_prev, H, p(b + ".w_z"), p(b + ".w_h"), {cfg.scale_cost, cfg.cost_norm});
  out.plan = ot::sinkhorn(out.cost, {cfg.alpha, cfg.sinkhorn_K, cfg.final_row_norm});
  out.transported = ot::transport_apply(out.plan.gamma, H);
  Var z_hat = layers::layer_norm(p, b + ".ln1", ad::add(Z_prev, out.transported), cfg.layer_norm_eps);
  out.Z = layers::layer_norm(p, b + ".ln2", ad::add(z_hat, layers::linear(p, b + ".fc", z_hat)), cfg.layer_norm_eps);
  return out;
}

TextState cm_stack(ParamBinder& p, const ModelConfig& cfg, Var Z0, Var H) {
  TextState st;
  st.Z.push_back(Z0);
  for (int i = 1; i <= cfg.M_t; ++i) {
    st.layers.push_back(cm_block(p, cfg, st.Z.back(), H, i));
    st.Z.push_back(st.layers.back().Z);
  }
  return st;
}

Var alignment_loss(Var Z_final, Var Z_target) {
  if (Z_final.rows() != Z_target.rows() || Z_final.cols() != Z_target.cols())
    throw ShapeError("alignment_loss: " + Z_final.value().shape_string() + " vs " + Z_target.value().shape_string());
  const std::size_t l_t = Z_final.rows();
  if (l_t <= 2) return ad::scale(ad::sum(Z_final), 0.0);
  Var cos = ad::slice_rows(ad::cosine_rows(Z_final, Z_target), 1, l_t - 2);
  return ad::add_scalar(ad::scale(ad::sum(cos), -1.0), static_cast<double>(l_t - 2));
}

TargetProvider::TargetProvider(const TargetConfig& cfg, int vocab_size, int d_t, double layer_norm_eps)
    : cfg_(cfg), d_t_(d_t), eps_(layer_norm_eps) {
  if (cfg_.mode != TargetMode::kOracleFrozen) return;
  params_["oracle.emb"] = normal_table(vocab_size, d_t, derive_seed(cfg_.seed, "oracle.emb"));
  for (int i = 1; i <= cfg_.depth; ++i) {
    const std::string b = "oracle." + std::to_string(i);
    layers::add_attention(params_, b + ".att", d_t, cfg_.seed);
    layers::add_layer_norm(params_, b + ".ln", d_t);
  }
}

Tensor2D TargetProvider::target(const TokenSequence& tokens, const std::string& utt_id) const {
  if (cfg_.mode == TargetMode::kFile) {
    const auto path = std::filesystem::path(cfg_.dir) / (utt_id + ".feat");
    if (!std::filesystem::exists(path)) throw DataError("missing target matrix '" + path.string() + "'");
    Tensor2D m = io::read_feature_file(path);
    if (m.rows() != tokens.length() || m.cols() != static_cast<std::size_t>(d_t_))
      throw DataError("target matrix '" + path.string() + "' is " + m.shape_string() + ", expected " +
                      std::to_string(tokens.length()) + "x" + std::to_string(d_t_));
    return m;
  }
  Graph g;
  ParamBinder p(g, params_, false);
  Var z = ad::gather_rows(p("oracle.emb"), tokens.ids);
  z = ad::add(z, g.constant(sinusoidal_positions(z.rows(), z.cols())));
  for (int i = 1; i <= cfg_.depth; ++i) {
    const std::string b = "oracle." + std::to_string(i);
    z = layers::layer_norm(p, b + ".ln", ad::add(z, layers::attention(p, b + ".att", z, z, 1)), eps_);
  }
  return z.value();
}

}  // namespace cmkt::text
