#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "cmkt/autodiff.hpp"
#include "cmkt/config.hpp"
#include "cmkt/ot_align.hpp"

namespace cmkt::text {

inline constexpr int kBlank = 0;
inline constexpr int kUnk = 1;
inline constexpr int kCls = 2;
inline constexpr int kSep = 3;

// Splits UTF-8 text into code points (each returned as its byte sequence).
// Invalid bytes are passed through one at a time.
std::vector<std::string> split_chars(std::string_view text);

// Character vocabulary with reserved ids blank=0, unk=1, cls=2, sep=3.
class Vocabulary {
 public:
  Vocabulary();
  explicit Vocabulary(std::vector<std::string> tokens);  // full id-ordered table, reserved first

  // Sorted unique characters of the transcripts after the reserved tokens.
  static Vocabulary from_transcripts(const std::vector<std::string>& transcripts);

  int id(const std::string& token) const;  // kUnk when absent
  const std::string& token(int id) const;
  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int> ids_;
};

struct TokenSequence {
  std::vector<int> ids;  // cls ... sep

  std::size_t length() const { return ids.size(); }
  // Ids between cls and sep: the CTC target.
  std::vector<int> interior() const;
};

TokenSequence tokenize(std::string_view text, const Vocabulary& vocab);
std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab);

void init_parameters(const ModelConfig& cfg, int vocab_size, std::uint64_t seed, ParameterTable& table);

// Z_0 = EMB(tokens) + PE_T. Throws ShapeError for ids outside the table.
Var embed_tokens(ParamBinder& p, const TokenSequence& tokens);

struct CmBlockOutput {
  Var Z;            // Z_i
  Var transported;  // gamma * H
  Var cost;         // C, l_t x l_a
  ot::PlanVars plan;
};

// One CM-encoder layer (1-based `layer`): OT-transport H onto Z_prev, then
// Zhat = LN(Z_prev + transported), Z = LN(Zhat + FC(Zhat)).
CmBlockOutput cm_block(ParamBinder& p, const ModelConfig& cfg, Var Z_prev, Var H, int layer);

struct TextState {
  std::vector<Var> Z;  // Z_0 .. Z_{M_t}
  std::vector<CmBlockOutput> layers;
};

TextState cm_stack(ParamBinder& p, const ModelConfig& cfg, Var Z0, Var H);

// sum over interior rows (cls and sep excluded) of 1 - cos(z_j, ztilde_j).
Var alignment_loss(Var Z_final, Var Z_target);

// Frozen stand-in for the pretrained text encoder: a seeded embedding table and
// `depth` self-attention layers that never receive gradients, or matrices read
// from <dir>/<utt_id>.feat in file mode.
class TargetProvider {
 public:
  TargetProvider(const TargetConfig& cfg, int vocab_size, int d_t, double layer_norm_eps = 1e-5);

  // Throws DataError in file mode when the matrix is missing or mis-shaped.
  Tensor2D target(const TokenSequence& tokens, const std::string& utt_id = {}) const;

  const ParameterTable& parameters() const { return params_; }
  const TargetConfig& config() const { return cfg_; }

 private:
  TargetConfig cfg_;
  int d_t_;
  double eps_;
  ParameterTable params_;
};

}  // namespace cmkt::text
