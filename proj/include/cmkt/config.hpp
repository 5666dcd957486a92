#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace cmkt {

struct EncoderConfig {
  int M_a = 16;             // acoustic encoder blocks
  int d_in = 83;            // input feature width
  int d_a = 256;            // acoustic width
  int d_t = 768;            // textual width
  int heads = 4;
  int ffn_dim = 2048;
  int conv_kernel = 15;
  int subsample_layers = 2;
  int subsample_channels = 256;
  int attachment_stride = 3;
  // Fused adapter output replaces G_i as the next block's input.
  bool feed_forward_fused = true;

  // Attachment blocks {s, 2s, ...} within [1, M_a].
  std::vector<int> attachment_blocks() const;
  bool is_attachment(int block) const;
};

enum class TargetMode { kOracleFrozen, kFile };
enum class EotSource { kLastLayer, kAllLayers };

struct TargetConfig {
  TargetMode mode = TargetMode::kOracleFrozen;
  std::uint64_t seed = 7;
  int depth = 2;
  std::string dir;  // file mode: <dir>/<utt_id>.feat
};

struct TrainConfig {
  int epochs = 130;
  int batch_size = 8;
  int warmup = 20000;
  double peak_lr = 1e-3;
  int avg_last = 10;
  double clip_norm = 5.0;
  std::uint64_t seed = 1;
  int threads = 0;
};

struct ModelConfig {
  EncoderConfig encoder;
  int M_t = 5;
  int d_k = 0;  // cost projection width; 0 means d_t
  int sinkhorn_K = 3;
  double alpha = 1.0;
  double lambda = 0.3;
  double w = 1.0;
  bool final_row_norm = true;
  bool scale_cost = true;
  // Standardize projected rows before the inner-product cost; keeps L_EOT bounded below.
  bool cost_norm = true;
  EotSource eot_source = EotSource::kLastLayer;
  double layer_norm_eps = 1e-5;
  TargetConfig target;
  bool cmkt_enabled = true;
  bool feedback_enabled = true;
  TrainConfig train;

  int cost_width() const { return d_k > 0 ? d_k : encoder.d_t; }

  // Throws ConfigError on any violated invariant.
  void validate() const;

  std::map<std::string, std::string> to_kv() const;
  // Applies key=value pairs on top of *this. A `preset` key is applied first.
  // Unknown keys and malformed values throw ConfigError.
  void apply_kv(const std::map<std::string, std::string>& kv);
};

// Published-scale settings.
ModelConfig paper_preset();
// Laptop-scale settings used by the overfit and ablation runs.
ModelConfig desk_preset();
// Smallest configuration, for end-to-end gradient checks.
ModelConfig tiny_preset();
ModelConfig preset_by_name(const std::string& name);

// Parses UTF-8 "key=value" lines; '#' starts a comment.
std::map<std::string, std::string> parse_kv_text(const std::string& text);
ModelConfig load_config_file(const std::string& path);

}  // namespace cmkt
