#include "cmkt/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "cmkt/errors.hpp"

namespace cmkt {

std::vector<int> EncoderConfig::attachment_blocks() const {
  std::vector<int> out;
  if (attachment_stride < 1) return out;
  for (int b = attachment_stride; b <= M_a; b += attachment_stride) out.push_back(b);
  return out;
}

bool EncoderConfig::is_attachment(int block) const {
  return attachment_stride >= 1 && block >= 1 && block <= M_a && block % attachment_stride == 0;
}

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v <= 0) throw ConfigError(std::string(name) + " must be positive");
  };
  positive(encoder.M_a, "M_a");
  positive(encoder.d_in, "d_in");
  positive(encoder.d_a, "d_a");
  positive(encoder.d_t, "d_t");
  positive(encoder.heads, "heads");
  positive(encoder.ffn_dim, "ffn_dim");
  positive(encoder.conv_kernel, "conv_kernel");
  positive(encoder.subsample_channels, "subsample_channels");
  positive(encoder.attachment_stride, "attachment_stride");
  positive(M_t, "M_t");
  positive(train.epochs, "epochs");
  positive(train.batch_size, "batch_size");
  positive(train.warmup, "warmup");
  positive(train.avg_last, "avg_last");
  if (encoder.subsample_layers < 0) throw ConfigError("subsample_layers must be nonnegative");
  if (encoder.d_a % encoder.heads != 0) throw ConfigError("d_a must be divisible by heads");
  if (encoder.conv_kernel % 2 == 0) throw ConfigError("conv_kernel must be odd");
  if (d_k < 0) throw ConfigError("d_k must be nonnegative");
  if (sinkhorn_K < 0) throw ConfigError("sinkhorn_K must be nonnegative");
  if (!(alpha > 0.0)) throw ConfigError("alpha must be positive");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0, 1]");
  if (!(w >= 0.0)) throw ConfigError("w must be nonnegative");
  if (!(layer_norm_eps > 0.0)) throw ConfigError("layer_norm_eps must be positive");
  if (!(train.peak_lr > 0.0)) throw ConfigError("peak_lr must be positive");
  if (!(train.clip_norm >= 0.0)) throw ConfigError("clip_norm must be nonnegative");
  if (target.depth < 0) throw ConfigError("target_depth must be nonnegative");
  if (target.mode == TargetMode::kFile && target.dir.empty()) throw ConfigError("target_mode=file needs target_dir");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError("bad value '" + v + "' for key '" + key + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError("bad boolean '" + v + "' for key '" + key + "'");
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

struct Field {
  std::function<std::string(const ModelConfig&)> get;
  std::function<void(ModelConfig&, const std::string& key, const std::string&)> set;
};

#define CMKT_INT(expr)                                                                  \
  Field {                                                                               \
    [](const ModelConfig& c) { return std::to_string(c.expr); },                        \
        [](ModelConfig& c, const std::string& k, const std::string& v) {                \
          c.expr = parse_number<std::remove_reference_t<decltype(c.expr)>>(k, v);       \
        }                                                                               \
  }
#define CMKT_DBL(expr)                                                                              \
  Field {                                                                                           \
    [](const ModelConfig& c) { return fmt_double(c.expr); },                                        \
        [](ModelConfig& c, const std::string& k, const std::string& v) { c.expr = parse_number<double>(k, v); } \
  }
#define CMKT_BOOL(expr)                                                                        \
  Field {                                                                                      \
    [](const ModelConfig& c) { return std::string(c.expr ? "true" : "false"); },               \
        [](ModelConfig& c, const std::string& k, const std::string& v) { c.expr = parse_bool(k, v); } \
  }

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = {
      {"M_a", CMKT_INT(encoder.M_a)},
      {"d_in", CMKT_INT(encoder.d_in)},
      {"d_a", CMKT_INT(encoder.d_a)},
      {"d_t", CMKT_INT(encoder.d_t)},
      {"heads", CMKT_INT(encoder.heads)},
      {"ffn_dim", CMKT_INT(encoder.ffn_dim)},
      {"conv_kernel", CMKT_INT(encoder.conv_kernel)},
      {"subsample_layers", CMKT_INT(encoder.subsample_layers)},
      {"subsample_channels", CMKT_INT(encoder.subsample_channels)},
      {"attachment_stride", CMKT_INT(encoder.attachment_stride)},
      {"feed_forward_fused", CMKT_BOOL(encoder.feed_forward_fused)},
      {"M_t", CMKT_INT(M_t)},
      {"d_k", CMKT_INT(d_k)},
      {"sinkhorn_K", CMKT_INT(sinkhorn_K)},
      {"alpha", CMKT_DBL(alpha)},
      {"lambda", CMKT_DBL(lambda)},
      {"w", CMKT_DBL(w)},
      {"final_row_norm", CMKT_BOOL(final_row_norm)},
      {"scale_cost", CMKT_BOOL(scale_cost)},
      {"cost_norm", CMKT_BOOL(cost_norm)},
      {"eot_source",
       Field{[](const ModelConfig& c) { return std::string(c.eot_source == EotSource::kLastLayer ? "last" : "all"); },
             [](ModelConfig& c, const std::string& k, const std::string& v) {
               if (v == "last") c.eot_source = EotSource::kLastLayer;
               else if (v == "all") c.eot_source = EotSource::kAllLayers;
               else throw ConfigError("bad value '" + v + "' for key '" + k + "' (last|all)");
             }}},
      {"layer_norm_eps", CMKT_DBL(layer_norm_eps)},
      {"target_mode",
       Field{[](const ModelConfig& c) {
               return std::string(c.target.mode == TargetMode::kOracleFrozen ? "oracle" : "file");
             },
             [](ModelConfig& c, const std::string& k, const std::string& v) {
               if (v == "oracle") c.target.mode = TargetMode::kOracleFrozen;
               else if (v == "file") c.target.mode = TargetMode::kFile;
               else throw ConfigError("bad value '" + v + "' for key '" + k + "' (oracle|file)");
             }}},
      {"target_seed", CMKT_INT(target.seed)},
      {"target_depth", CMKT_INT(target.depth)},
      {"target_dir", Field{[](const ModelConfig& c) { return c.target.dir; },
                           [](ModelConfig& c, const std::string&, const std::string& v) { c.target.dir = v; }}},
      {"cmkt_enabled", CMKT_BOOL(cmkt_enabled)},
      {"feedback_enabled", CMKT_BOOL(feedback_enabled)},
      {"epochs", CMKT_INT(train.epochs)},
      {"batch_size", CMKT_INT(train.batch_size)},
      {"warmup", CMKT_INT(train.warmup)},
      {"peak_lr", CMKT_DBL(train.peak_lr)},
      {"avg_last", CMKT_INT(train.avg_last)},
      {"clip_norm", CMKT_DBL(train.clip_norm)},
      {"seed", CMKT_INT(train.seed)},
      {"threads", CMKT_INT(train.threads)},
  };
  return table;
}

#undef CMKT_INT
#undef CMKT_DBL
#undef CMKT_BOOL

}  // namespace

std::map<std::string, std::string> ModelConfig::to_kv() const {
  std::map<std::string, std::string> out;
  for (const auto& [key, field] : fields()) out.emplace(key, field.get(*this));
  return out;
}

void ModelConfig::apply_kv(const std::map<std::string, std::string>& kv) {
  if (auto it = kv.find("preset"); it != kv.end()) *this = preset_by_name(it->second);
  for (const auto& [key, value] : kv) {
    if (key == "preset") continue;
    auto f = fields().find(key);
    if (f == fields().end()) throw ConfigError("unknown config key '" + key + "'");
    f->second.set(*this, key, value);
  }
}

ModelConfig paper_preset() { return ModelConfig{}; }

ModelConfig desk_preset() {
  ModelConfig c;
  c.encoder.M_a = 4;
  c.encoder.d_in = 16;
  c.encoder.d_a = 32;
  c.encoder.d_t = 48;
  c.encoder.heads = 4;
  c.encoder.ffn_dim = 64;
  c.encoder.conv_kernel = 5;
  c.encoder.subsample_layers = 1;
  c.encoder.subsample_channels = 32;
  c.encoder.attachment_stride = 2;
  c.M_t = 2;
  // A narrow cost projection keeps the transport term from swamping CTC early on.
  c.d_k = 8;
  c.sinkhorn_K = 3;
  c.train.epochs = 30;
  c.train.batch_size = 4;
  c.train.warmup = 100;
  c.train.peak_lr = 1e-3;
  c.train.avg_last = 5;
  return c;
}

ModelConfig tiny_preset() {
  ModelConfig c = desk_preset();
  c.encoder.M_a = 2;
  c.encoder.d_in = 4;
  c.encoder.d_a = 8;
  c.encoder.d_t = 12;
  c.encoder.heads = 2;
  c.encoder.ffn_dim = 8;
  c.encoder.conv_kernel = 3;
  c.encoder.subsample_layers = 1;
  c.encoder.subsample_channels = 6;
  c.encoder.attachment_stride = 1;
  c.M_t = 1;
  c.d_k = 0;
  c.target.depth = 1;
  return c;
}

ModelConfig preset_by_name(const std::string& name) {
  if (name == "paper") return paper_preset();
  if (name == "desk") return desk_preset();
  if (name == "tiny") return tiny_preset();
  throw ConfigError("unknown preset '" + name + "' (paper|desk|tiny)");
}

std::map<std::string, std::string> parse_kv_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    if (!kv.emplace(key, value).second) throw ConfigError("duplicate config key '" + key + "'");
  }
  return kv;
}

ModelConfig load_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  ModelConfig cfg = paper_preset();
  cfg.apply_kv(parse_kv_text(ss.str()));
  cfg.validate();
  return cfg;
}

}  // namespace cmkt
