#include "cmkt/trainer.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <deque>
#include <exception>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "cmkt/errors.hpp"
#include "cmkt/kernels.hpp"
#include "cmkt/rng.hpp"

namespace cmkt {

namespace fs = std::filesystem;

double lr_schedule(std::int64_t step, std::int64_t warmup, double peak) {
  if (step < 1) throw ConfigError("lr_schedule: step must be >= 1");
  if (warmup < 1) throw ConfigError("lr_schedule: warmup must be >= 1");
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(warmup);
  return peak * std::min(s / w, std::sqrt(w / s));
}

bool adam_step(TrainState& state, const GradTable& grads, double lr, const AdamOptions& opt) {
  for (const auto& [name, g] : grads) {
    auto it = state.params.find(name);
    if (it == state.params.end()) throw ShapeError("adam_step: gradient for unknown parameter '" + name + "'");
    if (g.rows() != it->second.rows() || g.cols() != it->second.cols())
      throw ShapeError("adam_step: gradient " + g.shape_string() + " for parameter '" + name + "' of shape " +
                       it->second.shape_string());
    if (!g.all_finite()) {
      ++state.skipped_steps;
      return false;
    }
  }
  const std::int64_t t = state.step + 1;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(t));
  for (auto& [name, p] : state.params) {
    Tensor2D& m = state.m[name];
    Tensor2D& v = state.v[name];
    if (m.size() != p.size()) m = Tensor2D(p.rows(), p.cols());
    if (v.size() != p.size()) v = Tensor2D(p.rows(), p.cols());
    auto git = grads.find(name);
    const Tensor2D* g = git == grads.end() ? nullptr : &git->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g ? (*g)[i] : 0.0;
      m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * gi;
      v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * gi * gi;
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      p[i] -= lr * m_hat / (std::sqrt(v_hat) + opt.eps);
    }
  }
  state.step = t;
  return true;
}

double clip_global_norm(GradTable& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [_, g] : grads)
    for (double v : g.data()) sq += v * v;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& [_, g] : grads)
      for (double& v : g.data()) v *= s;
  }
  return norm;
}

ParameterTable average_parameters(std::span<const ParameterTable> tables) {
  if (tables.empty()) throw CheckpointError("average of zero parameter tables");
  ParameterTable out = tables[0];
  for (std::size_t k = 1; k < tables.size(); ++k) {
    if (tables[k].size() != out.size()) throw CheckpointError("checkpoints have different parameter sets");
    for (auto& [name, acc] : out) {
      auto it = tables[k].find(name);
      if (it == tables[k].end()) throw CheckpointError("parameter '" + name + "' missing from a checkpoint");
      if (it->second.rows() != acc.rows() || it->second.cols() != acc.cols())
        throw CheckpointError("parameter '" + name + "' shape differs between checkpoints");
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += it->second[i];
    }
  }
  const double n = static_cast<double>(tables.size());
  for (auto& [_, acc] : out)
    for (double& v : acc.data()) v /= n;
  return out;
}

ParameterTable average_checkpoints(const std::vector<fs::path>& paths) {
  std::vector<ParameterTable> tables;
  tables.reserve(paths.size());
  for (const auto& p : paths) tables.push_back(io::load_checkpoint(p).parameters);
  return average_parameters(tables);
}

namespace {

std::string token_char(int k) {
  if (k < 26) return std::string(1, static_cast<char>('a' + k));
  return std::string(1, static_cast<char>('A' + (k - 26)));
}

}  // namespace

Tensor2D synth_token_means(const SynthOptions& opt) {
  Rng rng(opt.means_seed);
  Tensor2D means(static_cast<std::size_t>(opt.vocab_size), static_cast<std::size_t>(opt.feature_dim));
  for (double& v : means.data()) v = rng.normal();
  return io::round_to_float(means);
}

std::vector<Utterance> synth_utterances(const SynthOptions& opt) {
  if (opt.vocab_size < 2 || opt.vocab_size > 52) throw ConfigError("synth: vocab_size must be in [2, 52]");
  if (opt.frames_min < 1 || opt.frames_max < opt.frames_min) throw ConfigError("synth: bad frames-per-token range");
  if (opt.tokens_min < 1 || opt.tokens_max < opt.tokens_min) throw ConfigError("synth: bad token count range");
  if (opt.feature_dim < 1 || opt.num_utts < 0 || !(opt.noise_std >= 0.0)) throw ConfigError("synth: bad options");
  const Tensor2D means = synth_token_means(opt);
  Rng rng(opt.seed);
  std::vector<Utterance> out;
  out.reserve(static_cast<std::size_t>(opt.num_utts));
  const auto d = static_cast<std::size_t>(opt.feature_dim);
  for (int u = 0; u < opt.num_utts; ++u) {
    const auto len = rng.uniform_int(opt.tokens_min, opt.tokens_max);
    std::vector<double> values;
    std::string transcript;
    std::size_t frames = 0;
    std::size_t prev = means.rows();
    for (std::int64_t i = 0; i < len; ++i) {
      auto tok = static_cast<std::size_t>(rng.uniform_int(0, opt.vocab_size - 1));
      if (!opt.allow_repeats && tok == prev)
        tok = (tok + 1 + static_cast<std::size_t>(rng.uniform_int(0, opt.vocab_size - 2))) % means.rows();
      prev = tok;
      transcript += token_char(static_cast<int>(tok));
      const auto reps = rng.uniform_int(opt.frames_min, opt.frames_max);
      for (std::int64_t r = 0; r < reps; ++r, ++frames)
        for (std::size_t c = 0; c < d; ++c)
          values.push_back(opt.noise_std == 0.0 ? means(tok, c) : means(tok, c) + opt.noise_std * rng.normal());
    }
    std::ostringstream id;
    id << "utt" << std::setw(4) << std::setfill('0') << u;
    out.push_back({id.str(), io::round_to_float(Tensor2D(frames, d, std::move(values))), transcript});
  }
  return out;
}

std::vector<io::ManifestEntry> synth_dataset(const SynthOptions& opt, const fs::path& dir) {
  std::vector<io::ManifestEntry> entries;
  for (const auto& utt : synth_utterances(opt)) {
    const std::string rel = "feats/" + utt.id + ".feat";
    io::write_feature_file(dir / rel, utt.features);
    entries.push_back({utt.id, rel, utt.transcript});
  }
  io::write_manifest(dir / "manifest.tsv", entries);
  return entries;
}

std::vector<Utterance> load_dataset(const fs::path& manifest) {
  std::vector<Utterance> out;
  for (auto& e : io::read_manifest(manifest, true))
    out.push_back({e.utt_id, io::read_feature_file(e.feature_path), e.transcript});
  return out;
}

text::Vocabulary vocabulary_for(const std::vector<Utterance>& utts) {
  std::vector<std::string> transcripts;
  for (const auto& u : utts) transcripts.push_back(u.transcript);
  return text::Vocabulary::from_transcripts(transcripts);
}

namespace {

struct UttResult {
  LossBundle bundle;
  GradTable grads;
};

UttResult run_utterance(const Model& model, const text::TargetProvider* targets, const Utterance& utt, double weight) {
  Graph g;
  ParamBinder p(g, model.params, true);
  UtteranceForward f = forward_utterance(p, model, targets, utt);
  Var scaled = ad::scale(f.total, weight);
  g.backward(scaled);
  return {std::move(f.bundle), p.grads()};
}

// Runs fn(i) for i in [0, n), in parallel when asked. The first exception is rethrown.
template <typename Fn>
void for_each_index(std::size_t n, Execution exec, Fn&& fn) {
  if (exec == Execution::kSerial || n < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::exception_ptr error;
  const auto count = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(dynamic, 1) num_threads(kernels::num_threads())
  for (std::ptrdiff_t i = 0; i < count; ++i) {
    try {
      fn(static_cast<std::size_t>(i));
    } catch (...) {
#pragma omp critical(cmkt_batch_error)
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
}

void add_into(std::map<int, double>& dst, const std::map<int, double>& src, double s) {
  for (const auto& [k, v] : src) dst[k] += s * v;
}

}  // namespace

BatchResult compute_batch(const Model& model, const text::TargetProvider* targets, std::span<const Utterance> batch,
                          Execution exec) {
  BatchResult out;
  std::vector<const Utterance*> usable;
  for (const auto& u : batch) {
    if (ctc_feasible(model, u)) usable.push_back(&u);
    else ++out.skipped;
  }
  out.used = static_cast<int>(usable.size());
  if (usable.empty()) return out;

  const double weight = 1.0 / static_cast<double>(usable.size());
  std::vector<UttResult> results(usable.size());
  for_each_index(usable.size(), exec,
                 [&](std::size_t i) { results[i] = run_utterance(model, targets, *usable[i], weight); });

  for (const auto& r : results) {
    out.mean.ctc += weight * r.bundle.ctc;
    add_into(out.mean.align, r.bundle.align, weight);
    add_into(out.mean.eot, r.bundle.eot, weight);
    out.mean.total += weight * r.bundle.total;
    for (const auto& [name, g] : r.grads) {
      auto [it, inserted] = out.grads.try_emplace(name, g);
      if (!inserted)
        for (std::size_t i = 0; i < g.size(); ++i) it->second[i] += g[i];
    }
  }
  return out;
}

std::string MetricRecord::to_json() const {
  nlohmann::json j = {{"step", step}, {"lr", lr}, {"ctc", ctc}, {"align", align}, {"eot", eot}, {"total", total}};
  j["train_cer"] = train_cer ? nlohmann::json(*train_cer) : nlohmann::json(nullptr);
  if (epoch) j["epoch"] = *epoch;
  return j.dump();
}

double corpus_cer(const Model& model, const std::vector<Utterance>& data, Execution exec) {
  std::vector<std::size_t> edits(data.size()), lengths(data.size());
  for_each_index(data.size(), exec, [&](std::size_t i) {
    const auto ref = text::tokenize(data[i].transcript, model.vocab).interior();
    const auto hyp = decode(model, data[i].features);
    edits[i] = ctc::edit_distance(ref, hyp.ids);
    lengths[i] = ref.size();
  });
  std::size_t e = 0, n = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    e += edits[i];
    n += lengths[i];
  }
  if (n == 0) throw DataError("corpus_cer: references are all empty");
  return static_cast<double>(e) / static_cast<double>(n);
}

FitResult fit(const Model& initial, const std::vector<Utterance>& data, const FitOptions& options) {
  if (data.empty()) throw DataError("fit: empty training set");
  const ModelConfig& cfg = initial.config;
  cfg.validate();
  if (cfg.train.threads > 0) kernels::set_num_threads(cfg.train.threads);

  std::optional<text::TargetProvider> targets;
  if (cfg.cmkt_enabled)
    targets.emplace(cfg.target, initial.vocab.size(), cfg.encoder.d_t, cfg.layer_norm_eps);

  Model model = initial;
  FitResult res;
  res.state.params = model.params;
  res.state.seed = cfg.train.seed;
  Rng order_rng(derive_seed(cfg.train.seed, "data_order"));
  std::deque<ParameterTable> snapshots;

  auto emit = [&](const MetricRecord& r) {
    res.log.push_back(r);
    if (options.on_record) options.on_record(r);
  };

  std::vector<std::size_t> order(data.size());
  bool stop = false;
  for (int epoch = 1; epoch <= cfg.train.epochs && !stop; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    order_rng.shuffle(order);
    double sum_ctc = 0, sum_align = 0, sum_eot = 0, sum_total = 0;
    int steps_in_epoch = 0;
    double last_lr = 0.0;
    for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(cfg.train.batch_size)) {
      const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(cfg.train.batch_size));
      std::vector<Utterance> batch;
      for (std::size_t k = begin; k < end; ++k) batch.push_back(data[order[k]]);

      model.params = res.state.params;
      BatchResult br = compute_batch(model, targets ? &*targets : nullptr, batch, options.exec);
      res.skipped_utterances += br.skipped;
      if (br.used == 0) {
        ++res.empty_batches;
        continue;
      }
      MetricRecord rec;
      rec.step = res.state.step + 1;
      rec.lr = lr_schedule(rec.step, cfg.train.warmup, cfg.train.peak_lr);
      rec.ctc = br.mean.ctc;
      rec.align = br.mean.align_sum();
      rec.eot = br.mean.eot_sum();
      rec.total = br.mean.total;
      rec.recomposition_ok = recomposition_holds(br.mean, cfg.lambda, cfg.w);
      if (!rec.recomposition_ok)
        throw std::logic_error("loss recomposition identity violated at step " + std::to_string(rec.step));

      clip_global_norm(br.grads, cfg.train.clip_norm);
      if (!adam_step(res.state, br.grads, rec.lr)) ++res.state.step;
      emit(rec);

      sum_ctc += rec.ctc;
      sum_align += rec.align;
      sum_eot += rec.eot;
      sum_total += rec.total;
      last_lr = rec.lr;
      ++steps_in_epoch;
      if (options.max_steps > 0 && res.state.step >= options.max_steps) {
        stop = true;
        break;
      }
    }
    res.state.epoch = epoch;
    model.params = res.state.params;
    MetricRecord summary;
    summary.step = res.state.step;
    summary.epoch = epoch;
    summary.lr = last_lr;
    if (steps_in_epoch > 0) {
      const double n = steps_in_epoch;
      summary.ctc = sum_ctc / n;
      summary.align = sum_align / n;
      summary.eot = sum_eot / n;
      summary.total = sum_total / n;
    }
    summary.train_cer = corpus_cer(model, data, options.exec);
    emit(summary);
    if (options.on_epoch) options.on_epoch(res.state, summary);

    snapshots.push_back(res.state.params);
    while (static_cast<int>(snapshots.size()) > cfg.train.avg_last) snapshots.pop_front();
  }
  std::vector<ParameterTable> snaps(snapshots.begin(), snapshots.end());
  res.averaged = average_parameters(snaps);
  return res;
}

}  // namespace cmkt
