#include "cmkt/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>

#include <CLI11.hpp>

#include "cmkt/errors.hpp"
#include "cmkt/gradient_suite.hpp"
#include "cmkt/kernels.hpp"
#include "cmkt/trainer.hpp"

namespace cmkt::cli {

namespace fs = std::filesystem;

namespace {

struct SynthArgs {
  SynthOptions opt;
  std::string frames = "2:4";
  std::string out;
};

struct TrainArgs {
  std::string config, data, out;
  bool no_cmkt = false, no_feedback = false;
  std::optional<std::uint64_t> seed;
  long long max_steps = 0;
};

struct EvalArgs {
  std::string model, data, ref, hyp;
};

std::pair<int, int> parse_range(const std::string& s) {
  const auto colon = s.find(':');
  try {
    if (colon == std::string::npos) {
      const int v = std::stoi(s);
      return {v, v};
    }
    return {std::stoi(s.substr(0, colon)), std::stoi(s.substr(colon + 1))};
  } catch (const std::exception&) {
    throw ConfigError("bad range '" + s + "', expected MIN:MAX");
  }
}

int do_synth(SynthArgs& a, std::ostream& out) {
  std::tie(a.opt.frames_min, a.opt.frames_max) = parse_range(a.frames);
  const auto entries = synth_dataset(a.opt, a.out);
  out << "wrote " << entries.size() << " utterances to " << (fs::path(a.out) / "manifest.tsv").string() << "\n";
  return kOk;
}

int do_train(const TrainArgs& a, std::ostream& out) {
  ModelConfig cfg = load_config_file(a.config);
  if (a.no_cmkt) cfg.cmkt_enabled = false;
  if (a.no_feedback) cfg.feedback_enabled = false;
  if (a.seed) cfg.train.seed = *a.seed;
  cfg.validate();

  const auto data = load_dataset(a.data);
  Model model = Model::create(cfg, vocabulary_for(data), cfg.train.seed);
  fs::create_directories(a.out);
  std::ofstream log(fs::path(a.out) / "metrics.jsonl", std::ios::binary | std::ios::trunc);
  if (!log) throw DataError("cannot write metrics log in '" + a.out + "'");

  FitOptions fo;
  fo.max_steps = a.max_steps;
  fo.on_record = [&](const MetricRecord& r) { log << r.to_json() << "\n"; };
  fo.on_epoch = [&](const TrainState& st, const MetricRecord& r) {
    io::Checkpoint ck = model.to_checkpoint();
    ck.parameters = st.params;
    ck.adam_m = st.m;
    ck.adam_v = st.v;
    ck.step = st.step;
    ck.epoch = st.epoch;
    std::ostringstream name;
    name << "epoch_" << std::setw(3) << std::setfill('0') << st.epoch << ".ckpt";
    io::save_checkpoint(fs::path(a.out) / name.str(), ck);
    out << "epoch " << st.epoch << " step " << st.step << " total " << r.total << " train_cer "
        << r.train_cer.value_or(0.0) << "\n";
  };
  FitResult res = fit(model, data, fo);

  io::Checkpoint final_ck = model.to_checkpoint();
  final_ck.parameters = res.averaged;
  final_ck.step = res.state.step;
  final_ck.epoch = res.state.epoch;
  io::save_checkpoint(fs::path(a.out) / "model.ckpt", final_ck);
  if (res.skipped_utterances > 0)
    out << "warning: skipped " << res.skipped_utterances << " CTC-infeasible utterance passes\n";
  out << "saved " << (fs::path(a.out) / "model.ckpt").string() << "\n";
  return kOk;
}

int do_decode(const std::string& model_path, const std::string& features, std::ostream& out) {
  const Model model = Model::from_checkpoint(io::load_checkpoint(model_path));
  const Tensor2D feats = io::read_feature_file(features);
  out << text::detokenize(decode(model, feats).ids, model.vocab) << "\n";
  return kOk;
}

int do_eval(const EvalArgs& a, std::ostream& out) {
  if (!a.model.empty()) {
    const Model model = Model::from_checkpoint(io::load_checkpoint(a.model));
    const auto data = load_dataset(a.data);
    out << "cer " << std::setprecision(6) << corpus_cer(model, data) << " utterances " << data.size() << "\n";
    return kOk;
  }
  const auto ref = io::read_manifest(a.ref, false);
  const auto hyp = io::read_manifest(a.hyp, false);
  std::map<std::string, std::string> hyp_text;
  for (const auto& e : hyp) hyp_text[e.utt_id] = e.transcript;
  std::size_t edits = 0, total = 0;
  for (const auto& e : ref) {
    auto it = hyp_text.find(e.utt_id);
    if (it == hyp_text.end()) throw DataError("no hypothesis for utterance '" + e.utt_id + "'");
    const auto r = text::split_chars(e.transcript);
    const auto h = text::split_chars(it->second);
    std::map<std::string, int> ids;
    auto to_ids = [&](const std::vector<std::string>& chars) {
      std::vector<int> v;
      for (const auto& c : chars) v.push_back(ids.emplace(c, static_cast<int>(ids.size()) + 1).first->second);
      return v;
    };
    const auto ri = to_ids(r);
    edits += ctc::edit_distance(ri, to_ids(h));
    total += ri.size();
  }
  if (total == 0) throw DataError("reference manifest has no characters");
  out << "cer " << std::setprecision(6) << static_cast<double>(edits) / static_cast<double>(total) << " utterances "
      << ref.size() << "\n";
  return kOk;
}

int do_gradcheck(std::ostream& out) {
  bool ok = true;
  for (const auto& e : run_gradient_suite()) {
    out << (e.passed ? "PASS " : "FAIL ") << std::left << std::setw(24) << e.name << " max_rel_err "
        << std::scientific << std::setprecision(3) << e.report.max_relative_error << std::defaultfloat << " probes "
        << e.report.probes << " worst " << e.report.worst_parameter << "\n";
    ok = ok && e.passed;
  }
  return ok ? kOk : kSuiteFailure;
}

}  // namespace

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Cross-modal knowledge transfer for CTC speech recognition"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "OpenMP threads for batch loops (0: default)");

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  synth->add_option("--seed", sa.opt.seed, "Utterance and noise seed");
  synth->add_option("--means-seed", sa.opt.means_seed, "Seed for the per-token mean vectors");
  synth->add_option("--num-utts", sa.opt.num_utts, "Number of utterances");
  synth->add_option("--vocab-size", sa.opt.vocab_size, "Number of distinct tokens");
  synth->add_option("--feature-dim", sa.opt.feature_dim, "Feature width");
  synth->add_option("--frames-per-token", sa.frames, "Frames per token, MIN:MAX");
  synth->add_option("--noise-std", sa.opt.noise_std, "Gaussian noise standard deviation");
  synth->add_flag("--allow-repeats", sa.opt.allow_repeats, "Allow adjacent identical tokens");
  synth->add_option("--out", sa.out, "Output directory")->required();

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--config", ta.config, "key=value config file")->required();
  train->add_option("--data", ta.data, "Training manifest")->required();
  train->add_option("--out", ta.out, "Output directory")->required();
  train->add_flag("--no-cmkt", ta.no_cmkt, "Disable the text branch (adapter kept)");
  train->add_flag("--no-feedback", ta.no_feedback, "Cut the FC3 feedback into the acoustic stream");
  train->add_option("--seed", ta.seed, "Seed for initialization and data order");
  train->add_option("--max-steps", ta.max_steps, "Stop after this many optimizer steps");

  std::string model_path, features;
  auto* dec = app.add_subcommand("decode", "Greedy-decode one feature file");
  dec->add_option("--model", model_path, "Checkpoint")->required();
  dec->add_option("--features", features, "Feature file")->required();

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Corpus CER of a model, or of a hypothesis manifest");
  auto* eval_model = eval->add_option("--model", ea.model, "Checkpoint");
  auto* eval_data = eval->add_option("--data", ea.data, "Reference manifest with features");
  auto* eval_ref = eval->add_option("--ref", ea.ref, "Reference manifest");
  auto* eval_hyp = eval->add_option("--hyp", ea.hyp, "Hypothesis manifest");
  eval_model->needs(eval_data);
  eval_data->needs(eval_model);
  eval_ref->needs(eval_hyp);
  eval_hyp->needs(eval_ref);
  eval_model->excludes(eval_ref);
  eval_ref->excludes(eval_model);

  auto* gradcheck = app.add_subcommand("gradcheck", "Run the finite-difference gradient suite");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return kUsage;
  }

  try {
    if (threads > 0) kernels::set_num_threads(threads);
    if (*synth) return do_synth(sa, out);
    if (*train) return do_train(ta, out);
    if (*dec) return do_decode(model_path, features, out);
    if (*eval) {
      if (ea.model.empty() && ea.ref.empty()) {
        err << "error: eval needs --model/--data or --ref/--hyp\n";
        return kUsage;
      }
      return do_eval(ea, out);
    }
    if (*gradcheck) return do_gradcheck(out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}

}  // namespace cmkt::cli
