#include <doctest.h>

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "cmkt/errors.hpp"
#include "cmkt/io.hpp"
#include "cmkt/model.hpp"
#include "cmkt/trainer.hpp"
#include "test_util.hpp"

using namespace cmkt;
using cmkt::testing::random_tensor;
using cmkt::testing::TempDir;

namespace {

SynthOptions small_synth(std::uint64_t seed = 3) {
  SynthOptions o;
  o.seed = seed;
  o.num_utts = 6;
  o.vocab_size = 4;
  o.feature_dim = 4;
  o.frames_min = 3;
  o.frames_max = 4;
  o.tokens_min = 2;
  o.tokens_max = 4;
  return o;
}

ModelConfig small_train_config() {
  ModelConfig cfg = tiny_preset();
  cfg.train.epochs = 2;
  cfg.train.batch_size = 3;
  cfg.train.warmup = 4;
  cfg.train.avg_last = 2;
  return cfg;
}

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("total loss arithmetic") {
  CHECK(total_loss(7.5, {{1, 2.0}}, {{1, -9.0}}, 1.0, 1.0).total == doctest::Approx(7.5));
  CHECK(total_loss(123.0, {{1, 2.0}}, {{1, -1.0}}, 0.0, 1.0).total == doctest::Approx(1.0));
  CHECK(total_loss(10.0, {{1, 1.5}, {2, 1.0}}, {{1, -0.25}, {2, -0.25}}, 0.3, 1.0).total == doctest::Approx(4.4));
  CHECK(total_loss(10.0, {}, {}, 0.3, 1.0).total == doctest::Approx(3.0));
  auto b = total_loss(2.0, {{2, 0.5}}, {{2, 0.25}}, 0.4, 2.0);
  CHECK(recomposition_holds(b, 0.4, 2.0));
  b.total += 1e-3;
  CHECK(!recomposition_holds(b, 0.4, 2.0));
}

TEST_CASE("learning-rate schedule") {
  CHECK(lr_schedule(100, 100, 1e-3) == doctest::Approx(1e-3));
  CHECK(lr_schedule(50, 100, 1e-3) == doctest::Approx(5e-4));
  CHECK(lr_schedule(400, 100, 1e-3) == doctest::Approx(5e-4));
  CHECK(lr_schedule(1, 100, 1e-3) == doctest::Approx(1e-5));
  CHECK_THROWS_AS(lr_schedule(0, 100, 1e-3), ConfigError);
}

TEST_CASE("adam step") {
  TrainState st;
  st.params["p"] = Tensor2D(1, 1, 0.0);
  CHECK(adam_step(st, {{"p", Tensor2D(1, 1, 1.0)}}, 0.1));
  CHECK(st.params["p"](0, 0) == doctest::Approx(-0.1).epsilon(1e-6));
  CHECK(st.step == 1);

  TrainState zero;
  zero.params["a"] = random_tensor(2, 3, 1);
  const auto before = zero.params["a"];
  CHECK(adam_step(zero, {{"a", Tensor2D(2, 3)}}, 0.1));
  CHECK(zero.params["a"] == before);
  CHECK(adam_step(zero, {}, 0.1));
  CHECK(zero.params["a"] == before);

  TrainState bad;
  bad.params["a"] = Tensor2D(1, 2);
  set_checked_mode(false);
  GradTable nan_grads{{"a", Tensor2D(1, 2, std::vector<double>{std::nan(""), 0.0})}};
  set_checked_mode(true);
  CHECK(!adam_step(bad, nan_grads, 0.1));
  CHECK(bad.skipped_steps == 1);
  CHECK(bad.params["a"] == Tensor2D(1, 2));
  CHECK_THROWS_AS(adam_step(bad, {{"a", Tensor2D(2, 2)}}, 0.1), ShapeError);
  CHECK_THROWS_AS(adam_step(bad, {{"zzz", Tensor2D(1, 2)}}, 0.1), ShapeError);
}

TEST_CASE("adam matches a hand-rolled update over several steps") {
  TrainState st;
  st.params["p"] = Tensor2D::from_rows({{0.5, -0.2}});
  double m[2] = {0, 0}, v[2] = {0, 0}, p[2] = {0.5, -0.2};
  for (int t = 1; t <= 4; ++t) {
    const double g[2] = {0.3 * t, -1.0 / t};
    adam_step(st, {{"p", Tensor2D::from_rows({{g[0], g[1]}})}}, 0.01);
    for (int i = 0; i < 2; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.98 * v[i] + 0.02 * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(0.9, t));
      const double vh = v[i] / (1 - std::pow(0.98, t));
      p[i] -= 0.01 * mh / (std::sqrt(vh) + 1e-9);
    }
  }
  CHECK(st.params["p"](0, 0) == doctest::Approx(p[0]).epsilon(1e-12));
  CHECK(st.params["p"](0, 1) == doctest::Approx(p[1]).epsilon(1e-12));
}

TEST_CASE("global norm clipping") {
  GradTable g{{"a", Tensor2D::from_rows({{3.0}})}, {"b", Tensor2D::from_rows({{4.0}})}};
  CHECK(clip_global_norm(g, 1.0) == doctest::Approx(5.0));
  CHECK(g["a"](0, 0) == doctest::Approx(0.6));
  CHECK(g["b"](0, 0) == doctest::Approx(0.8));
  CHECK(clip_global_norm(g, 10.0) == doctest::Approx(1.0));
  CHECK(g["b"](0, 0) == doctest::Approx(0.8));
}

TEST_CASE("parameter averaging") {
  const ParameterTable one{{"w", Tensor2D(2, 2, 1.0)}};
  const ParameterTable three{{"w", Tensor2D(2, 2, 3.0)}};
  const ParameterTable both[] = {one, three};
  CHECK(average_parameters(both)["w"] == Tensor2D(2, 2, 2.0));
  const ParameterTable single[] = {one};
  CHECK(average_parameters(single)["w"] == one.at("w"));
  const ParameterTable renamed[] = {one, {{"v", Tensor2D(2, 2, 3.0)}}};
  CHECK_THROWS_AS(average_parameters(renamed), CheckpointError);
  const ParameterTable reshaped[] = {one, {{"w", Tensor2D(1, 4, 3.0)}}};
  CHECK_THROWS_AS(average_parameters(reshaped), CheckpointError);
  CHECK_THROWS_AS(average_parameters(std::span<const ParameterTable>{}), CheckpointError);
}

TEST_CASE("synthetic data") {
  SynthOptions o = small_synth();
  o.num_utts = 32;
  const auto a = synth_utterances(o);
  const auto b = synth_utterances(o);
  REQUIRE(a.size() == 32);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].id == b[i].id);
    CHECK(a[i].transcript == b[i].transcript);
    CHECK(a[i].features == b[i].features);
    const auto n = a[i].transcript.size();
    CHECK(n >= 2);
    CHECK(n <= 4);
    CHECK(a[i].features.rows() >= 3 * n);
    CHECK(a[i].features.rows() <= 4 * n);
    for (std::size_t k = 1; k < n; ++k) CHECK(a[i].transcript[k] != a[i].transcript[k - 1]);
    for (char c : a[i].transcript) CHECK((c >= 'a' && c < 'a' + 4));
  }
  o.seed = 4;
  CHECK(synth_utterances(o)[0].features != a[0].features);
}

TEST_CASE("noiseless synthetic frames equal the token means") {
  SynthOptions o = small_synth();
  o.noise_std = 0.0;
  o.frames_min = o.frames_max = 2;
  const auto means = synth_token_means(o);
  for (const auto& u : synth_utterances(o)) {
    for (std::size_t k = 0; k < u.transcript.size(); ++k) {
      const auto tok = static_cast<std::size_t>(u.transcript[k] - 'a');
      for (std::size_t r = 2 * k; r < 2 * k + 2; ++r)
        for (std::size_t c = 0; c < means.cols(); ++c) CHECK(u.features(r, c) == means(tok, c));
    }
  }
}

TEST_CASE("synthetic dataset on disk is byte-identical per seed") {
  TempDir a("synth_a"), b("synth_b");
  SynthOptions o = small_synth();
  o.num_utts = 32;
  const auto entries = synth_dataset(o, a.path());
  synth_dataset(o, b.path());
  CHECK(entries.size() == 32);
  const auto manifest = file_bytes(a / "manifest.tsv");
  CHECK(std::count(manifest.begin(), manifest.end(), '\n') == 32);
  CHECK(manifest == file_bytes(b / "manifest.tsv"));
  for (const auto& e : entries) CHECK(file_bytes(a.path() / e.feature_path) == file_bytes(b.path() / e.feature_path));
  const auto loaded = load_dataset(a / "manifest.tsv");
  const auto direct = synth_utterances(o);
  REQUIRE(loaded.size() == direct.size());
  CHECK(loaded[5].features == direct[5].features);
}

TEST_CASE("vocabulary from a dataset") {
  const auto v = vocabulary_for(synth_utterances(small_synth()));
  CHECK(v.size() == 8);
  CHECK(v.token(4) == "a");
}

TEST_CASE("lambda one: acoustic gradients equal a ctc-only model") {
  const auto data = synth_utterances(small_synth());
  ModelConfig with = small_train_config();
  with.lambda = 1.0;
  ModelConfig without = with;
  without.cmkt_enabled = false;
  const auto vocab = vocabulary_for(data);
  const Model a = Model::create(with, vocab, 11);
  const Model b = Model::create(without, vocab, 11);
  const text::TargetProvider targets(with.target, vocab.size(), with.encoder.d_t);
  const auto batch = std::span<const Utterance>(data).first(3);
  const auto ga = compute_batch(a, &targets, batch);
  const auto gb = compute_batch(b, nullptr, batch);
  CHECK(ga.mean.total == doctest::Approx(ga.mean.ctc));
  CHECK(!ga.mean.align.empty());
  CHECK(gb.mean.align.empty());
  double worst = 0;
  for (const auto& [name, g] : gb.grads) {
    if (is_text_parameter(name)) continue;
    REQUIRE(ga.grads.count(name) == 1);
    worst = std::max(worst, max_abs_diff(g, ga.grads.at(name)));
  }
  CHECK(worst < 1e-6);
  for (const auto& [name, g] : ga.grads)
    if (is_text_parameter(name))
      for (double x : g.data()) CHECK(x == 0.0);
}

TEST_CASE("batch gradients: threaded path is bit-identical to serial") {
  const auto data = synth_utterances(small_synth());
  const ModelConfig cfg = small_train_config();
  const auto vocab = vocabulary_for(data);
  const Model m = Model::create(cfg, vocab, 5);
  const text::TargetProvider targets(cfg.target, vocab.size(), cfg.encoder.d_t);
  const auto before = targets.parameters();
  const auto s = compute_batch(m, &targets, data, Execution::kSerial);
  const auto p = compute_batch(m, &targets, data, Execution::kParallel);
  CHECK(s.mean.total == p.mean.total);
  CHECK(s.used == 6);
  REQUIRE(s.grads.size() == p.grads.size());
  for (const auto& [name, g] : s.grads) CHECK(g == p.grads.at(name));
  CHECK(targets.parameters() == before);
}

TEST_CASE("infeasible utterances are skipped, not fatal") {
  auto data = synth_utterances(small_synth());
  data[0].features = Tensor2D(3, 4, 0.5);  // too short for its transcript
  const ModelConfig cfg = small_train_config();
  const Model m = Model::create(cfg, vocabulary_for(data), 5);
  const text::TargetProvider targets(cfg.target, m.vocab.size(), cfg.encoder.d_t);
  CHECK(!ctc_feasible(m, data[0]));
  const auto r = compute_batch(m, &targets, std::span<const Utterance>(data).first(3));
  CHECK(r.skipped == 1);
  CHECK(r.used == 2);
  CHECK(std::isfinite(r.mean.total));

  const auto all_bad = compute_batch(m, &targets, std::span<const Utterance>(data).first(1));
  CHECK(all_bad.used == 0);
  CHECK(all_bad.grads.empty());
}

TEST_CASE("training is reproducible and keeps the recomposition identity") {
  const auto data = synth_utterances(small_synth());
  const ModelConfig cfg = small_train_config();
  const Model m = Model::create(cfg, vocabulary_for(data), 9);
  const auto a = fit(m, data);
  const auto b = fit(m, data, {.exec = Execution::kSerial});
  REQUIRE(a.log.size() == b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    CHECK(a.log[i].to_json() == b.log[i].to_json());
    CHECK(a.log[i].recomposition_ok);
  }
  CHECK(a.state.params == b.state.params);
  CHECK(a.state.step == 4);
  CHECK(a.state.epoch == 2);

  // One epoch summary per epoch, carrying the train CER.
  int summaries = 0;
  for (const auto& r : a.log)
    if (r.epoch) {
      ++summaries;
      CHECK(r.train_cer.has_value());
    }
  CHECK(summaries == 2);

  const auto j = nlohmann::json::parse(a.log.front().to_json());
  for (const char* key : {"step", "lr", "ctc", "align", "eot", "total"}) CHECK(j.contains(key));
}

TEST_CASE("max_steps stops training early") {
  const auto data = synth_utterances(small_synth());
  const ModelConfig cfg = small_train_config();
  const Model m = Model::create(cfg, vocabulary_for(data), 9);
  const auto r = fit(m, data, {.max_steps = 3});
  CHECK(r.state.step == 3);
}

TEST_CASE("without the text branch no text parameter moves") {
  const auto data = synth_utterances(small_synth());
  ModelConfig cfg = small_train_config();
  cfg.cmkt_enabled = false;
  const Model m = Model::create(cfg, vocabulary_for(data), 9);
  const auto r = fit(m, data);
  int text_params = 0, moved = 0;
  for (const auto& [name, t] : m.params) {
    if (is_text_parameter(name)) {
      ++text_params;
      CHECK(r.state.params.at(name) == t);
    } else if (!(r.state.params.at(name) == t)) {
      ++moved;
    }
  }
  CHECK(text_params > 0);
  CHECK(moved > 0);
  for (const auto& rec : r.log) CHECK(rec.total == doctest::Approx(cfg.lambda * rec.ctc));
}

TEST_CASE("averaged model is the mean of the last epoch snapshots") {
  const auto data = synth_utterances(small_synth());
  ModelConfig cfg = small_train_config();
  cfg.train.epochs = 3;
  const Model m = Model::create(cfg, vocabulary_for(data), 9);
  std::vector<ParameterTable> snaps;
  const auto r = fit(m, data, {.on_epoch = [&](const TrainState& s, const MetricRecord&) { snaps.push_back(s.params); }});
  REQUIRE(snaps.size() == 3);
  const ParameterTable last_two[] = {snaps[1], snaps[2]};
  const auto expect = average_parameters(last_two);
  for (const auto& [name, t] : expect) CHECK(max_abs_diff(t, r.averaged.at(name)) < 1e-15);
}

TEST_CASE("corpus cer is zero for a perfect model and bounded otherwise") {
  const auto data = synth_utterances(small_synth());
  const Model m = Model::create(small_train_config(), vocabulary_for(data), 9);
  const double c = corpus_cer(m, data);
  CHECK(c >= 0.0);
  CHECK(corpus_cer(m, data, Execution::kSerial) == c);
}
