/*
 * Copyright 2026 The FPI Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// fpi: synthesize data, train, score and evaluate from the command line.
// Exit codes: 0 success, 2 usage, 3 data, 4 numeric failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fpi/dataset.hpp"
#include "fpi/error.hpp"
#include "fpi/fpi_synth.hpp"
#include "fpi/metrics.hpp"
#include "fpi/run_config.hpp"
#include "fpi/scorer.hpp"
#include "fpi/testbench.hpp"
#include "fpi/trainer.hpp"
#include "fpi/volume.hpp"
#include "fpi/wrnet.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace fpi;

namespace {

// Flag values for one invocation. Only flags given on the command line end
// up in the config patch.
struct Flags {
  std::string config;
  std::uint64_t seed = 0;
  int threads = 1;
  // phantom
  int count = 0;
  std::vector<int> shape;
  std::string fractions;
  // paths
  std::string manifest, out, checkpoint, testset, scores, volumes;
  // synth / train
  std::string mode, split = "train", preset;
  int epochs = 0, batch_size = 0, input_size = 0, swa_epochs = 0;
  double lr = 0.0;
  // score
  std::string slice_agg, subject_agg;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path.string());
  f << text;
  if (!f) throw DataError("failed writing " + path.string());
}

fs::path require_path(const fs::path& p, const char* flag) {
  if (p.empty()) throw UsageError(std::string("missing required ") + flag);
  return p;
}

// Defaults, then flags, then the --config file (which wins when given).
RunConfig resolve(CLI::App* cmd, const Flags& f) {
  json patch = json::object();
  auto given = [cmd](const char* name) {
    const CLI::Option* o = cmd->get_option_no_throw(name);
    return o != nullptr && o->count() > 0;
  };
  if (given("--seed")) patch["seed"] = f.seed;
  if (given("--threads")) patch["threads"] = f.threads;
  if (given("--mode")) patch["train"]["mode"] = f.mode;
  if (given("--epochs")) patch["train"]["epochs"] = f.epochs;
  if (given("--batch-size")) {
    patch[cmd->get_name() == "score" ? "scoring" : "train"]["batch_size"] = f.batch_size;
  }
  if (given("--lr")) patch["train"]["learning_rate"] = f.lr;
  if (given("--swa-epochs")) patch["train"]["swa"]["epochs"] = f.swa_epochs;
  if (given("--preset")) patch["model"]["preset"] = f.preset;
  if (given("--input-size")) patch["model"]["input_size"] = f.input_size;
  if (given("--slice-agg")) patch["scoring"]["slice"] = f.slice_agg;
  if (given("--subject-agg")) patch["scoring"]["subject"] = f.subject_agg;
  for (const auto& [flag, key, value] :
       std::vector<std::tuple<const char*, const char*, std::string>>{
           {"--manifest", "manifest", f.manifest},
           {"--out", "out", f.out},
           {"--checkpoint", "checkpoint", f.checkpoint},
           {"--testset", "testset", f.testset},
           {"--scores", "scores", f.scores},
           {"--volumes", "volumes", f.volumes}}) {
    if (given(flag)) patch["paths"][key] = value;
  }
  if (!f.config.empty()) {
    const json file = read_json_file(f.config);
    if (!file.is_object()) throw UsageError("config file must hold a JSON object");
    patch.merge_patch(file);
  }
  return run_config_from_json(patch);
}

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(digits);
  s << v;
  return s.str();
}

SplitFractions parse_fractions(const std::string& text) {
  if (text.empty()) return {};
  std::vector<double> v;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      v.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw UsageError("bad --fractions value '" + text + "'");
    }
  }
  if (v.size() != 3) throw UsageError("--fractions needs three comma-separated values");
  return {v[0], v[1], v[2]};
}

int cmd_phantom(CLI::App* cmd, const Flags& f) {
  const RunConfig rc = resolve(cmd, f);
  if (f.count < 1) throw UsageError("--count must be at least 1");
  Shape3 shape{64, 64, 64};
  if (f.shape.size() == 1) shape = {f.shape[0], f.shape[0], f.shape[0]};
  else if (f.shape.size() == 3) shape = {f.shape[0], f.shape[1], f.shape[2]};
  else if (!f.shape.empty()) throw UsageError("--shape takes one or three sizes");
  const fs::path out = require_path(rc.paths.out, "--out");
  fs::create_directories(out);
  const SeededRng rng(rc.seed);
  std::vector<ManifestEntry> items;
  for (int n = 0; n < f.count; ++n) {
    char id[32];
    std::snprintf(id, sizeof(id), "phantom_%04d", n);
    const Volume v = generate_phantom(rng.child(static_cast<std::uint64_t>(n)), shape, id);
    save_volume(v, out / id);
    items.push_back({id, std::string(id) + ".raw", Split::kTrain});
  }
  const DatasetManifest manifest = make_manifest(items, parse_fractions(f.fractions), rc.seed);
  save_manifest(manifest, out / "manifest.json");
  load_manifest(out / "manifest.json").validate();
  std::cerr << "wrote " << f.count << " phantoms and " << (out / "manifest.json").string() << '\n';
  return 0;
}

int cmd_synth(CLI::App* cmd, const Flags& f) {
  const RunConfig rc = resolve(cmd, f);
  if (f.count < 1) throw UsageError("--count must be at least 1");
  const DatasetManifest manifest = load_manifest(require_path(rc.paths.manifest, "--manifest"));
  const std::vector<Volume> volumes = load_split(manifest, parse_split(f.split));
  if (volumes.empty()) throw DataError("split '" + f.split + "' is empty");
  const SeededRng rng(rc.seed);
  const auto pairs = pair_slices(volumes, rng.child(0).seed());
  if (pairs.empty()) throw DataError("no slice pairs in split '" + f.split + "'");
  const auto samples = make_training_batch(pairs, rng.child(1), rc.train.mode, f.count);
  const fs::path out = require_path(rc.paths.out, "--out");
  export_samples(samples, out);
  std::cerr << "wrote " << samples.size() << " " << to_string(rc.train.mode) << " samples to "
            << out.string() << '\n';
  return 0;
}

int cmd_make_testset(CLI::App* cmd, const Flags& f) {
  const RunConfig rc = resolve(cmd, f);
  const DatasetManifest manifest = load_manifest(require_path(rc.paths.manifest, "--manifest"));
  const auto sources = load_split(manifest, Split::kTestAnomalySource);
  const auto normals = load_split(manifest, Split::kTestNormal);
  if (sources.empty()) throw DataError("the test-anomaly-source split is empty");
  if (normals.empty()) throw DataError("the test-normal split is empty");
  const Testset ts = build_testset(sources, normals, SeededRng(rc.seed), rc.testbench);
  const fs::path out = require_path(rc.paths.out, "--out");
  save_testset(ts, out);
  std::map<std::string, int> counts;
  for (const TestsetEntry& e : load_testset_index(out)) ++counts[e.kind];
  for (const auto& [kind, n] : counts) std::cerr << kind << ": " << n << '\n';
  return 0;
}

void check_slices(std::span<const Volume> volumes, const ModelConfig& model) {
  for (const Volume& v : volumes) {
    if (v.height() != model.input_size || v.width() != model.input_size) {
      throw DataError("volume '" + v.id + "' has " + std::to_string(v.height()) + "x" +
                      std::to_string(v.width()) + " slices but the model input size is " +
                      std::to_string(model.input_size));
    }
  }
}

std::string log_lines(const std::vector<EpochRecord>& records) {
  std::string s;
  for (const EpochRecord& r : records) s += to_json(r).dump() + "\n";
  return s;
}

EpochCallback progress(const char* phase, int total) {
  return [phase, total](const EpochRecord& r) {
    std::cerr << phase << " epoch " << r.epoch << "/" << total << " loss " << fmt(r.mean_loss, 5)
              << " lr " << r.lr << " (" << fmt(r.wall_seconds, 1) << " s)\n";
  };
}

int cmd_train(CLI::App* cmd, const Flags& f) {
  const RunConfig rc = resolve(cmd, f);
  const DatasetManifest manifest = load_manifest(require_path(rc.paths.manifest, "--manifest"));
  const auto volumes = load_split(manifest, Split::kTrain);
  if (volumes.empty()) throw DataError("the training split is empty");
  check_slices(volumes, rc.model);
  const fs::path out = require_path(rc.paths.out, "--out");
  fs::create_directories(out);
  write_text(out / "run_config.json", to_json(rc).dump(2) + "\n");

  const WideResNet<float> net(rc.model);
  ModelParams<float> params = net.init(SeededRng(init_seed(rc.seed)));
  const auto records = train(net, params, volumes, rc.train, progress("train", rc.train.epochs));
  save_checkpoint(params, out / "model.ckpt");
  load_checkpoint(out / "model.ckpt");
  write_text(out / "train_log.jsonl", log_lines(records));
  return 0;
}

int cmd_swa(CLI::App* cmd, const Flags& f) {
  RunConfig rc = resolve(cmd, f);
  const ModelParams<float> start = load_checkpoint(require_path(rc.paths.checkpoint, "--checkpoint"));
  if (uses_softmax(rc.train.mode) != (start.config.head == Head::kSoftmax)) {
    throw UsageError("mode '" + std::string(to_string(rc.train.mode)) +
                     "' does not match the checkpoint's head");
  }
  const DatasetManifest manifest = load_manifest(require_path(rc.paths.manifest, "--manifest"));
  const auto volumes = load_split(manifest, Split::kTrain);
  if (volumes.empty()) throw DataError("the training split is empty");
  check_slices(volumes, start.config);
  const fs::path out = require_path(rc.paths.out, "--out");
  fs::create_directories(out);
  rc.model = start.config;
  write_text(out / "run_config.json", to_json(rc).dump(2) + "\n");

  const WideResNet<float> net(start.config);
  const SwaResult res = swa_finetune(net, start, volumes, rc.train,
                                     progress("swa", rc.train.swa.epochs));
  for (std::size_t n = 0; n < res.snapshots.size(); ++n) {
    char name[32];
    std::snprintf(name, sizeof(name), "snapshot_%02zu.ckpt", n + 1);
    save_checkpoint(res.snapshots[n], out / name);
  }
  save_checkpoint(res.averaged, out / "swa.ckpt");
  load_checkpoint(out / "swa.ckpt");
  write_text(out / "swa_log.jsonl", log_lines(res.epochs));
  write_text(out / "lr_trace.json", json(res.lr_trace).dump() + "\n");
  std::cerr << "averaged " << res.snapshots.size() << " snapshots\n";
  return 0;
}

// (id, path, already-normalized) for every volume to score.
std::vector<std::tuple<std::string, fs::path, bool>> score_inputs(const fs::path& dir) {
  std::vector<std::tuple<std::string, fs::path, bool>> items;
  if (fs::exists(dir / "index.json")) {
    for (const TestsetEntry& e : load_testset_index(dir)) items.emplace_back(e.id, e.volume, true);
    return items;
  }
  if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir.string());
  std::vector<fs::path> raws;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.path().extension() == ".raw") raws.push_back(entry.path());
  }
  std::sort(raws.begin(), raws.end());
  for (const fs::path& p : raws) items.emplace_back(p.stem().string(), p, false);
  if (items.empty()) throw DataError("no volumes in " + dir.string());
  return items;
}

int cmd_score(CLI::App* cmd, const Flags& f) {
  RunConfig rc = resolve(cmd, f);
  const fs::path ckpt = require_path(rc.paths.checkpoint, "--checkpoint");
  const ModelParams<float> params = load_checkpoint(ckpt);
  const WideResNet<float> net(params.config);
  const fs::path out = require_path(rc.paths.out, "--out");
  rc.scoring.model_id = ckpt.filename().string();
  for (const auto& [id, path, normalized] :
       score_inputs(require_path(rc.paths.volumes, "--volumes"))) {
    const Volume loaded = load_volume(path);
    const Volume v = normalized ? loaded : normalize(loaded);
    const VolumeScore s = score_volume(net, params, v, rc.scoring);
    save_volume_score(s, id, rc.scoring, out);
    load_score_record(out, id);
  }
  return 0;
}

int cmd_evaluate(CLI::App* cmd, const Flags& f) {
  const RunConfig rc = resolve(cmd, f);
  const fs::path out = require_path(rc.paths.out, "--out");
  fs::create_directories(out);
  const EvalReport report = evaluate_saved(require_path(rc.paths.testset, "--testset"),
                                           require_path(rc.paths.scores, "--scores"),
                                           out / "curves");
  const json j = to_json(report);
  write_text(out / "report.json", j.dump(2) + "\n");
  std::cout << "subject AP " << j["subject"]["ap"] << " AUROC " << j["subject"]["auroc"] << '\n'
            << "pixel AP " << j["pixel"]["ap"] << " AUROC " << j["pixel"]["auroc"] << " DICE "
            << j["pixel"]["dice"] << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Foreign patch interpolation: data synthesis, training and evaluation"};
  app.require_subcommand(1);
  Flags f;

  auto common = [&f](CLI::App* c) {
    c->add_option("--config", f.config, "JSON run config; its values override flags");
    c->add_option("--seed", f.seed, "Seed for all randomness");
    c->add_option("--threads", f.threads, "Worker threads (1 is bit-reproducible)");
  };

  auto* phantom = app.add_subcommand("phantom", "Generate phantom volumes and a manifest");
  common(phantom);
  phantom->add_option("--count", f.count, "Number of volumes")->required();
  phantom->add_option("--shape", f.shape, "Volume size: D or D H W (default 64)")->expected(1, 3);
  phantom->add_option("--fractions", f.fractions, "train,test-normal,test-anomaly-source");
  phantom->add_option("--out", f.out, "Output directory");

  auto* synth = app.add_subcommand("synth", "Export interpolated training samples");
  common(synth);
  synth->add_option("--manifest", f.manifest, "Dataset manifest");
  synth->add_option("--mode", f.mode, "continuous, discrete, binary or continuous-round-up");
  synth->add_option("--count", f.count, "Number of samples")->required();
  synth->add_option("--split", f.split, "Split to sample from");
  synth->add_option("--out", f.out, "Output directory");

  auto* testset = app.add_subcommand("make-testset", "Build the synthetic outlier test set");
  common(testset);
  testset->add_option("--manifest", f.manifest, "Dataset manifest");
  testset->add_option("--out", f.out, "Output directory");

  auto* trainc = app.add_subcommand("train", "Train a model");
  auto* swa = app.add_subcommand("swa", "Weight-averaging fine-tune of a checkpoint");
  for (CLI::App* c : {trainc, swa}) {
    common(c);
    c->add_option("--manifest", f.manifest, "Dataset manifest");
    c->add_option("--out", f.out, "Output directory");
    c->add_option("--mode", f.mode, "Interpolation-factor mode");
    c->add_option("--batch-size", f.batch_size, "Batch size");
  }
  trainc->add_option("--epochs", f.epochs, "Training epochs");
  trainc->add_option("--lr", f.lr, "Learning rate");
  trainc->add_option("--preset", f.preset, "Model preset: standard or desk");
  trainc->add_option("--input-size", f.input_size, "Model input size");
  swa->add_option("--checkpoint", f.checkpoint, "Starting checkpoint");
  swa->add_option("--swa-epochs", f.swa_epochs, "Averaging epochs");

  auto* score = app.add_subcommand("score", "Score volumes with a checkpoint");
  common(score);
  score->add_option("--checkpoint", f.checkpoint, "Model checkpoint");
  score->add_option("--volumes", f.volumes, "Test set or volume directory");
  score->add_option("--out", f.out, "Output directory");
  score->add_option("--slice-agg", f.slice_agg, "Slice aggregator: mean or max");
  score->add_option("--subject-agg", f.subject_agg, "Subject aggregator: max or mean");
  score->add_option("--batch-size", f.batch_size, "Slices per forward pass");

  auto* evaluate = app.add_subcommand("evaluate", "Compute metrics for scored test sets");
  common(evaluate);
  evaluate->add_option("--testset", f.testset, "Test set directory");
  evaluate->add_option("--scores", f.scores, "Score directory");
  evaluate->add_option("--out", f.out, "Report directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return UsageError("").exit_code();
  }

  try {
    CLI::App* cmd = app.get_subcommands().front();
    const std::string name = cmd->get_name();
    if (name == "phantom") return cmd_phantom(cmd, f);
    if (name == "synth") return cmd_synth(cmd, f);
    if (name == "make-testset") return cmd_make_testset(cmd, f);
    if (name == "train") return cmd_train(cmd, f);
    if (name == "swa") return cmd_swa(cmd, f);
    if (name == "score") return cmd_score(cmd, f);
    if (name == "evaluate") return cmd_evaluate(cmd, f);
    throw UsageError("unknown command " + name);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.exit_code();
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return DataError("").exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
