/* Copyright 2026 The ctlid Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
// ctlid: generate synthetic data, train, match, detect and evaluate.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ctlid/backbone.hpp"
#include "ctlid/batching.hpp"
#include "ctlid/codec.hpp"
#include "ctlid/evaluation.hpp"
#include "ctlid/matcher.hpp"
#include "ctlid/pipeline.hpp"
#include "ctlid/synthdata.hpp"
#include "ctlid/trainer.hpp"

namespace {

using namespace ctlid;

struct Common {
  std::uint64_t seed = 0;
  int jobs = 1;
  std::string out;
};

void AddCommon(CLI::App* cmd, Common& c, bool out_required, const std::string& out_help) {
  cmd->add_option("--seed", c.seed, "Random seed")->capture_default_str();
  cmd->add_option("--jobs", c.jobs, "Worker threads (results do not depend on it)")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  auto* out = cmd->add_option("--out", c.out, out_help);
  if (out_required) out->required();
}

void CheckExists(const std::string& path, const char* what) {
  if (!fs::exists(path)) Fail(ErrorKind::kIo, std::string(what) + " not found: " + path);
}

LrSchedule ParseSchedule(const std::string& text) {
  LrSchedule s;
  std::stringstream ss(text);
  std::string stage;
  while (std::getline(ss, stage, ',')) {
    const auto colon = stage.find(':');
    if (colon == std::string::npos) Fail(ErrorKind::kValidation, "schedule stage must be EPOCHS:LR");
    try {
      s.stages.emplace_back(std::stoul(stage.substr(0, colon)), std::stod(stage.substr(colon + 1)));
    } catch (const std::exception&) {
      Fail(ErrorKind::kValidation, "cannot parse schedule stage '" + stage + "'");
    }
  }
  ValidateSchedule(s);
  return s;
}

Encoder LoadEncoderOrIdentity(const std::string& path, std::size_t dim) {
  if (path.empty()) return IdentityEncoder(dim);
  CheckExists(path, "encoder checkpoint");
  return ReadCheckpoint(path).encoder;
}

void WriteJson(const fs::path& path, const Json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  detail::WriteText(path, j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------

struct GenSynthArgs {
  Common common;
  SynthSpec spec;
  std::size_t scenes = 0;
  std::size_t scene_objects = 4;
};

void RunGenSynth(GenSynthArgs& a) {
  a.spec.seed = a.common.seed;
  const fs::path dir = a.common.out;
  fs::create_directories(dir);
  const auto ds = GenIdentificationDataset(a.spec);
  WriteDescriptorFile(ds.gallery_descriptors, dir / kGalleryFile);
  WriteDescriptorFile(ds.train_descriptors, dir / kTrainFile);
  WriteDescriptorFile(ds.test_descriptors, dir / kTestFile);
  WriteJson(dir / "gallery.json", ds.gallery_manifest);
  WriteJson(dir / "train_picks.json", ds.train_manifest);
  WriteJson(dir / "test_picks.json", ds.test_manifest);
  if (a.scenes > 0) {
    for (auto [kind, name] : {std::pair{SceneKind::kClean, "clean"}, std::pair{SceneKind::kCluttered, "cluttered"}}) {
      const std::string bin = std::string("scenes_") + name + ".bin";
      const auto set = GenDetectionScenes(a.spec, kind, a.scenes, a.scene_objects, bin);
      WriteDescriptorFile(set.descriptors, dir / bin);
      WriteJson(dir / (std::string("scenes_") + name + ".json"), set.manifest);
      WriteDetectionsFile(set.ground_truth, dir / (std::string("gt_") + name + ".json"));
    }
  }
}

struct TrainArgs {
  Common common;
  std::string gallery, picks, holdout, resume, schedule = "30:0.1,20:0.01";
  std::vector<std::size_t> dims;
  std::size_t batch_size = 64, workers = 1;
  double margin = 0.5, single_query_prob = 0.5;
  bool frozen_first_layer = false;
};

void RunTrain(TrainArgs& a) {
  CheckExists(a.gallery, "gallery manifest");
  CheckExists(a.picks, "picks manifest");
  if (!a.holdout.empty()) CheckExists(a.holdout, "holdout manifest");
  if (!a.resume.empty()) CheckExists(a.resume, "checkpoint");

  TrainConfig cfg;
  cfg.batch_size = a.batch_size;
  cfg.margin = a.margin;
  cfg.schedule = ParseSchedule(a.schedule);
  cfg.seed = a.common.seed;
  cfg.single_query_prob = a.single_query_prob;
  cfg.workers = a.workers;
  ValidateTrainConfig(cfg);

  const auto gallery = LoadManifest(a.gallery);
  const auto picks = LoadManifest(a.picks);
  const auto set = MergeForTraining(gallery, picks);
  std::optional<Manifest> holdout;
  if (!a.holdout.empty()) holdout = LoadManifest(a.holdout);

  Checkpoint ckpt;
  if (!a.resume.empty()) {
    ckpt = ReadCheckpoint(a.resume);
  } else {
    auto dims = a.dims;
    if (dims.empty()) dims = {set.descriptors.dim(), 64, 16};
    ckpt.encoder = InitEncoder(dims, a.common.seed, a.frozen_first_layer);
  }

  const fs::path dir = a.common.out;
  fs::create_directories(dir);
  std::string log;
  Train(ckpt, set, cfg, a.common.jobs, [&](const EpochStats& s, const Encoder& enc) {
    Json line;
    line["epoch"] = s.epoch;
    line["lr"] = RoundSig9(s.lr);
    line["mean_loss"] = RoundSig9(s.mean_loss);
    line["n_triplets"] = s.n_triplets;
    line["n_batches"] = s.n_batches;
    if (holdout) {
      const auto m = EvaluateRetrieval(gallery, *holdout, enc, EvalProtocol::kPostPick,
                                       GalleryMode::kCentroid, a.common.jobs);
      line["holdout_recall_at_1"] = RoundSig9(m.recall_at_1);
    }
    log += line.dump() + "\n";
    std::cerr << line.dump() << "\n";
  });
  detail::WriteText(dir / "metrics.jsonl", log);
  WriteCheckpoint(ckpt, dir / "encoder.ckpt");
}

struct MatchArgs {
  Common common;
  std::string gallery, queries, encoder, mode = "centroid";
  std::size_t k = 3;
  double theta = 0.6;
};

void RunMatch(MatchArgs& a) {
  CheckExists(a.gallery, "gallery manifest");
  CheckExists(a.queries, "query manifest");
  const auto mode = ParseGalleryMode(a.mode);
  const auto gallery = LoadManifest(a.gallery);
  const auto queries = LoadManifest(a.queries);
  Json out = Json::array();
  if (!queries.picks.empty()) {
    const auto enc = LoadEncoderOrIdentity(a.encoder, gallery.descriptors.dim());
    const auto index = GalleryIndex::Build(gallery.gallery, Encode(enc, gallery.descriptors), mode);
    const auto inputs = PickQueries(queries.picks, Encode(enc, queries.descriptors), false);
    for (const auto& r : MatchQueries(index, inputs, a.k, a.theta, a.common.jobs)) {
      Json ranked = Json::array();
      for (const auto& [id, score] : r.ranked) ranked.push_back({{"object_id", id}, {"score", RoundSig9(score)}});
      out.push_back({{"query_id", r.query_id}, {"ranked", ranked}, {"accepted", r.accepted}});
    }
  }
  WriteJson(a.common.out, out);
}

struct DetectArgs {
  Common common;
  std::string scenes, gallery, encoder, mode = "centroid";
  double theta = 0.6;
  bool pass_through = false;
};

void RunDetect(DetectArgs& a) {
  CheckExists(a.scenes, "scene manifest");
  CheckExists(a.gallery, "gallery manifest");
  const auto gallery = LoadManifest(a.gallery);
  const auto scenes = LoadSceneManifest(a.scenes);
  const auto enc = LoadEncoderOrIdentity(a.encoder, gallery.descriptors.dim());
  const auto index = GalleryIndex::Build(gallery.gallery, Encode(enc, gallery.descriptors), ParseGalleryMode(a.mode));
  if (a.theta < -1 || a.theta > 1) Fail(ErrorKind::kValidation, "theta outside [-1,1]");
  const auto run = RunDetection(scenes, index, enc, a.theta, a.pass_through, a.common.jobs);
  const fs::path out = a.common.out;
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  WriteDetectionsFile(run.detections, out);
  Json summary = {{"candidates", run.n_candidates}, {"accepted", run.n_accepted},
                  {"detections", run.detections.size()}};
  std::cout << summary.dump() << "\n";
}

struct EvalRetrievalArgs {
  Common common;
  std::string gallery, picks, encoder, mode = "centroid";
};

void RunEvalRetrieval(EvalRetrievalArgs& a) {
  CheckExists(a.gallery, "gallery manifest");
  CheckExists(a.picks, "picks manifest");
  const auto gallery = LoadManifest(a.gallery);
  const auto picks = LoadManifest(a.picks);
  const auto enc = LoadEncoderOrIdentity(a.encoder, gallery.descriptors.dim());
  const auto mode = ParseGalleryMode(a.mode);
  const auto pre = EvaluateRetrieval(gallery, picks, enc, EvalProtocol::kPrePick, mode, a.common.jobs);
  const auto post = EvaluateRetrieval(gallery, picks, enc, EvalProtocol::kPostPick, mode, a.common.jobs);
  Json report = {
      {"mode", a.mode},
      {"n_cases", post.n_cases},
      {"skipped_distractors", post.skipped_distractors},
      {"Recall@1/pre", RoundSig9(pre.recall_at_1)},
      {"Recall@1/post", RoundSig9(post.recall_at_1)},
      {"Recall@2/pre", RoundSig9(pre.recall_at_2)},
      {"Recall@2/post", RoundSig9(post.recall_at_2)},
      {"Recall@3/pre", RoundSig9(pre.recall_at_3)},
      {"Recall@3/post", RoundSig9(post.recall_at_3)},
  };
  WriteJson(a.common.out, report);
}

struct EvalDetectionArgs {
  Common common;
  std::string detections, ground_truth, iou = "mask";
};

void RunEvalDetection(EvalDetectionArgs& a) {
  CheckExists(a.detections, "detections file");
  CheckExists(a.ground_truth, "ground-truth file");
  IouKind kind;
  if (a.iou == "mask") {
    kind = IouKind::kMask;
  } else if (a.iou == "box") {
    kind = IouKind::kBox;
  } else {
    Fail(ErrorKind::kValidation, "unknown IoU kind '" + a.iou + "'");
  }
  const auto metrics = CocoEval(ReadDetectionsFile(a.detections), ReadDetectionsFile(a.ground_truth), kind);
  Json report = DetMetricsToJson(metrics);
  report["iou"] = a.iou;
  WriteJson(a.common.out, report);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Centroid-triplet-loss object identification toolkit"};
  app.require_subcommand(1);
  app.set_config("--config", "", "TOML/INI config file; command-line flags take precedence");

  GenSynthArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-synth", "Generate a synthetic identification dataset and scenes");
  AddCommon(gen_cmd, gen.common, true, "Output directory");
  gen_cmd->add_option("--objects", gen.spec.n_objects)->capture_default_str();
  gen_cmd->add_option("--faces", gen.spec.n_faces)->capture_default_str();
  gen_cmd->add_option("--dim", gen.spec.dim)->capture_default_str();
  gen_cmd->add_option("--gallery-views", gen.spec.gallery_views)->capture_default_str();
  gen_cmd->add_option("--query-views", gen.spec.query_views)->capture_default_str();
  gen_cmd->add_option("--noise", gen.spec.noise)->capture_default_str();
  gen_cmd->add_option("--distractor-fraction", gen.spec.distractor_fraction)->capture_default_str();
  gen_cmd->add_option("--train-picks", gen.spec.train_picks_per_object, "Training picks per object")->capture_default_str();
  gen_cmd->add_option("--test-picks", gen.spec.test_picks_per_object, "Held-out picks per object")->capture_default_str();
  gen_cmd->add_option("--nuisance-dim", gen.spec.nuisance_dim)->capture_default_str();
  gen_cmd->add_option("--nuisance-scale", gen.spec.nuisance_scale)->capture_default_str();
  gen_cmd->add_option("--scenes", gen.scenes, "Detection scenes per kind (0 = none)")->capture_default_str();
  gen_cmd->add_option("--scene-objects", gen.scene_objects)->capture_default_str();
  gen_cmd->callback([&] { RunGenSynth(gen); });

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train an encoder with the centroid triplet loss");
  AddCommon(train_cmd, train.common, true, "Output directory (encoder.ckpt, metrics.jsonl)");
  train_cmd->add_option("--gallery", train.gallery)->required();
  train_cmd->add_option("--picks", train.picks)->required();
  train_cmd->add_option("--holdout", train.holdout, "Held-out picks for per-epoch Recall@1");
  train_cmd->add_option("--resume", train.resume, "Continue from a checkpoint");
  train_cmd->add_option("--dims", train.dims, "Layer dims, e.g. 32,64,16")->delimiter(',');
  train_cmd->add_option("--schedule", train.schedule, "EPOCHS:LR stages")->capture_default_str();
  train_cmd->add_option("--batch-size", train.batch_size)->capture_default_str();
  train_cmd->add_option("--workers", train.workers)->capture_default_str();
  train_cmd->add_option("--margin", train.margin)->capture_default_str();
  train_cmd->add_option("--single-query-prob", train.single_query_prob)->capture_default_str();
  train_cmd->add_flag("--frozen-first-layer", train.frozen_first_layer);
  train_cmd->callback([&] { RunTrain(train); });

  MatchArgs match;
  auto* match_cmd = app.add_subcommand("match", "Match query objects against a gallery");
  AddCommon(match_cmd, match.common, true, "Results JSON");
  match_cmd->add_option("--gallery", match.gallery)->required();
  match_cmd->add_option("--queries", match.queries)->required();
  match_cmd->add_option("--encoder", match.encoder, "Checkpoint (identity if omitted)");
  match_cmd->add_option("--mode", match.mode)->check(CLI::IsMember({"centroid", "instance"}))->capture_default_str();
  match_cmd->add_option("--k", match.k)->check(CLI::PositiveNumber)->capture_default_str();
  match_cmd->add_option("--theta", match.theta)->check(CLI::Range(-1.0, 1.0))->capture_default_str();
  match_cmd->callback([&] { RunMatch(match); });

  DetectArgs detect;
  auto* detect_cmd = app.add_subcommand("detect", "Identify and filter candidate segments");
  AddCommon(detect_cmd, detect.common, true, "Detections JSON");
  detect_cmd->add_option("--scenes", detect.scenes)->required();
  detect_cmd->add_option("--gallery", detect.gallery)->required();
  detect_cmd->add_option("--encoder", detect.encoder, "Checkpoint (identity if omitted)");
  detect_cmd->add_option("--mode", detect.mode)->check(CLI::IsMember({"centroid", "instance"}))->capture_default_str();
  detect_cmd->add_option("--theta", detect.theta)->check(CLI::Range(-1.0, 1.0))->capture_default_str();
  detect_cmd->add_flag("--pass-through", detect.pass_through, "Skip overlap resolution");
  detect_cmd->callback([&] { RunDetect(detect); });

  EvalRetrievalArgs evr;
  auto* evr_cmd = app.add_subcommand("eval-retrieval", "Recall@1,2,3 for pre- and post-pick queries");
  AddCommon(evr_cmd, evr.common, true, "Metrics JSON");
  evr_cmd->add_option("--gallery", evr.gallery)->required();
  evr_cmd->add_option("--picks", evr.picks)->required();
  evr_cmd->add_option("--encoder", evr.encoder, "Checkpoint (identity if omitted)");
  evr_cmd->add_option("--mode", evr.mode)->check(CLI::IsMember({"centroid", "instance"}))->capture_default_str();
  evr_cmd->callback([&] { RunEvalRetrieval(evr); });

  EvalDetectionArgs evd;
  auto* evd_cmd = app.add_subcommand("eval-detection", "COCO-style AP/AR for detections");
  AddCommon(evd_cmd, evd.common, true, "Metrics JSON");
  evd_cmd->add_option("--detections", evd.detections)->required();
  evd_cmd->add_option("--ground-truth", evd.ground_truth)->required();
  evd_cmd->add_option("--iou", evd.iou)->check(CLI::IsMember({"box", "mask"}))->capture_default_str();
  evd_cmd->callback([&] { RunEvalDetection(evd); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << Json{{"error", {{"kind", "usage"}, {"message", e.what()}}}}.dump() << "\n";
    return 2;
  } catch (const ctlid::Error& e) {
    std::cerr << Json{{"error", {{"kind", ErrorKindName(e.kind())}, {"message", e.what()}}}}.dump() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << Json{{"error", {{"kind", "internal"}, {"message", e.what()}}}}.dump() << "\n";
    return 1;
  }
  return 0;
}
