#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "diffcap/checkpoint.hpp"
#include "diffcap/evaluate.hpp"
#include "diffcap/gradcheck.hpp"
#include "diffcap/train.hpp"

namespace {

using namespace diffcap;

struct RunConfig {
  DenoiserConfig model;  // vocab filled in from the dataset
  TrainConfig train;
  SamplerConfig sampler;
  std::uint64_t seed = 0;
  bool deterministic = false;
  bool model_given = false;
};

void check_keys(const nlohmann::json& j, const std::vector<std::string>& allowed,
                const std::string& where) {
  if (!j.is_object()) throw UsageError("config: " + where + " must be a JSON object");
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const std::string& k : allowed)
      if (item.key() == k) ok = true;
    if (!ok) throw UsageError("config: unknown key \"" + item.key() + "\" in " + where);
  }
}

void apply_length_choice(SamplerConfig& sc, const std::string& text) {
  if (text == "oracle") {
    sc.length_source = LengthSource::kOracle;
    return;
  }
  if (text == "predicted") {
    sc.length_source = LengthSource::kPredicted;
    return;
  }
  try {
    std::size_t used = 0;
    int n = std::stoi(text, &used);
    if (used != text.size() || n < 1) throw std::invalid_argument(text);
    sc.length_source = LengthSource::kFixed;
    sc.fixed_length = n;
  } catch (const std::exception&) {
    throw UsageError("length must be \"oracle\", \"predicted\" or a positive integer, got \"" +
                     text + "\"");
  }
}

RunConfig load_run_config(const std::string& path) {
  RunConfig rc;
  if (path.empty()) return rc;
  std::ifstream f(path);
  if (!f) throw UsageError("cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("config " + path + ": " + e.what());
  }
  check_keys(j, {"model", "train", "sampler", "seed", "deterministic"}, "top level");
  if (j.contains("seed")) rc.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("deterministic")) rc.deterministic = j.at("deterministic").get<bool>();

  if (j.contains("model")) {
    rc.model_given = true;
    const nlohmann::json& m = j.at("model");
    check_keys(m,
               {"layers", "d_model", "heads", "d_ff", "l_max", "total_steps", "step_scale",
                "uniform_frac", "timestep_mode"},
               "model");
    if (m.contains("layers")) rc.model.layers = m.at("layers").get<int>();
    if (m.contains("d_model")) rc.model.d_model = m.at("d_model").get<int>();
    if (m.contains("heads")) rc.model.heads = m.at("heads").get<int>();
    if (m.contains("d_ff")) rc.model.d_ff = m.at("d_ff").get<int>();
    if (m.contains("l_max")) rc.model.l_max = m.at("l_max").get<int>();
    if (m.contains("total_steps")) rc.model.total_steps = m.at("total_steps").get<int>();
    if (m.contains("step_scale")) rc.model.step_scale = m.at("step_scale").get<double>();
    if (m.contains("uniform_frac")) rc.model.uniform_frac = m.at("uniform_frac").get<double>();
    if (m.contains("timestep_mode"))
      rc.model.timestep_mode = timestep_mode_from_name(m.at("timestep_mode").get<std::string>());
  }

  if (j.contains("train")) {
    const nlohmann::json& t = j.at("train");
    check_keys(t,
               {"epochs", "batch_size", "peak_lr", "warmup_frac", "weight_decay",
                "image_free_ratio", "loss_weight_diffusion", "loss_weight_length", "clip_norm",
                "mode", "attn_mode"},
               "train");
    if (t.contains("epochs")) rc.train.epochs = t.at("epochs").get<int>();
    if (t.contains("batch_size")) rc.train.batch_size = t.at("batch_size").get<int>();
    if (t.contains("peak_lr")) rc.train.peak_lr = t.at("peak_lr").get<double>();
    if (t.contains("warmup_frac")) rc.train.warmup_frac = t.at("warmup_frac").get<double>();
    if (t.contains("weight_decay")) rc.train.weight_decay = t.at("weight_decay").get<double>();
    if (t.contains("image_free_ratio"))
      rc.train.image_free_ratio = t.at("image_free_ratio").get<double>();
    if (t.contains("loss_weight_diffusion"))
      rc.train.loss_weight_diffusion = t.at("loss_weight_diffusion").get<double>();
    if (t.contains("loss_weight_length"))
      rc.train.loss_weight_length = t.at("loss_weight_length").get<double>();
    if (t.contains("clip_norm")) rc.train.clip_norm = t.at("clip_norm").get<double>();
    if (t.contains("mode")) rc.train.mode = train_mode_from_name(t.at("mode").get<std::string>());
    if (t.contains("attn_mode"))
      rc.train.attn_mode = mask_mode_from_name(t.at("attn_mode").get<std::string>());
  }

  if (j.contains("sampler")) {
    const nlohmann::json& s = j.at("sampler");
    check_keys(s,
               {"guidance_scale", "best_first", "mask_mode", "length", "selection",
                "step_rescale"},
               "sampler");
    if (s.contains("guidance_scale"))
      rc.sampler.guidance_scale = s.at("guidance_scale").get<double>();
    if (s.contains("best_first")) rc.sampler.best_first = s.at("best_first").get<bool>();
    if (s.contains("mask_mode"))
      rc.sampler.mask_mode = mask_mode_from_name(s.at("mask_mode").get<std::string>());
    if (s.contains("length")) {
      if (s.at("length").is_number_integer())
        apply_length_choice(rc.sampler, std::to_string(s.at("length").get<int>()));
      else
        apply_length_choice(rc.sampler, s.at("length").get<std::string>());
    }
    if (s.contains("selection")) {
      std::string sel = s.at("selection").get<std::string>();
      if (sel == "greedy")
        rc.sampler.selection = SelectionRule::kGreedy;
      else if (sel == "categorical")
        rc.sampler.selection = SelectionRule::kCategorical;
      else
        throw UsageError("config: unknown selection rule \"" + sel + "\"");
    }
    if (s.contains("step_rescale")) {
      std::string sr = s.at("step_rescale").get<std::string>();
      if (sr == "denominator")
        rc.sampler.step_rescale = StepRescale::kDenominator;
      else if (sr == "ratio")
        rc.sampler.step_rescale = StepRescale::kRatio;
      else
        throw UsageError("config: unknown step rescale \"" + sr + "\"");
    }
  }
  return rc;
}

struct LoadedModel {
  LoadedCheckpoint<float> ckpt;
  Vocabulary vocab;
  NoiseSchedule schedule;
  bool ar = false;
};

LoadedModel open_model(const std::string& path) {
  LoadedCheckpoint<float> ck = load_checkpoint<float>(path);
  Vocabulary vocab = Vocabulary::from_words(ck.vocab_words);
  if (vocab.size() != ck.params.config.vocab)
    throw UsageError("checkpoint " + path + ": vocabulary does not match the model");
  NoiseSchedule schedule = NoiseSchedule::build(ck.params.config.total_steps, vocab.text_size(),
                                                ck.params.config.uniform_frac);
  bool ar = ck.train_mode == "ar";
  return {std::move(ck), std::move(vocab), std::move(schedule), ar};
}

std::ostream& open_sink(const std::string& path, std::ofstream& file) {
  if (path.empty() || path == "-") return std::cout;
  file.open(path, std::ios::trunc);
  if (!file) throw std::runtime_error("cannot open " + path + " for writing");
  return file;
}

void write_trace(const std::string& path, const std::vector<StepTraceEntry>& trace) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  for (const StepTraceEntry& te : trace) {
    nlohmann::json j = {{"example", te.example}, {"step", te.step},       {"t", te.t},
                        {"p", te.p},             {"fixed", te.fixed_positions},
                        {"tokens", te.tokens}};
    f << j.dump() << "\n";
  }
}

// Shared flag bundle for the sampling-style commands.
struct SampleFlags {
  std::string config_path, checkpoint, data, split = "test", out, trace;
  double guidance = -1.0;  // negative = keep config value
  std::string length;
  bool no_cam = false, no_best_first = false, deterministic = false;
  std::uint64_t seed = 0;
  int limit = 0;
};

void add_common_sample_flags(CLI::App* cmd, SampleFlags& fl) {
  cmd->add_option("--config", fl.config_path, "JSON config file");
  cmd->add_option("--checkpoint", fl.checkpoint, "model checkpoint")->required();
  cmd->add_option("--seed", fl.seed, "sampling seed");
  cmd->add_option("--guidance-scale", fl.guidance, "image-free guidance scale s");
  cmd->add_option("--length", fl.length, "length source: oracle|predicted|N");
  cmd->add_flag("--no-cam", fl.no_cam, "disable concentrated attention masking");
  cmd->add_flag("--no-best-first", fl.no_best_first, "disable confidence-ordered unmasking");
  cmd->add_flag("--deterministic", fl.deterministic,
                "single-threaded deterministic numerics (always on; flag kept for scripts)");
}

SamplerConfig sampler_config_for(const SampleFlags& fl, const RunConfig& rc,
                                 const LoadedModel& model) {
  SamplerConfig sc = rc.sampler;
  if (!model.ar && sc.mask_mode == AttnMaskMode::kCam) sc.mask_mode = model.ckpt.attn_mode;
  if (fl.guidance >= 0.0) sc.guidance_scale = fl.guidance;
  if (!fl.length.empty()) apply_length_choice(sc, fl.length);
  if (fl.no_cam) sc.mask_mode = AttnMaskMode::kFull;
  if (fl.no_best_first) sc.best_first = false;
  sc.seed = fl.seed;
  sc.validate();
  return sc;
}

int run_gen_data(int n, std::uint64_t seed, const std::string& out) {
  std::vector<CaptionedScene> records = generate_dataset(n, seed);
  write_dataset_jsonl(out, records);
  int train = 0, val = 0, test = 0;
  for (const CaptionedScene& r : records) {
    if (r.split == "train") ++train;
    if (r.split == "val") ++val;
    if (r.split == "test") ++test;
  }
  std::cout << "wrote " << records.size() << " records (" << train << " train, " << val
            << " val, " << test << " test) to " << out << "\n";
  return 0;
}

struct TrainFlags {
  std::string config_path, data, out, metrics, mode, resume, vocab_out;
  std::uint64_t seed = 0;
  bool seed_given = false;
  bool no_cam = false, deterministic = false;
  int epochs = -1;
};

int run_train(const TrainFlags& fl) {
  RunConfig rc = load_run_config(fl.config_path);
  if (fl.seed_given) rc.seed = fl.seed;
  rc.train.seed = rc.seed;
  if (!fl.mode.empty()) rc.train.mode = train_mode_from_name(fl.mode);
  if (fl.no_cam) rc.train.attn_mode = AttnMaskMode::kFull;
  if (fl.epochs > 0) rc.train.epochs = fl.epochs;

  std::vector<CaptionedScene> records = read_dataset_jsonl(fl.data);
  std::vector<const CaptionedScene*> train_recs = split_view(records, "train");
  std::vector<const CaptionedScene*> val_recs = split_view(records, "val");
  if (train_recs.empty()) throw UsageError("dataset " + fl.data + " has no train split");

  Vocabulary vocab = Vocabulary::build([&] {
    std::vector<std::string> corpus;
    for (const CaptionedScene* r : train_recs) corpus.push_back(r->caption);
    return corpus;
  }());

  DenoiserParams<float> params;
  std::int64_t start_step = 0;
  std::optional<OptimizerState<float>> opt_state;
  if (!fl.resume.empty()) {
    LoadedCheckpoint<float> loaded = load_checkpoint<float>(fl.resume);
    vocab = Vocabulary::from_words(loaded.vocab_words);
    if (rc.model_given) {
      DenoiserConfig want = rc.model;
      want.vocab = vocab.size();
      if (config_to_json(want) != config_to_json(loaded.params.config))
        throw UsageError("resume: config architecture differs from checkpoint " + fl.resume);
    }
    if (loaded.train_mode != train_mode_name(rc.train.mode))
      throw UsageError("resume: checkpoint was trained in " + loaded.train_mode + " mode");
    if (rc.train.mode == TrainMode::kDiffusion) rc.train.attn_mode = loaded.attn_mode;
    params = std::move(loaded.params);
    start_step = loaded.step;
    if (loaded.has_optimizer) opt_state = std::move(loaded.optimizer);
    std::cout << "resuming from " << fl.resume << " at step " << start_step << "\n";
  } else {
    rc.model.vocab = vocab.size();
    rc.model.validate();
    Rng init_rng = Rng::derive(rc.seed, 0x1717);
    params = DenoiserParams<float>::init(rc.model, init_rng);
  }

  NoiseSchedule schedule = NoiseSchedule::build(params.config.total_steps, vocab.text_size(),
                                                params.config.uniform_frac);
  std::vector<TrainExample> train_set = prepare_examples(train_recs, vocab, params.config.l_max);
  std::vector<TrainExample> val_set = prepare_examples(val_recs, vocab, params.config.l_max);

  std::string metrics_path = fl.metrics.empty() ? fl.out + ".metrics.jsonl" : fl.metrics;
  TrainOutcome<float> outcome = train(params, train_set, val_set, vocab, schedule, rc.train,
                                      fl.out, metrics_path, &std::cout, start_step,
                                      opt_state ? &*opt_state : nullptr);
  if (!fl.vocab_out.empty()) vocab.save(fl.vocab_out);
  std::cout << "best val_token_acc " << outcome.best_val_token_acc << " after step "
            << outcome.final_step << "; checkpoint " << fl.out << "\n";
  return 0;
}

int run_sample(const SampleFlags& fl) {
  RunConfig rc = load_run_config(fl.config_path);
  LoadedModel model = open_model(fl.checkpoint);
  SamplerConfig sc = sampler_config_for(fl, rc, model);

  std::vector<CaptionedScene> records = read_dataset_jsonl(fl.data);
  std::vector<const CaptionedScene*> view = split_view(records, fl.split);
  if (view.empty()) throw UsageError("dataset has no \"" + fl.split + "\" split");
  if (fl.limit > 0 && (int)view.size() > fl.limit) view.resize((std::size_t)fl.limit);

  std::vector<SceneFeatures> feats;
  std::vector<const SceneFeatures*> scenes;
  std::vector<int> oracle;
  for (const CaptionedScene* r : view) {
    feats.push_back(scene_features(r->scene));
    oracle.push_back(encode(r->caption, model.vocab, model.ckpt.params.config.l_max).length);
  }
  for (const SceneFeatures& f : feats) scenes.push_back(&f);

  CaptionSampler<float> sampler(model.ckpt.params, model.vocab, model.schedule, sc);
  std::vector<StepTraceEntry> trace;
  std::vector<TokenSeq> outs;
  if (model.ar)
    outs = sampler.decode_ar(scenes);
  else
    outs = sampler.sample(scenes, &oracle, fl.trace.empty() ? nullptr : &trace);

  std::ofstream file;
  std::ostream& sink = open_sink(fl.out, file);
  for (const TokenSeq& seq : outs) sink << decode(seq, model.vocab) << "\n";
  if (!fl.trace.empty()) write_trace(fl.trace, trace);
  return 0;
}

int run_infill(const SampleFlags& fl, const std::string& input) {
  RunConfig rc = load_run_config(fl.config_path);
  LoadedModel model = open_model(fl.checkpoint);
  SamplerConfig sc = sampler_config_for(fl, rc, model);

  std::vector<CaptionedScene> records = read_dataset_jsonl(input);
  if (records.empty()) throw UsageError("infill input " + input + " is empty");
  std::vector<SceneFeatures> feats;
  std::vector<const SceneFeatures*> scenes;
  std::vector<TokenSeq> templates;
  for (const CaptionedScene& r : records) {
    feats.push_back(scene_features(r.scene));
    templates.push_back(encode(r.caption, model.vocab, model.ckpt.params.config.l_max));
  }
  for (const SceneFeatures& f : feats) scenes.push_back(&f);

  CaptionSampler<float> sampler(model.ckpt.params, model.vocab, model.schedule, sc);
  std::vector<StepTraceEntry> trace;
  std::vector<TokenSeq> outs =
      model.ar ? sampler.ar_infill(scenes, templates)
               : sampler.infill(scenes, templates, fl.trace.empty() ? nullptr : &trace);

  std::ofstream file;
  std::ostream& sink = open_sink(fl.out, file);
  for (const TokenSeq& seq : outs) sink << decode(seq, model.vocab) << "\n";
  if (!fl.trace.empty()) write_trace(fl.trace, trace);
  return 0;
}

int run_eval(const SampleFlags& fl, bool with_infill) {
  RunConfig rc = load_run_config(fl.config_path);
  if (fl.length.empty() && rc.sampler.length_source == LengthSource::kPredicted)
    rc.sampler.length_source = LengthSource::kOracle;  // eval defaults to oracle length
  LoadedModel model = open_model(fl.checkpoint);
  SamplerConfig sc = sampler_config_for(fl, rc, model);

  std::vector<CaptionedScene> records = read_dataset_jsonl(fl.data);
  std::vector<const CaptionedScene*> view = split_view(records, fl.split);
  if (view.empty()) throw UsageError("dataset has no \"" + fl.split + "\" split");
  if (fl.limit > 0 && (int)view.size() > fl.limit) view.resize((std::size_t)fl.limit);

  EvalReport rep = evaluate_split(model.ckpt.params, model.vocab, model.schedule, sc, view,
                                  model.ar, with_infill, fl.seed ^ 0xC0FFEEull);
  std::ofstream file;
  std::ostream& sink = open_sink(fl.out, file);
  sink << rep.to_json() << "\n";
  return 0;
}

int run_inspect_schedule(int steps, int text_vocab, double uniform_frac,
                         const std::string& out) {
  NoiseSchedule schedule = NoiseSchedule::build(steps, text_vocab, uniform_frac);
  std::ofstream file;
  std::ostream& sink = open_sink(out, file);
  sink << schedule.to_tsv();
  return 0;
}

struct AblateFlags {
  std::string config_path, data, out_dir;
  int epochs = 12;
  std::uint64_t seed = 0;
  bool deterministic = false;
};

int run_ablate(const AblateFlags& fl) {
  RunConfig rc = load_run_config(fl.config_path);
  rc.train.seed = fl.seed ? fl.seed : rc.seed;
  rc.train.epochs = fl.epochs;
  std::filesystem::create_directories(fl.out_dir);

  std::vector<CaptionedScene> records = read_dataset_jsonl(fl.data);
  std::vector<const CaptionedScene*> train_recs = split_view(records, "train");
  std::vector<const CaptionedScene*> val_recs = split_view(records, "val");
  std::vector<const CaptionedScene*> test_recs = split_view(records, "test");
  if (train_recs.empty() || test_recs.empty())
    throw UsageError("ablate: dataset must provide train and test splits");

  Vocabulary vocab = Vocabulary::build([&] {
    std::vector<std::string> corpus;
    for (const CaptionedScene* r : train_recs) corpus.push_back(r->caption);
    return corpus;
  }());
  rc.model.vocab = vocab.size();
  rc.model.validate();
  NoiseSchedule schedule =
      NoiseSchedule::build(rc.model.total_steps, vocab.text_size(), rc.model.uniform_frac);
  std::vector<TrainExample> train_set = prepare_examples(train_recs, vocab, rc.model.l_max);
  std::vector<TrainExample> val_set = prepare_examples(val_recs, vocab, rc.model.l_max);

  struct Variant {
    std::string name;
    AttnMaskMode mode;
  };
  std::vector<Variant> trained = {{"full", AttnMaskMode::kCam},
                                  {"no_cam", AttnMaskMode::kFull},
                                  {"m2m_only", AttnMaskMode::kCamM2mOnly},
                                  {"t2m_only", AttnMaskMode::kCamT2mOnly}};

  auto checkpoint_for = [&](const Variant& v) -> std::string {
    std::string path = fl.out_dir + "/" + v.name + ".ckpt";
    if (!std::filesystem::exists(path)) {
      std::cout << "training variant " << v.name << "\n";
      TrainConfig tc = rc.train;
      tc.attn_mode = v.mode;
      Rng init_rng = Rng::derive(rc.train.seed, 0x1717);
      DenoiserParams<float> params = DenoiserParams<float>::init(rc.model, init_rng);
      train(params, train_set, val_set, vocab, schedule, tc, path,
            path + ".metrics.jsonl", &std::cout);
    }
    return path;
  };

  auto eval_row = [&](const std::string& ckpt_path, AttnMaskMode mode, bool best_first,
                      double guidance, LengthSource source) {
    LoadedCheckpoint<float> ck = load_checkpoint<float>(ckpt_path);
    SamplerConfig sc;
    sc.mask_mode = mode;
    sc.best_first = best_first;
    sc.guidance_scale = guidance;
    sc.length_source = source;
    sc.seed = fl.seed;
    return evaluate_split(ck.params, vocab, schedule, sc, test_recs, false, false, 0);
  };

  nlohmann::json table;
  std::map<std::string, double> acc;
  for (const Variant& v : trained) {
    std::string path = checkpoint_for(v);
    EvalReport rep = eval_row(path, v.mode, true, 1.17, LengthSource::kOracle);
    table[v.name] = nlohmann::json::parse(rep.to_json());
    acc[v.name] = rep.token_acc;
    std::cout << v.name << " token_acc " << rep.token_acc << "\n";
  }
  std::string full_ckpt = fl.out_dir + "/full.ckpt";
  {
    EvalReport rep = eval_row(full_ckpt, AttnMaskMode::kCam, false, 1.17, LengthSource::kOracle);
    table["no_best_first"] = nlohmann::json::parse(rep.to_json());
    acc["no_best_first"] = rep.token_acc;
    std::cout << "no_best_first token_acc " << rep.token_acc << "\n";
  }
  {
    EvalReport rep = eval_row(full_ckpt, AttnMaskMode::kCam, true, 1.0, LengthSource::kOracle);
    table["no_guidance"] = nlohmann::json::parse(rep.to_json());
    acc["no_guidance"] = rep.token_acc;
    std::cout << "no_guidance token_acc " << rep.token_acc << "\n";
  }
  {
    EvalReport rep =
        eval_row(full_ckpt, AttnMaskMode::kCam, true, 1.17, LengthSource::kPredicted);
    table["predicted_length"] = nlohmann::json::parse(rep.to_json());
    acc["predicted_length"] = rep.token_acc;
    std::cout << "predicted_length token_acc " << rep.token_acc << "\n";
  }

  nlohmann::json out = {
      {"epochs", fl.epochs},
      {"variants", table},
      {"checks",
       {{"full_beats_no_cam", acc["full"] > acc["no_cam"]},
        {"no_cam_beats_no_best_first", acc["no_cam"] > acc["no_best_first"]},
        {"m2m_beats_t2m", acc["m2m_only"] > acc["t2m_only"]},
        {"guidance_helps", acc["full"] >= acc["no_guidance"]}}}};
  std::string report_path = fl.out_dir + "/ablation.json";
  std::ofstream rf(report_path, std::ios::trunc);
  if (!rf) throw std::runtime_error("cannot open " + report_path + " for writing");
  rf << out.dump(2) << "\n";
  std::cout << "wrote " << report_path << "\n";
  return 0;
}

struct GradFlags {
  std::string scalar = "f64";
  int layers = 2, d_model = 32, heads = 4, d_ff = 64, l_max = 8, batch = 2;
  bool five_point = false;
  double h = -1.0, tol = -1.0;
  std::uint64_t seed = 0;
};

// Finite differences always run on an f64 copy of the model. For f64 that
// is the model itself; for f32 it is the bitwise-widened point, evaluating
// the same function without the round-off that swamps an f32 difference
// quotient.
inline DenoiserParams<double> widen_any(const DenoiserParams<double>& p) { return p; }
inline DenoiserParams<double> widen_any(const DenoiserParams<float>& p) { return widen(p); }
inline DiffusionBatch<double> widen_any(const DiffusionBatch<double>& b) { return b; }
inline DiffusionBatch<double> widen_any(const DiffusionBatch<float>& b) { return widen(b); }
inline Tensor<double> widen_any(const Tensor<double>& t) { return t; }
inline Tensor<double> widen_any(const Tensor<float>& t) { return widen(t); }

template <typename S>
int run_check_grads_typed(const GradFlags& fl) {
  DenoiserConfig cfg;
  cfg.layers = fl.layers;
  cfg.d_model = fl.d_model;
  cfg.heads = fl.heads;
  cfg.d_ff = fl.d_ff;
  cfg.l_max = fl.l_max;
  cfg.vocab = 9;
  cfg.total_steps = 6;
  cfg.step_scale = 240.0;
  cfg.validate();
  std::vector<std::string> words;
  for (int i = 0; i < 7; ++i) words.push_back("w" + std::to_string(i));
  words.push_back(kMaskWord);
  words.push_back(kPadWord);
  Vocabulary vocab = Vocabulary::from_words(words);
  NoiseSchedule schedule = NoiseSchedule::build(cfg.total_steps, vocab.text_size(),
                                                cfg.uniform_frac);

  Rng prng = Rng::derive(fl.seed, 1);
  DenoiserParams<S> params = DenoiserParams<S>::init(cfg, prng);

  Rng drng = Rng::derive(fl.seed, 2);
  std::vector<TrainExample> examples;
  for (int e = 0; e < fl.batch; ++e) {
    TrainExample ex;
    ex.length = 4 + (int)drng.uniform_int(cfg.l_max - 4);
    for (int j = 0; j < cfg.l_max; ++j)
      ex.ids.push_back(j < ex.length ? (int)drng.uniform_int(vocab.text_size())
                                     : vocab.pad_id());
    ex.features = scene_features(sample_scene(drng));
    examples.push_back(std::move(ex));
  }
  std::vector<const TrainExample*> batch;
  for (const TrainExample& ex : examples) batch.push_back(&ex);
  Rng brng = Rng::derive(fl.seed, 3);
  DiffusionBatch<S> db = prepare_diffusion_batch<S>(batch, schedule, vocab, cfg, 0.5,
                                                    AttnMaskMode::kCam, brng);

  StepLoss<S> at_point = diffusion_step_loss(params, db, 1.0, 0.2);
  DenoiserParams<double> wp = widen_any(params);
  DiffusionBatch<double> wb = widen_any(db);

  auto eval_with = [&](double w_length) {
    using namespace ops;
    Tape<double> tape;
    DenoiserVars v = lift(tape, wp);
    ForwardBatch<double> in;
    in.batch = wb.batch;
    in.l = wb.l;
    in.token_ids = wb.token_ids;
    in.p_effective = wb.p_effective;
    in.cond = wb.cond;
    in.cond_null = wb.cond_null;
    in.self_mask = wb.self_mask;
    DenoiserOutput fwd = forward(tape, v, cfg, in);
    Var ce = cross_entropy(tape, fwd.logits, wb.targets, wb.active, wb.l);
    double total = tape.val(ce).data[0];
    if (w_length > 0.0) {
      Var len_logits = predict_length_logits(tape, v, fwd.summary);
      std::vector<std::uint8_t> all((std::size_t)wb.batch, 1);
      Var ce_len = cross_entropy(tape, len_logits, wb.length_targets, all, 0);
      total += w_length * tape.val(ce_len).data[0];
    }
    return total;
  };

  // The length head reads a detached condition summary, so the condition
  // encoder tensors are audited against the diffusion term alone; their
  // joint-loss gradient equals the diffusion gradient by the cut contract.
  auto is_encoder = [](const std::string& name) {
    return name == "cond_w" || name == "cond_b" || name == "slot_emb" || name == "null_cond";
  };
  std::vector<std::pair<std::string, Tensor<double>*>> rest, enc;
  std::vector<Tensor<double>> rest_g, enc_g;
  std::size_t idx = 0;
  wp.visit([&](const std::string& name, Tensor<double>& t) {
    if (is_encoder(name)) {
      enc.emplace_back(name, &t);
      enc_g.push_back(widen_any(at_point.grads[idx]));
    } else {
      rest.emplace_back(name, &t);
      rest_g.push_back(widen_any(at_point.grads[idx]));
    }
    ++idx;
  });
  double h = fl.h > 0.0 ? fl.h : 1e-5;
  double tol = fl.tol > 0.0 ? fl.tol : (sizeof(S) == 4 ? 1e-3 : 1e-5);
  double floor = 1e-4;
  auto eval_joint = [&]() { return eval_with(0.2); };
  auto eval_diffusion = [&]() { return eval_with(0.0); };
  FdReport rep = fd_check<double>(rest, rest_g, eval_joint, h, floor, fl.five_point);
  FdReport enc_rep = fd_check<double>(enc, enc_g, eval_diffusion, h, floor, fl.five_point);
  double worst = std::max(rep.max_rel_err, enc_rep.max_rel_err);
  const std::string& worst_name =
      rep.max_rel_err >= enc_rep.max_rel_err ? rep.worst().name : enc_rep.worst().name;
  std::cout << "checked " << (rest.size() + enc.size()) << " parameter tensors, max rel err "
            << worst << " (worst: " << worst_name << "), tolerance " << tol << "\n";
  if (worst > tol) {
    std::cerr << "gradient check failed\n";
    return 1;
  }
  std::cout << "gradient check passed\n";
  return 0;
}

int run_check_grads(const GradFlags& fl) {
  if (fl.scalar == "f64") return run_check_grads_typed<double>(fl);
  if (fl.scalar == "f32") return run_check_grads_typed<float>(fl);
  throw UsageError("scalar must be f32 or f64, got \"" + fl.scalar + "\"");
}

}  // namespace

int main(int argc, char** argv) {
  std::ios::sync_with_stdio(false);
  CLI::App app{"conditional caption generation with absorbing-state discrete diffusion"};
  app.require_subcommand(1);
  int exit_code = 0;

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic scene dataset");
  int gen_n = 5000;
  std::uint64_t gen_seed = 7;
  std::string gen_out;
  bool gen_det = false;
  gen->add_option("--n", gen_n, "number of scenes");
  gen->add_option("--seed", gen_seed, "generation seed");
  gen->add_option("--out", gen_out, "output JSONL path")->required();
  gen->add_flag("--deterministic", gen_det, "accepted for symmetry; generation is always deterministic");
  gen->callback([&] { exit_code = run_gen_data(gen_n, gen_seed, gen_out); });

  // train
  auto* tr = app.add_subcommand("train", "train the denoiser or the causal baseline");
  TrainFlags tf;
  tr->add_option("--config", tf.config_path, "JSON config file");
  tr->add_option("--data", tf.data, "dataset JSONL")->required();
  tr->add_option("--out", tf.out, "checkpoint output path")->required();
  tr->add_option("--metrics", tf.metrics, "metrics JSONL path (default: <out>.metrics.jsonl)");
  tr->add_option("--mode", tf.mode, "diffusion|ar");
  auto* seed_opt = tr->add_option("--seed", tf.seed, "training seed");
  tr->add_option("--resume", tf.resume, "checkpoint to resume from");
  tr->add_option("--vocab-out", tf.vocab_out, "write the vocabulary text file here");
  tr->add_option("--epochs", tf.epochs, "override the epoch count");
  tr->add_flag("--no-cam", tf.no_cam, "train with full attention instead of CAM");
  tr->add_flag("--deterministic", tf.deterministic,
               "single-threaded deterministic numerics (always on; flag kept for scripts)");
  tr->callback([&] {
    tf.seed_given = seed_opt->count() > 0;
    exit_code = run_train(tf);
  });

  // sample
  auto* sa = app.add_subcommand("sample", "generate captions for a dataset split");
  SampleFlags sf;
  add_common_sample_flags(sa, sf);
  sa->add_option("--data", sf.data, "dataset JSONL")->required();
  sa->add_option("--split", sf.split, "dataset split (default test)");
  sa->add_option("--out", sf.out, "captions output path (default stdout)");
  sa->add_option("--trace", sf.trace, "step trace JSONL path");
  sa->add_option("--limit", sf.limit, "only the first N scenes of the split");
  sa->callback([&] { exit_code = run_sample(sf); });

  // infill
  auto* in = app.add_subcommand("infill", "fill [MASK] holes in caption templates");
  SampleFlags inf;
  std::string infill_input;
  add_common_sample_flags(in, inf);
  in->add_option("--input", infill_input,
                 "JSONL records whose captions may contain [MASK] literals")
      ->required();
  in->add_option("--out", inf.out, "captions output path (default stdout)");
  in->add_option("--trace", inf.trace, "step trace JSONL path");
  in->callback([&] { exit_code = run_infill(inf, infill_input); });

  // eval
  auto* ev = app.add_subcommand("eval", "score a checkpoint on a dataset split");
  SampleFlags ef;
  bool eval_infill = false;
  add_common_sample_flags(ev, ef);
  ev->add_option("--data", ef.data, "dataset JSONL")->required();
  ev->add_option("--split", ef.split, "dataset split (default test)");
  ev->add_option("--out", ef.out, "report JSON path (default stdout)");
  ev->add_option("--limit", ef.limit, "only the first N scenes of the split");
  ev->add_flag("--infill", eval_infill, "also run the color-word infilling protocol");
  ev->callback([&] { exit_code = run_eval(ef, eval_infill); });

  // inspect-schedule
  auto* is = app.add_subcommand("inspect-schedule", "dump the corruption schedule as TSV");
  int is_steps = 20, is_vocab = 15;
  double is_frac = 0.1;
  std::string is_out;
  is->add_option("--steps", is_steps, "total steps T");
  is->add_option("--text-vocab", is_vocab, "text vocabulary size");
  is->add_option("--uniform-frac", is_frac, "uniform replacement share c_u");
  is->add_option("--out", is_out, "TSV output path (default stdout)");
  is->callback([&] { exit_code = run_inspect_schedule(is_steps, is_vocab, is_frac, is_out); });

  // ablate
  auto* ab = app.add_subcommand("ablate", "train and score the component ablation grid");
  AblateFlags af;
  ab->add_option("--config", af.config_path, "JSON config file");
  ab->add_option("--data", af.data, "dataset JSONL")->required();
  ab->add_option("--out-dir", af.out_dir, "directory for checkpoints and the report")
      ->required();
  ab->add_option("--epochs", af.epochs, "training epochs per variant");
  ab->add_option("--seed", af.seed, "seed for training and evaluation");
  ab->add_flag("--deterministic", af.deterministic,
               "single-threaded deterministic numerics (always on; flag kept for scripts)");
  ab->callback([&] { exit_code = run_ablate(af); });

  // check-grads
  auto* cg = app.add_subcommand("check-grads", "finite-difference audit of the gradients");
  GradFlags gf;
  cg->add_option("--scalar", gf.scalar, "f32|f64 (default f64)");
  cg->add_option("--layers", gf.layers, "model depth");
  cg->add_option("--d-model", gf.d_model, "model width");
  cg->add_option("--heads", gf.heads, "attention heads");
  cg->add_option("--d-ff", gf.d_ff, "feed-forward width");
  cg->add_option("--l-max", gf.l_max, "sequence capacity");
  cg->add_option("--batch", gf.batch, "examples in the probe batch");
  cg->add_option("--step-h", gf.h, "finite-difference step");
  cg->add_option("--tol", gf.tol, "maximum relative error");
  cg->add_option("--seed", gf.seed, "probe seed");
  cg->add_flag("--five-point", gf.five_point, "use the five-point stencil");
  cg->callback([&] { exit_code = run_check_grads(gf); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return exit_code;
}
