// Command-line front end: train, generate, bench-steps, ablate.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "vmar/bench.hpp"
#include "vmar/checkpoint.hpp"
#include "vmar/errors.hpp"
#include "vmar/export.hpp"
#include "vmar/generator.hpp"
#include "vmar/run_config.hpp"
#include "vmar/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace vmar;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kIo = 3, kCheckpoint = 4 };

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* app, Common& c, const std::string& default_out) {
  c.out = default_out;
  app->add_option("--config", c.config, "JSON config file (defaults apply to missing keys)");
  app->add_option("--set", c.sets, "override, e.g. --set train.lr=3e-4")->take_all();
  app->add_option("--seed", c.seed, "seed for this command");
  app->add_option("--out", c.out, "output directory")->capture_default_str();
}

// Merged document: defaults <- config file <- --set <- seed_key (if --seed).
json resolve(const Common& c, const std::vector<std::string>& seed_keys) {
  json doc = c.config.empty() ? default_config_json() : merge_config(read_config_file(c.config));
  for (const auto& s : c.sets) apply_override(doc, s);
  if (c.seed)
    for (const auto& k : seed_keys) apply_override(doc, k + "=" + std::to_string(*c.seed));
  return doc;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
}

std::string join(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

CheckpointData load_model_checkpoint(const std::string& path) {
  if (path.empty()) throw ConfigError("--checkpoint", "a checkpoint is required");
  return load_checkpoint(path);
}

void write_report(const Report& r, const std::string& dir, const std::string& name, const json& doc) {
  ensure_dir(dir);
  const std::string csv = r.to_csv(config_hash(doc));
  write_text_file(join(dir, name), csv);
  std::cout << csv;
}

int cmd_train(const Common& c, const std::string& resume) {
  const json doc = resolve(c, {"train.seed", "model.init_seed"});
  const RunConfig cfg = parse_run_config(doc);
  ensure_dir(c.out);
  write_text_file(join(c.out, "config.json"), doc.dump(2) + "\n");

  const ToyTokenizer tok = cfg.make_tokenizer();
  std::optional<Trainer> trainer;
  if (resume.empty()) {
    Model<float> model(cfg.model);
    model.init(cfg.init_seed);
    trainer.emplace(std::move(model), cfg.train);
  } else {
    CheckpointData data = load_checkpoint(resume);
    if (model_config_to_json(data.model.config()) != model_config_to_json(cfg.model))
      throw StateError("checkpoint model does not match the configured model");
    trainer.emplace(resume_trainer(std::move(data), cfg.train));
  }

  const std::string log_path = join(c.out, "train_log.csv");
  std::ofstream log(log_path, resume.empty() ? std::ios::trunc : std::ios::app);
  if (!log) throw IoError("cannot write " + log_path);
  if (resume.empty()) log << "# config_hash=" << config_hash(doc) << "\nstep,stage,loss,lr,wall_ms\n";
  auto on_step = [&](const LogRow& r) {
    char line[160];
    std::snprintf(line, sizeof line, "%zu,%zu,%.6f,%.3g,%.1f\n", r.step, r.stage, r.loss, r.lr, r.wall_ms);
    log << line;
    if (r.step % 50 == 0) std::cerr << "step " << r.step << " stage " << r.stage << " loss " << r.loss << "\n";
  };

  const auto t0 = std::chrono::steady_clock::now();
  const Corpus corpus = build_corpus(cfg.corpus_config(), tok);
  trainer->run_curriculum(cfg.curriculum.stages, corpus, on_step, cfg.max_steps);

  std::size_t budget = 0;
  for (const auto& st : cfg.curriculum.stages) budget += st.steps;
  if (cfg.curriculum.finetune_steps > 0 && (cfg.max_steps == 0 || cfg.max_steps > budget)) {
    CorpusConfig fc = cfg.corpus_config();
    fc.height_px = cfg.curriculum.finetune_height_px;
    fc.width_px = cfg.curriculum.finetune_width_px;
    const Corpus fine = build_corpus(fc, tok);
    resolution_switch(trainer->model(), fine.dims.height, fine.dims.width);
    const CurriculumStage at_grid{fine.dims.frames, 0, fine.dims.height, fine.dims.width};
    // The first stage covers the steps already taken, so only the second one runs.
    std::vector<CurriculumStage> run{at_grid, at_grid};
    run[0].steps = budget;
    run[1].steps = cfg.curriculum.finetune_steps;
    trainer->run_curriculum(run, fine, on_step, cfg.max_steps);
  }
  log.close();

  save_checkpoint(join(c.out, "model.ckpt"), *trainer);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cerr << "trained " << trainer->step() << " steps in " << secs << " s\n";
  return kOk;
}

int cmd_generate(const Common& c, const std::string& ckpt, const std::string& cls_name) {
  json doc = resolve(c, {"generation.seed"});
  if (!cls_name.empty()) apply_override(doc, "generation.class=" + cls_name);
  const RunConfig cfg = parse_run_config(doc);
  const CheckpointData data = load_model_checkpoint(ckpt);
  const ToyTokenizer tok = cfg.make_tokenizer();
  if (tok.token_dim() != data.model.config().backbone.token_dim)
    throw ConfigError("tokenizer.patch", "token size does not match the checkpoint");

  const auto& gs = cfg.generation;
  GenerationConfig g = gs.config;
  const std::size_t pf = tok.pixel_frames(g.frames);
  const std::size_t hp = g.height * tok.patch()[1], wp = g.width * tok.patch()[2];
  const MotionSpec spec{*parse_motion_class(gs.cls), gs.start_row, gs.start_col, gs.speed};
  if (spec.row < 0 || spec.col < 0 || static_cast<std::size_t>(spec.row) >= hp ||
      static_cast<std::size_t>(spec.col) >= wp)
    throw ConfigError("generation.start_row", "start cell lies outside the pixel grid");
  const TokenGrid clip = tok.tokenize(gen_bouncing_ball(spec, pf, hp, wp, g.seed));
  const TokenGrid prefix = clip.first_frames(gs.prefix_frames);
  const bool beyond = g.height != data.model.config().grid_height ||
                      g.width != data.model.config().grid_width;
  const GenerationResult res = beyond ? extrapolate(data.model, spec.cls, prefix, g)
                                      : generate(data.model, spec.cls, prefix, g);

  ensure_dir(c.out);
  const PixelVideo video = tok.detokenize(res.grid);
  const auto errors = rollout_error(res.grid, spec, tok);
  json manifest;
  manifest["config_hash"] = config_hash(doc);
  manifest["spec"] = motion_spec_json(spec);
  manifest["seed"] = g.seed;
  manifest["latent"] = {{"frames", g.frames}, {"height", g.height}, {"width", g.width}};
  manifest["prefix_latent_frames"] = gs.prefix_frames;
  manifest["rollout_error"] = errors;
  export_video(video, c.out, manifest);
  write_text_file(join(c.out, "trace.json"), res.trace.to_json().dump(2) + "\n");
  std::cout << "wrote " << video.frames << " frames to " << c.out << "\n";
  return kOk;
}

int cmd_bench_steps(const Common& c, const std::string& ckpt) {
  const json doc = resolve(c, {"generation.seed"});
  const RunConfig cfg = parse_run_config(doc);
  const CheckpointData data = load_model_checkpoint(ckpt);
  write_report(bench_steps(data.model, cfg.make_tokenizer(), cfg), c.out, "bench_steps.csv", doc);
  return kOk;
}

int cmd_ablate(const Common& c, const std::string& ckpt, const std::string& which,
               const std::string& baseline, const std::string& sincos_ckpt) {
  const json doc = resolve(c, {"generation.seed"});
  const RunConfig cfg = parse_run_config(doc);
  const CheckpointData data = load_model_checkpoint(ckpt);
  const ToyTokenizer tok = cfg.make_tokenizer();
  const bool all = which == "all";
  if (all || which == "temperature")
    write_report(ablate_temperature(data.model, tok, cfg), c.out, "ablate_temperature.csv", doc);
  if (all || which == "pe") {
    std::optional<CheckpointData> sc;
    if (!sincos_ckpt.empty()) sc.emplace(load_checkpoint(sincos_ckpt));
    write_report(ablate_pe(data.model, tok, cfg, sc ? &sc->model : nullptr), c.out, "ablate_pe.csv", doc);
  }
  if (all || which == "total_mask") {
    if (baseline.empty())
      throw ConfigError("--baseline-checkpoint", "the total-mask ablation needs a total-mask checkpoint");
    const CheckpointData base = load_checkpoint(baseline);
    write_report(ablate_total_mask(data.model, base.model, tok, cfg), c.out, "ablate_total_mask.csv", doc);
  }
  if (all || which == "causal")
    write_report(ablate_causal(data.model, cfg), c.out, "ablate_causal.csv", doc);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Frame-causal masked autoregressive video generation on synthetic clips"};
  app.require_subcommand(1);

  Common train_c, gen_c, steps_c, abl_c;
  std::string resume, ckpt_gen, ckpt_steps, ckpt_abl, cls, which = "all", baseline, sincos;

  auto* train = app.add_subcommand("train", "run the frame curriculum and save a checkpoint");
  add_common(train, train_c, "runs/train");
  train->add_option("--resume", resume, "continue from a trainer checkpoint");

  auto* gen = app.add_subcommand("generate", "continue a clip and write PGM frames");
  add_common(gen, gen_c, "runs/generate");
  gen->add_option("--checkpoint", ckpt_gen, "model checkpoint")->required();
  gen->add_option("--class", cls, "motion class: right, left, down, up");

  auto* steps = app.add_subcommand("bench-steps", "step counts and timing of the decoding modes");
  add_common(steps, steps_c, "runs/bench");
  steps->add_option("--checkpoint", ckpt_steps, "model checkpoint")->required();

  auto* abl = app.add_subcommand("ablate", "ablation reports");
  add_common(abl, abl_c, "runs/ablate");
  abl->add_option("--checkpoint", ckpt_abl, "next-frame model checkpoint")->required();
  abl->add_option("--which", which, "temperature, pe, total_mask, causal or all")
      ->check(CLI::IsMember({"temperature", "pe", "total_mask", "causal", "all"}))
      ->capture_default_str();
  abl->add_option("--baseline-checkpoint", baseline, "total-mask model checkpoint");
  abl->add_option("--sincos-checkpoint", sincos, "absolute-position model checkpoint");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*train) return cmd_train(train_c, resume);
    if (*gen) return cmd_generate(gen_c, ckpt_gen, cls);
    if (*steps) return cmd_bench_steps(steps_c, ckpt_steps);
    if (*abl) return cmd_ablate(abl_c, ckpt_abl, which, baseline, sincos);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const UnsupportedConfigError& e) {
    std::cerr << "unsupported configuration: " << e.what() << "\n";
    return kConfig;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kIo;
  } catch (const FormatError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kCheckpoint;
  } catch (const StateError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kCheckpoint;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kFailure;
}
