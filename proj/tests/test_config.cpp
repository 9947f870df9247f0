#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include <unistd.h>

#include "vmar/errors.hpp"
#include "vmar/run_config.hpp"

namespace vmar {
namespace {

using nlohmann::json;

std::string error_key(const std::function<void()>& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    return e.key();
  }
  return "<no error>";
}

TEST(RunConfigTest, DefaultsParse) {
  const RunConfig c = parse_run_config(default_config_json());
  EXPECT_EQ(c.latent_dims(), (GridDims{7, 8, 8}));
  EXPECT_EQ(c.model.backbone.token_dim, 8u);
  EXPECT_EQ(c.model.grid_height, 8u);
  ASSERT_EQ(c.curriculum.stages.size(), 3u);
  EXPECT_EQ(c.curriculum.stages[0].frames, 3u);
  EXPECT_EQ(c.curriculum.stages[1].frames, 5u);
  EXPECT_EQ(c.curriculum.stages[2].frames, 7u);
  EXPECT_EQ(c.curriculum.stages[2].height, 8u);
  EXPECT_EQ(c.generation.config.ar_steps, 64u);
  EXPECT_EQ(c.generation.config.infer_steps, 100u);
  EXPECT_EQ(c.generation.config.cfg_scale, 3.0);
  EXPECT_EQ(c.model.diffusion_steps, 1000u);
  EXPECT_EQ(c.train.mask_ratio_min, 0.7);
  EXPECT_EQ(c.train.mask_ratio_max, 1.0);
  EXPECT_EQ(c.generation.config.temperature.label(), "progressive");
  EXPECT_EQ(c.bench.temperatures.size(), 6u);
}

TEST(RunConfigTest, RoundTripsThroughJson) {
  const json d = default_config_json();
  EXPECT_EQ(to_json(parse_run_config(d)), d);
  json doc = merge_config(json::parse(R"({"train": {"lr": 0.005}, "generation": {"temperature": 0.94}})"));
  const RunConfig c = parse_run_config(doc);
  EXPECT_EQ(c.train.lr, 0.005);
  EXPECT_EQ(c.generation.config.temperature.label(), "0.94");
  EXPECT_EQ(to_json(c), doc);
}

TEST(RunConfigTest, UnknownKeysAreNamed) {
  EXPECT_EQ(error_key([] { merge_config(json::parse(R"({"modell": {}})")); }), "modell");
  EXPECT_EQ(error_key([] { merge_config(json::parse(R"({"model": {"layer": 2}})")); }), "model.layer");
  EXPECT_EQ(error_key([] {
              json d = default_config_json();
              apply_override(d, "train.lrr=1");
            }),
            "train.lrr");
  EXPECT_EQ(error_key([] {
              json d = default_config_json();
              d["curriculum"]["stages"][0]["frame"] = 3;
              parse_run_config(d);
            }),
            "curriculum.stages.frame");
}

TEST(RunConfigTest, OverridesParseValues) {
  json d = default_config_json();
  apply_override(d, "train.lr=3e-4");
  apply_override(d, "model.positional=sincos");
  apply_override(d, "generation.use_cache=false");
  apply_override(d, "curriculum.stages=[{\"frames\":2,\"steps\":5}]");
  EXPECT_EQ(d["train"]["lr"], 3e-4);
  EXPECT_EQ(d["model"]["positional"], "sincos");
  EXPECT_EQ(d["generation"]["use_cache"], false);
  EXPECT_EQ(d["curriculum"]["stages"].size(), 1u);
  EXPECT_EQ(error_key([&] { apply_override(d, "train"); }), "train");
  EXPECT_EQ(error_key([&] { apply_override(d, "train={}"); }), "train");
}

TEST(RunConfigTest, BadValuesNameTheirKey) {
  auto key_for = [](const std::string& assignment) {
    return error_key([&] {
      json d = default_config_json();
      apply_override(d, assignment);
      parse_run_config(d);
    });
  };
  EXPECT_EQ(key_for("train.lr=-1"), "train.lr");
  EXPECT_EQ(key_for("train.lr=\"fast\""), "train.lr");
  EXPECT_EQ(key_for("train.mode=joint"), "train.mode");
  EXPECT_EQ(key_for("generation.temperature=1.5"), "generation.temperature");
  EXPECT_EQ(key_for("generation.temperature=hot"), "generation.temperature");
  EXPECT_EQ(key_for("generation.class=sideways"), "generation.class");
  EXPECT_EQ(key_for("generation.ar_steps=65"), "generation.ar_steps");
  EXPECT_EQ(key_for("model.positional=alibi"), "model.positional");
  EXPECT_EQ(key_for("curriculum.stages=[{\"frames\":9,\"steps\":1}]"), "curriculum.stages");
  EXPECT_EQ(key_for("bench.temperatures=[1.2]"), "bench.temperatures");
  EXPECT_EQ(key_for("model.heads=3"), "model.heads");
  EXPECT_EQ(key_for("tokenizer.scale=0"), "tokenizer.scale");
}

TEST(RunConfigTest, HashIsFnv1a64OfTheDump) {
  EXPECT_EQ(config_hash(json("a")), "d4272417d7c77eea");  // bytes "a" with quotes
  EXPECT_EQ(config_hash(json::parse(R"({"x":1})")), "bdd3d53c3a0b3fd6");
  json d = default_config_json();
  const std::string h = config_hash(d);
  EXPECT_EQ(h.size(), 16u);
  apply_override(d, "train.seed=1");
  EXPECT_NE(config_hash(d), h);
}

TEST(RunConfigTest, ReadsFiles) {
  const auto dir = std::filesystem::temp_directory_path() / ("vmar_cfg_" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  const auto good = (dir / "good.json").string();
  std::ofstream(good) << R"({"train": {"batch_size": 4}})";
  EXPECT_EQ(read_config_file(good)["train"]["batch_size"], 4);
  const auto bad = (dir / "bad.json").string();
  std::ofstream(bad) << "{ not json";
  EXPECT_THROW(read_config_file(bad), ConfigError);
  EXPECT_THROW(read_config_file((dir / "missing.json").string()), IoError);
  std::filesystem::remove_all(dir);
}

TEST(RunConfigTest, ModelConfigRoundTrip) {
  ModelConfig m = parse_run_config(default_config_json()).model;
  m.backbone.positional = PositionalMode::SinCos;
  m.backbone.model_dim = 48;
  m.backbone.heads = 4;
  m.backbone.head_dim = 12;
  m.backbone.rope.head_dim = 12;
  m.backbone.rope.axis_split = {4, 4, 4};
  m.sync();
  m.grid_height = 12;
  const ModelConfig back = model_config_from_json(model_config_to_json(m));
  EXPECT_EQ(model_config_to_json(back), model_config_to_json(m));
  EXPECT_EQ(back.grid_height, 12u);
  EXPECT_EQ(back.backbone.positional, PositionalMode::SinCos);
}

TEST(RunConfigTest, ShippedDefaultFileMatchesDefaults) {
  EXPECT_EQ(read_config_file(VMAR_SOURCE_DIR "/configs/default.json"), default_config_json());
}

}  // namespace
}  // namespace vmar
