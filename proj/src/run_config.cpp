#include "vmar/run_config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "vmar/errors.hpp"

namespace vmar {

using nlohmann::json;

namespace {

// Walks a dotted path; every segment must exist.
const json& at_path(const json& doc, const std::string& key) {
  const json* cur = &doc;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = key.find('.', start);
    const std::string seg = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!cur->is_object() || !cur->contains(seg)) throw ConfigError(key, "missing key");
    cur = &(*cur)[seg];
    if (dot == std::string::npos) return *cur;
    start = dot + 1;
  }
}

template <typename T>
T get(const json& doc, const std::string& key) {
  const json& v = at_path(doc, key);
  try {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(key, "expected a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(key, "expected an integer");
      if (std::is_unsigned_v<T> && v.get<long long>() < 0)
        throw ConfigError(key, "expected a non-negative integer");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(key, "expected a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(key, "expected a string");
    }
    return v.get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(key, e.what());
  }
}

void merge_into(json& base, const json& doc, const std::string& prefix) {
  if (!doc.is_object()) throw ConfigError(prefix, "expected an object");
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError(key, "unknown config key");
    json& slot = base[it.key()];
    if (slot.is_object())
      merge_into(slot, it.value(), key);
    else
      slot = it.value();
  }
}

const char* positional_name(PositionalMode m) { return m == PositionalMode::Rope ? "rope" : "sincos"; }

}  // namespace

GridDims RunConfig::latent_dims() const {
  return make_tokenizer().latent_dims(tokenizer.pixel_frames, tokenizer.height_px,
                                      tokenizer.width_px);
}

CorpusConfig RunConfig::corpus_config() const {
  CorpusConfig c;
  c.size = curriculum.corpus_size;
  c.pixel_frames = tokenizer.pixel_frames;
  c.height_px = tokenizer.height_px;
  c.width_px = tokenizer.width_px;
  c.max_speed = curriculum.max_speed;
  c.seed = curriculum.corpus_seed;
  return c;
}

ToyTokenizer RunConfig::make_tokenizer() const { return ToyTokenizer(tokenizer.patch, tokenizer.seed, tokenizer.scale); }

json model_section_json(const ModelConfig& m) {
  const auto& b = m.backbone;
  json j;
  j["layers"] = b.layers;
  j["model_dim"] = b.model_dim;
  j["heads"] = b.heads;
  j["head_dim"] = b.head_dim;
  j["mlp_ratio"] = b.mlp_ratio;
  j["num_classes"] = b.num_classes;
  j["positional"] = positional_name(b.positional);
  j["rope_split"] = b.rope.axis_split;
  j["rope_theta"] = b.rope.theta_base;
  j["cross_attention"] = b.cross_attention;
  j["head_width"] = m.head.width;
  j["head_blocks"] = m.head.blocks;
  j["head_freq_dim"] = m.head.freq_dim;
  j["diffusion_steps"] = m.diffusion_steps;
  return j;
}

json model_config_to_json(const ModelConfig& m) {
  json j = model_section_json(m);
  j["token_dim"] = m.backbone.token_dim;
  j["grid_height"] = m.grid_height;
  j["grid_width"] = m.grid_width;
  return j;
}

// Fields that depend on the tokenizer or on training state are not part of
// the model section; they are stored next to it in checkpoints.
static ModelConfig model_from(const json& doc, const std::string& p) {
  ModelConfig m;
  auto& b = m.backbone;
  b.layers = get<std::size_t>(doc, p + "layers");
  b.model_dim = get<std::size_t>(doc, p + "model_dim");
  b.heads = get<std::size_t>(doc, p + "heads");
  b.head_dim = get<std::size_t>(doc, p + "head_dim");
  b.mlp_ratio = get<std::size_t>(doc, p + "mlp_ratio");
  b.num_classes = get<std::size_t>(doc, p + "num_classes");
  const auto pos = get<std::string>(doc, p + "positional");
  if (pos == "rope")
    b.positional = PositionalMode::Rope;
  else if (pos == "sincos")
    b.positional = PositionalMode::SinCos;
  else
    throw ConfigError(p + "positional", "expected \"rope\" or \"sincos\", got \"" + pos + "\"");
  const json& split = at_path(doc, p + "rope_split");
  if (!split.is_array() || split.size() != 3)
    throw ConfigError(p + "rope_split", "expected three integers");
  b.rope.head_dim = b.head_dim;
  for (std::size_t i = 0; i < 3; ++i) {
    if (!split[i].is_number_unsigned()) throw ConfigError(p + "rope_split", "expected three integers");
    b.rope.axis_split[i] = split[i].get<std::size_t>();
  }
  b.rope.theta_base = get<double>(doc, p + "rope_theta");
  b.cross_attention = get<bool>(doc, p + "cross_attention");
  m.head.width = get<std::size_t>(doc, p + "head_width");
  m.head.blocks = get<std::size_t>(doc, p + "head_blocks");
  m.head.freq_dim = get<std::size_t>(doc, p + "head_freq_dim");
  m.diffusion_steps = get<std::size_t>(doc, p + "diffusion_steps");
  return m;
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig m = model_from(j, "");
  m.backbone.token_dim = get<std::size_t>(j, "token_dim");
  m.grid_height = get<std::size_t>(j, "grid_height");
  m.grid_width = get<std::size_t>(j, "grid_width");
  m.sync();
  m.validate();
  return m;
}

json to_json(const RunConfig& c) {
  json j;
  j["model"] = model_section_json(c.model);
  j["model"]["init_seed"] = c.init_seed;

  j["tokenizer"] = {{"patch", c.tokenizer.patch},
                    {"seed", c.tokenizer.seed},
                    {"scale", c.tokenizer.scale},
                    {"pixel_frames", c.tokenizer.pixel_frames},
                    {"height_px", c.tokenizer.height_px},
                    {"width_px", c.tokenizer.width_px}};

  const auto& t = c.train;
  j["train"] = {{"mode", t.mode == TrainMode::NextFrame ? "next_frame" : "total_mask"},
                {"lr", t.lr},
                {"beta1", t.beta1},
                {"beta2", t.beta2},
                {"weight_decay", t.weight_decay},
                {"adam_eps", t.adam_eps},
                {"batch_size", t.batch_size},
                {"mask_ratio_min", t.mask_ratio_min},
                {"mask_ratio_max", t.mask_ratio_max},
                {"cond_drop_prob", t.cond_drop_prob},
                {"diffusion_batch_mul", t.diffusion_batch_mul},
                {"truncate_future", t.truncate_future},
                {"seed", t.seed},
                {"max_steps", c.max_steps}};

  json stages = json::array();
  for (const auto& s : c.curriculum.stages) stages.push_back({{"frames", s.frames}, {"steps", s.steps}});
  j["curriculum"] = {{"corpus_size", c.curriculum.corpus_size},
                     {"corpus_seed", c.curriculum.corpus_seed},
                     {"max_speed", c.curriculum.max_speed},
                     {"stages", stages},
                     {"finetune_steps", c.curriculum.finetune_steps},
                     {"finetune_height_px", c.curriculum.finetune_height_px},
                     {"finetune_width_px", c.curriculum.finetune_width_px}};

  const auto& g = c.generation.config;
  json temp = g.temperature.mode == TemperaturePolicy::Mode::Progressive ? json("progressive")
                                                                          : json(g.temperature.value);
  j["generation"] = {{"frames", g.frames},
                     {"height", g.height},
                     {"width", g.width},
                     {"ar_steps", g.ar_steps},
                     {"infer_steps", g.infer_steps},
                     {"cfg_scale", g.cfg_scale},
                     {"temperature", temp},
                     {"temperature_every_step", g.temperature_every_step},
                     {"order", g.order == TokenOrder::RandomPerFrame ? "per_frame" : "per_step"},
                     {"use_cache", g.use_cache},
                     {"seed", g.seed},
                     {"class", c.generation.cls},
                     {"prefix_frames", c.generation.prefix_frames},
                     {"start_row", c.generation.start_row},
                     {"start_col", c.generation.start_col},
                     {"speed", c.generation.speed}};

  const auto& b = c.bench;
  j["bench"] = {{"seeds", b.seeds},
                {"frames", b.frames},
                {"ar_steps", b.ar_steps},
                {"infer_steps", b.infer_steps},
                {"late_frames", b.late_frames},
                {"temperatures", b.temperatures},
                {"timing_frames", b.timing_frames},
                {"timing_ar_steps", b.timing_ar_steps},
                {"timing_infer_steps", b.timing_infer_steps}};
  return j;
}

json default_config_json() {
  RunConfig c;
  // Desk-scale settings: tokens are mostly exact zeros, so they are scaled up,
  // and two wide heads with a short RoPE wavelength resolve single-cell offsets.
  c.tokenizer.scale = 4.0;
  c.model.backbone.heads = 2;
  c.model.backbone.head_dim = 32;
  c.model.backbone.rope = RoPEFreqs::for_head_dim(32, 100.0);
  c.model.sync();
  c.train.lr = 1e-3;
  c.curriculum.stages = {{3, 500, 0, 0}, {5, 900, 0, 0}, {7, 1100, 0, 0}};
  return to_json(c);
}

json merge_config(const json& doc) {
  json base = default_config_json();
  merge_into(base, doc, "");
  return base;
}

void apply_override(json& doc, std::string_view assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0)
    throw ConfigError(std::string(assignment), "override must look like key=value");
  const std::string key(assignment.substr(0, eq));
  const std::string raw(assignment.substr(eq + 1));
  json* cur = &doc;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = key.find('.', start);
    const std::string seg = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!cur->is_object() || !cur->contains(seg)) throw ConfigError(key, "unknown config key");
    cur = &(*cur)[seg];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (cur->is_object()) throw ConfigError(key, "cannot override a whole section");
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  *cur = std::move(value);
}

RunConfig parse_run_config(const json& doc) {
  RunConfig c;
  c.tokenizer.seed = get<std::uint64_t>(doc, "tokenizer.seed");
  c.tokenizer.scale = get<double>(doc, "tokenizer.scale");
  if (!(c.tokenizer.scale > 0) || !std::isfinite(c.tokenizer.scale))
    throw ConfigError("tokenizer.scale", "must be positive");
  c.tokenizer.pixel_frames = get<std::size_t>(doc, "tokenizer.pixel_frames");
  c.tokenizer.height_px = get<std::size_t>(doc, "tokenizer.height_px");
  c.tokenizer.width_px = get<std::size_t>(doc, "tokenizer.width_px");
  const json& patch = at_path(doc, "tokenizer.patch");
  if (!patch.is_array() || patch.size() != 3)
    throw ConfigError("tokenizer.patch", "expected three positive integers");
  for (std::size_t i = 0; i < 3; ++i) {
    if (!patch[i].is_number_unsigned() || patch[i].get<std::size_t>() == 0)
      throw ConfigError("tokenizer.patch", "expected three positive integers");
    c.tokenizer.patch[i] = patch[i].get<std::size_t>();
  }
  GridDims dims;
  try {
    dims = c.latent_dims();
  } catch (const ShapeError& e) {
    throw ConfigError("tokenizer", e.what());
  }

  c.model = model_from(doc, "model.");
  c.init_seed = get<std::uint64_t>(doc, "model.init_seed");
  c.model.backbone.token_dim = c.tokenizer.patch[0] * c.tokenizer.patch[1] * c.tokenizer.patch[2];
  c.model.grid_height = dims.height;
  c.model.grid_width = dims.width;
  c.model.sync();
  try {
    c.model.validate();
  } catch (const ShapeError& e) {
    throw ConfigError("model.rope_split", e.what());
  }

  auto& t = c.train;
  const auto mode = get<std::string>(doc, "train.mode");
  if (mode == "next_frame")
    t.mode = TrainMode::NextFrame;
  else if (mode == "total_mask")
    t.mode = TrainMode::TotalMask;
  else
    throw ConfigError("train.mode", "expected \"next_frame\" or \"total_mask\", got \"" + mode + "\"");
  t.lr = get<double>(doc, "train.lr");
  t.beta1 = get<double>(doc, "train.beta1");
  t.beta2 = get<double>(doc, "train.beta2");
  t.weight_decay = get<double>(doc, "train.weight_decay");
  t.adam_eps = get<double>(doc, "train.adam_eps");
  t.batch_size = get<std::size_t>(doc, "train.batch_size");
  t.mask_ratio_min = get<double>(doc, "train.mask_ratio_min");
  t.mask_ratio_max = get<double>(doc, "train.mask_ratio_max");
  t.cond_drop_prob = get<double>(doc, "train.cond_drop_prob");
  t.diffusion_batch_mul = get<std::size_t>(doc, "train.diffusion_batch_mul");
  t.truncate_future = get<bool>(doc, "train.truncate_future");
  t.seed = get<std::uint64_t>(doc, "train.seed");
  c.max_steps = get<std::size_t>(doc, "train.max_steps");
  t.validate();

  auto& cu = c.curriculum;
  cu.corpus_size = get<std::size_t>(doc, "curriculum.corpus_size");
  cu.corpus_seed = get<std::uint64_t>(doc, "curriculum.corpus_seed");
  cu.max_speed = get<int>(doc, "curriculum.max_speed");
  if (cu.max_speed < 1) throw ConfigError("curriculum.max_speed", "must be at least 1");
  if (cu.corpus_size < t.batch_size)
    throw ConfigError("curriculum.corpus_size", "smaller than train.batch_size");
  const json& stages = at_path(doc, "curriculum.stages");
  if (!stages.is_array() || stages.empty())
    throw ConfigError("curriculum.stages", "expected a non-empty list");
  std::size_t prev = 0;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const std::string k = "curriculum.stages";
    if (!stages[i].is_object()) throw ConfigError(k, "each stage needs frames and steps");
    for (auto it = stages[i].begin(); it != stages[i].end(); ++it)
      if (it.key() != "frames" && it.key() != "steps")
        throw ConfigError(k + "." + it.key(), "unknown config key");
    CurriculumStage st;
    st.frames = get<std::size_t>(stages[i], "frames");
    st.steps = get<std::size_t>(stages[i], "steps");
    st.height = dims.height;
    st.width = dims.width;
    if (st.frames == 0 || st.frames > dims.frames)
      throw ConfigError(k, "stage frames exceed the corpus clip length");
    if (st.frames < prev) throw ConfigError(k, "stage frame counts must be nondecreasing");
    prev = st.frames;
    cu.stages.push_back(st);
  }
  cu.finetune_steps = get<std::size_t>(doc, "curriculum.finetune_steps");
  cu.finetune_height_px = get<std::size_t>(doc, "curriculum.finetune_height_px");
  cu.finetune_width_px = get<std::size_t>(doc, "curriculum.finetune_width_px");

  auto& gs = c.generation;
  auto& g = gs.config;
  g.frames = get<std::size_t>(doc, "generation.frames");
  g.height = get<std::size_t>(doc, "generation.height");
  g.width = get<std::size_t>(doc, "generation.width");
  g.ar_steps = get<std::size_t>(doc, "generation.ar_steps");
  g.infer_steps = get<std::size_t>(doc, "generation.infer_steps");
  g.cfg_scale = get<double>(doc, "generation.cfg_scale");
  const json& temp = at_path(doc, "generation.temperature");
  if (temp.is_string() && temp.get<std::string>() == "progressive")
    g.temperature = TemperaturePolicy::progressive();
  else if (temp.is_number())
    g.temperature = TemperaturePolicy::constant(temp.get<double>());
  else
    throw ConfigError("generation.temperature", "expected \"progressive\" or a number");
  g.temperature_every_step = get<bool>(doc, "generation.temperature_every_step");
  const auto order = get<std::string>(doc, "generation.order");
  if (order == "per_frame")
    g.order = TokenOrder::RandomPerFrame;
  else if (order == "per_step")
    g.order = TokenOrder::RandomPerStep;
  else
    throw ConfigError("generation.order", "expected \"per_frame\" or \"per_step\"");
  g.use_cache = get<bool>(doc, "generation.use_cache");
  g.seed = get<std::uint64_t>(doc, "generation.seed");
  g.validate();
  gs.cls = get<std::string>(doc, "generation.class");
  if (!parse_motion_class(gs.cls))
    throw ConfigError("generation.class", "unknown class \"" + gs.cls + "\"");
  gs.prefix_frames = get<std::size_t>(doc, "generation.prefix_frames");
  if (gs.prefix_frames == 0 || gs.prefix_frames >= g.frames)
    throw ConfigError("generation.prefix_frames", "must be in [1, generation.frames)");
  gs.start_row = get<int>(doc, "generation.start_row");
  gs.start_col = get<int>(doc, "generation.start_col");
  gs.speed = get<int>(doc, "generation.speed");

  auto& b = c.bench;
  b.seeds = get<std::size_t>(doc, "bench.seeds");
  b.frames = get<std::size_t>(doc, "bench.frames");
  b.ar_steps = get<std::size_t>(doc, "bench.ar_steps");
  b.infer_steps = get<std::size_t>(doc, "bench.infer_steps");
  b.late_frames = get<std::size_t>(doc, "bench.late_frames");
  b.timing_frames = get<std::size_t>(doc, "bench.timing_frames");
  b.timing_ar_steps = get<std::size_t>(doc, "bench.timing_ar_steps");
  b.timing_infer_steps = get<std::size_t>(doc, "bench.timing_infer_steps");
  const json& temps = at_path(doc, "bench.temperatures");
  if (!temps.is_array()) throw ConfigError("bench.temperatures", "expected a list of numbers");
  b.temperatures.clear();
  for (const auto& v : temps) {
    if (!v.is_number() || !(v.get<double>() > 0 && v.get<double>() <= 1))
      throw ConfigError("bench.temperatures", "values must be numbers in (0, 1]");
    b.temperatures.push_back(v.get<double>());
  }
  if (b.seeds == 0) throw ConfigError("bench.seeds", "must be positive");
  if (b.frames < 2) throw ConfigError("bench.frames", "need at least two frames");
  if (b.timing_frames < 2) throw ConfigError("bench.timing_frames", "need at least two frames");
  if (b.late_frames == 0 || b.late_frames >= b.frames)
    throw ConfigError("bench.late_frames", "must be in [1, bench.frames)");
  const std::size_t tpf = dims.tokens_per_frame();
  if (b.ar_steps == 0 || b.ar_steps > tpf)
    throw ConfigError("bench.ar_steps", "must be in [1, tokens per frame]");
  if (b.timing_ar_steps == 0 || b.timing_ar_steps > tpf)
    throw ConfigError("bench.timing_ar_steps", "must be in [1, tokens per frame]");
  if (b.infer_steps == 0) throw ConfigError("bench.infer_steps", "must be positive");
  if (b.timing_infer_steps == 0) throw ConfigError("bench.timing_infer_steps", "must be positive");
  return c;
}

json read_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  json doc = json::parse(ss.str(), nullptr, false);
  if (doc.is_discarded()) throw ConfigError("", "config file " + path + " is not valid JSON");
  return doc;
}

std::string config_hash(const json& doc) {
  const std::string s = doc.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace vmar
