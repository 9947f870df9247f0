#include "vmar/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include <nlohmann/json.hpp>

#include "vmar/errors.hpp"
#include "vmar/run_config.hpp"

namespace vmar {

namespace {

constexpr char kMagic[4] = {'V', 'M', 'A', 'R'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f32(std::vector<std::uint8_t>& out, float f) {
  std::uint32_t v;
  std::memcpy(&v, &f, 4);
  put_u32(out, v);
}

std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > 0xffffffffULL) throw ArgumentError(std::string("checkpoint: ") + what + " too large");
  return static_cast<std::uint32_t>(v);
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == b_.size(); }

  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    if (b_.size() - pos_ < n) throw FormatError(std::string("truncated ") + what, pos_);
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint32_t u32(const char* what) {
    auto s = take(4, what);
    return static_cast<std::uint32_t>(s[0]) | static_cast<std::uint32_t>(s[1]) << 8 |
           static_cast<std::uint32_t>(s[2]) << 16 | static_cast<std::uint32_t>(s[3]) << 24;
  }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

using TensorMap = std::map<std::string, const Tensor<float>*>;

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Model<float>& model, std::size_t step,
                                               const std::string& rng_state,
                                               const AdamState* adam) {
  TensorMap tensors;
  model.params().visit([&](const std::string& n, const Tensor<float>& t) { tensors[n] = &t; });
  if (adam) {
    adam->m.visit([&](const std::string& n, const Tensor<float>& t) { tensors["optim.m." + n] = &t; });
    adam->v.visit([&](const std::string& n, const Tensor<float>& t) { tensors["optim.v." + n] = &t; });
  }

  nlohmann::json header;
  header["model"] = model_config_to_json(model.config());
  header["step"] = step;
  header["rng"] = rng_state;
  header["optimizer"] = adam != nullptr;
  header["tensor_count"] = tensors.size();
  const std::string hs = header.dump();

  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  out.push_back(kCheckpointVersion);
  put_u32(out, checked_u32(hs.size(), "header"));
  out.insert(out.end(), hs.begin(), hs.end());
  for (const auto& [name, t] : tensors) {
    put_u32(out, checked_u32(name.size(), "name"));
    out.insert(out.end(), name.begin(), name.end());
    put_u32(out, checked_u32(t->shape.size(), "rank"));
    for (std::size_t d : t->shape) put_u32(out, checked_u32(d, "dim"));
    for (float f : t->data) put_f32(out, f);
  }
  return out;
}

CheckpointData parse_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  auto magic = r.take(4, "magic");
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw FormatError("bad magic", 0);
  const std::uint8_t version = r.take(1, "version")[0];
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);
  const std::uint32_t hlen = r.u32("header length");
  const std::size_t hoff = r.offset();
  auto hb = r.take(hlen, "header");
  nlohmann::json header =
      nlohmann::json::parse(hb.begin(), hb.end(), nullptr, false);
  if (header.is_discarded() || !header.is_object()) throw FormatError("header is not JSON", hoff);

  CheckpointData data;
  bool has_adam = false;
  std::size_t count = 0;
  try {
    data.model = Model<float>(model_config_from_json(header.at("model")));
    data.step = header.at("step").get<std::size_t>();
    data.rng_state = header.at("rng").get<std::string>();
    has_adam = header.at("optimizer").get<bool>();
    count = header.at("tensor_count").get<std::size_t>();
    if (!data.rng_state.empty()) Rng().restore(data.rng_state);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad header: ") + e.what(), hoff);
  } catch (const Error& e) {
    throw FormatError(std::string("bad header: ") + e.what(), hoff);
  }

  std::map<std::string, Tensor<float>*> slots;
  data.model.params().visit([&](const std::string& n, Tensor<float>& t) { slots[n] = &t; });
  if (has_adam) {
    data.adam.emplace(AdamState{ModelParams<float>(data.model.config()),
                                ModelParams<float>(data.model.config())});
    data.adam->m.visit([&](const std::string& n, Tensor<float>& t) { slots["optim.m." + n] = &t; });
    data.adam->v.visit([&](const std::string& n, Tensor<float>& t) { slots["optim.v." + n] = &t; });
  }
  if (count != slots.size())
    throw FormatError("tensor count " + std::to_string(count) + " does not match the model (" +
                          std::to_string(slots.size()) + ")",
                      hoff);

  std::string prev;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t rec = r.offset();
    const std::uint32_t nlen = r.u32("tensor name length");
    auto nb = r.take(nlen, "tensor name");
    std::string name(nb.begin(), nb.end());
    if (i > 0 && name <= prev) throw FormatError("tensor records not sorted by name", rec);
    auto it = slots.find(name);
    if (it == slots.end()) throw FormatError("unexpected tensor " + name, rec);
    Tensor<float>& t = *it->second;
    const std::uint32_t rank = r.u32("tensor rank");
    if (rank != t.shape.size()) throw FormatError("rank mismatch for " + name, rec);
    for (std::size_t d = 0; d < rank; ++d) {
      const std::size_t off = r.offset();
      if (r.u32("tensor dims") != t.shape[d]) throw FormatError("shape mismatch for " + name, off);
    }
    auto payload = r.take(t.size() * 4, "tensor payload");
    for (std::size_t k = 0; k < t.size(); ++k) {
      const std::uint32_t v = static_cast<std::uint32_t>(payload[4 * k]) |
                              static_cast<std::uint32_t>(payload[4 * k + 1]) << 8 |
                              static_cast<std::uint32_t>(payload[4 * k + 2]) << 16 |
                              static_cast<std::uint32_t>(payload[4 * k + 3]) << 24;
      std::memcpy(&t.data[k], &v, 4);
    }
    prev = std::move(name);
  }
  if (!r.done()) throw FormatError("trailing bytes after the last tensor", r.offset());
  return data;
}

namespace {

void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    std::remove(tmp.c_str());
    throw IoError("cannot move checkpoint into place at " + path);
  }
}

}  // namespace

void save_checkpoint(const std::string& path, const Model<float>& model) {
  write_file(path, serialize_checkpoint(model, 0, "", nullptr));
}

void save_checkpoint(const std::string& path, const Trainer& trainer) {
  write_file(path, serialize_checkpoint(trainer.model(), trainer.step(), trainer.rng_state(),
                                        &trainer.adam()));
}

CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

Trainer resume_trainer(CheckpointData data, const TrainConfig& cfg) {
  if (!data.adam || data.rng_state.empty())
    throw StateError("checkpoint holds no optimizer state to resume from");
  Trainer t(std::move(data.model), cfg);
  t.restore(data.step, data.rng_state, std::move(*data.adam));
  return t;
}

}  // namespace vmar
