#include "docseg/checkpoint.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "docseg/errors.hpp"

namespace docseg {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'D', 'S', 'C', 'K', 'P', 'T', '0', '1'};

std::string dtype_name(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32: return "float32";
    case torch::kFloat64: return "float64";
    case torch::kInt64: return "int64";
    default: throw InputError(std::string("checkpoint: unsupported dtype ") + c10::toString(t));
  }
}

torch::ScalarType dtype_from(const std::string& s) {
  if (s == "float32") return torch::kFloat32;
  if (s == "float64") return torch::kFloat64;
  if (s == "int64") return torch::kInt64;
  throw InputError("checkpoint: unknown dtype '" + s + "'");
}

}  // namespace

RunConfig Checkpoint::run_config() const { return RunConfig::from_json(config); }

void save_checkpoint(const std::string& path, DocSegmenter& model, const torch::optim::Adam* optimizer,
                     const RunConfig& cfg, int64_t step) {
  std::map<std::string, torch::Tensor> tensors;
  json adam_steps = json::object();
  for (const auto& p : model->named_parameters()) {
    tensors["param." + p.key()] = p.value().detach();
    if (!optimizer) continue;
    const auto& state = optimizer->state();
    auto it = state.find(p.value().unsafeGetTensorImpl());
    if (it == state.end()) continue;
    const auto& s = static_cast<const torch::optim::AdamParamState&>(*it->second);
    tensors["adam." + p.key() + ".exp_avg"] = s.exp_avg();
    tensors["adam." + p.key() + ".exp_avg_sq"] = s.exp_avg_sq();
    adam_steps[p.key()] = s.step();
  }
  for (const auto& b : model->named_buffers()) tensors["buffer." + b.key()] = b.value().detach();

  json header;
  header["format"] = "docseg-checkpoint/1";
  header["step"] = step;
  header["preset"] = cfg.preset;
  header["config"] = cfg.to_json();
  header["adam_steps"] = adam_steps;
  header["tensors"] = json::array();
  int64_t offset = 0;
  std::vector<torch::Tensor> blobs;
  for (const auto& [name, t] : tensors) {
    auto c = t.to(torch::kCPU).contiguous();
    const int64_t nbytes = c.numel() * static_cast<int64_t>(c.element_size());
    header["tensors"].push_back(
        {{"name", name}, {"dtype", dtype_name(c.scalar_type())}, {"shape", c.sizes().vec()}, {"offset", offset},
         {"nbytes", nbytes}});
    offset += nbytes;
    blobs.push_back(c);
  }
  const auto text = header.dump();
  const uint64_t len = text.size();

  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(target.parent_path(), ec);
    if (ec) throw IoError(target.parent_path().string(), "cannot create directory: " + ec.message());
  }
  const auto tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(tmp, "cannot open for writing");
    out.write(kMagic, sizeof(kMagic));
    char lenbuf[8];
    for (int i = 0; i < 8; ++i) lenbuf[i] = static_cast<char>((len >> (8 * i)) & 0xff);
    out.write(lenbuf, 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& b : blobs)
      out.write(static_cast<const char*>(b.data_ptr()), static_cast<std::streamsize>(b.numel() * b.element_size()));
    if (!out) throw IoError(tmp, "write failed");
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) throw IoError(path, "cannot move checkpoint into place: " + ec.message());
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, "cannot open checkpoint");
  char magic[8];
  unsigned char lenbuf[8];
  in.read(magic, 8);
  in.read(reinterpret_cast<char*>(lenbuf), 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) throw IoError(path, "not a checkpoint file");
  uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<uint64_t>(lenbuf[i]) << (8 * i);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError(path, "truncated header");

  Checkpoint ck;
  json header;
  try {
    header = json::parse(text);
    ck.step = header.at("step").get<int64_t>();
    ck.preset = header.at("preset").get<std::string>();
    ck.config = header.at("config");
    for (auto it = header.at("adam_steps").begin(); it != header.at("adam_steps").end(); ++it)
      ck.adam_steps[it.key()] = it.value().get<int64_t>();
  } catch (const json::exception& e) {
    throw IoError(path, std::string("bad header: ") + e.what());
  }
  const auto base = in.tellg();
  for (const auto& entry : header.at("tensors")) {
    const auto name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<std::vector<int64_t>>();
    auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype_from(entry.at("dtype").get<std::string>())));
    const auto nbytes = entry.at("nbytes").get<int64_t>();
    if (nbytes != t.numel() * static_cast<int64_t>(t.element_size())) throw IoError(path, "size mismatch for " + name);
    in.seekg(base + static_cast<std::streamoff>(entry.at("offset").get<int64_t>()));
    in.read(static_cast<char*>(t.data_ptr()), nbytes);
    if (!in) throw IoError(path, "truncated data for " + name);
    ck.tensors[name] = t;
  }
  return ck;
}

void load_model_state(DocSegmenter& model, const Checkpoint& ckpt) {
  torch::NoGradGuard guard;
  auto copy = [&](const std::string& kind, const std::string& name, torch::Tensor& dst) {
    auto it = ckpt.tensors.find(kind + "." + name);
    if (it == ckpt.tensors.end()) throw ConfigError("checkpoint lacks " + kind + " '" + name + "'");
    if (it->second.sizes() != dst.sizes()) {
      std::ostringstream msg;
      msg << "checkpoint " << kind << " '" << name << "' has shape " << it->second.sizes() << ", model expects "
          << dst.sizes();
      throw ConfigError(msg.str());
    }
    dst.copy_(it->second);
  };
  for (auto& p : model->named_parameters()) copy("param", p.key(), p.value());
  for (auto& b : model->named_buffers()) copy("buffer", b.key(), b.value());
}

void load_optimizer_state(torch::optim::Adam& optimizer, DocSegmenter& model, const Checkpoint& ckpt) {
  auto& state = optimizer.state();
  for (auto& p : model->named_parameters()) {
    auto step = ckpt.adam_steps.find(p.key());
    if (step == ckpt.adam_steps.end()) continue;
    auto s = std::make_unique<torch::optim::AdamParamState>();
    s->step(step->second);
    s->exp_avg(ckpt.tensors.at("adam." + p.key() + ".exp_avg").to(p.value().scalar_type()).clone());
    s->exp_avg_sq(ckpt.tensors.at("adam." + p.key() + ".exp_avg_sq").to(p.value().scalar_type()).clone());
    state[p.value().unsafeGetTensorImpl()] = std::move(s);
  }
}

}  // namespace docseg
