#include "roe/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "roe/errors.hpp"
#include "roe/routing.hpp"

namespace roe {

namespace {

constexpr const char* kMagic = "ROE-CHECKPOINT 1";

std::uint64_t to_little(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  return __builtin_bswap64(v);
}

}  // namespace

const std::string* Checkpoint::find_meta(const std::string& key) const {
  for (const auto& [k, v] : meta)
    if (k == key) return &v;
  return nullptr;
}

const std::string& Checkpoint::meta_or_throw(const std::string& key) const {
  const std::string* v = find_meta(key);
  if (!v) throw CheckpointError("checkpoint has no '" + key + "' entry");
  return *v;
}

const Tensor* Checkpoint::find_tensor(const std::string& name) const {
  for (const auto& [k, t] : tensors)
    if (k == name) return &t;
  return nullptr;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << kMagic << '\n';
  for (const auto& [k, v] : ckpt.meta) {
    if (k.find_first_of(" \n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw CheckpointError("meta entry '" + k + "' contains a separator");
    }
    out << "meta " << k << ' ' << v << '\n';
  }
  for (const auto& [name, t] : ckpt.tensors) {
    out << "tensor " << name << " f64 " << t.rank();
    for (std::size_t e : t.shape()) out << ' ' << e;
    out << '\n';
  }
  out << "data\n";
  for (const auto& [name, t] : ckpt.tensors) {
    for (double v : t.data()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      bits = to_little(bits);
      out.write(reinterpret_cast<const char*>(&bits), sizeof bits);
    }
  }
  if (!out) throw IoError("write to " + path.string() + " failed");
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kMagic) {
    throw CheckpointError(path.string() + " is not a checkpoint (bad header)");
  }
  Checkpoint ck;
  std::vector<Shape> shapes;
  bool saw_data = false;
  while (std::getline(in, line)) {
    if (line == "data") {
      saw_data = true;
      break;
    }
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "meta") {
      std::string key;
      ls >> key;
      std::string value;
      std::getline(ls, value);
      if (!value.empty() && value[0] == ' ') value.erase(0, 1);
      ck.meta.emplace_back(key, value);
    } else if (kind == "tensor") {
      std::string name, dtype;
      std::size_t rank = 0;
      ls >> name >> dtype >> rank;
      if (!ls || dtype != "f64") throw CheckpointError("bad tensor line in " + path.string() + ": " + line);
      Shape s(rank);
      for (auto& e : s) ls >> e;
      if (!ls) throw CheckpointError("bad tensor shape in " + path.string() + ": " + line);
      ck.tensors.emplace_back(name, Tensor());
      shapes.push_back(std::move(s));
    } else {
      throw CheckpointError("unexpected manifest line in " + path.string() + ": " + line);
    }
  }
  if (!saw_data) throw CheckpointError(path.string() + " has no data section");
  for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
    std::vector<double> values(shape_size(shapes[i]));
    for (double& v : values) {
      std::uint64_t bits;
      if (!in.read(reinterpret_cast<char*>(&bits), sizeof bits)) {
        throw CheckpointError(path.string() + " is truncated inside tensor " + ck.tensors[i].first);
      }
      bits = to_little(bits);
      std::memcpy(&v, &bits, sizeof v);
    }
    ck.tensors[i].second = Tensor(shapes[i], std::move(values));
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw CheckpointError(path.string() + " has trailing bytes after the data section");
  }
  return ck;
}

Checkpoint model_checkpoint(RoeModel& model) {
  Checkpoint ck;
  ck.meta.emplace_back("model_config", model.cfg.to_json().dump());
  for (Parameter* p : model.parameters()) ck.tensors.emplace_back(p->name, p->value);
  return ck;
}

void load_parameters(RoeModel& model, const Checkpoint& ckpt) {
  for (Parameter* p : model.parameters()) {
    const Tensor* t = ckpt.find_tensor(p->name);
    if (!t) throw CheckpointError("checkpoint is missing parameter " + p->name);
    if (t->shape() != p->value.shape()) {
      throw CheckpointError("parameter " + p->name + " has shape " + shape_string(t->shape()) +
                            " in the checkpoint but " + shape_string(p->value.shape()) +
                            " in the model");
    }
    p->value = *t;
  }
}

RoeModel model_from_checkpoint(const Checkpoint& ckpt) {
  ModelConfig cfg;
  try {
    cfg = ModelConfig::from_json(nlohmann::json::parse(ckpt.meta_or_throw("model_config")));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("unreadable model_config: ") + e.what());
  }
  RoeModel model(cfg);
  load_parameters(model, ckpt);
  return model;
}

}  // namespace roe
