#include "roe/config.hpp"

#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "roe/errors.hpp"

namespace roe {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::size_t to_size(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  unsigned long long x = 0;
  try {
    if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
    x = std::stoull(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return static_cast<std::size_t>(x);
}

double to_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double x = 0.0;
  try {
    x = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return x;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::string fmt(double x) {
  std::ostringstream os;
  os.precision(17);
  os << x;
  // Shortest text that reads back exactly.
  for (int p = 1; p <= 17; ++p) {
    std::ostringstream t;
    t.precision(p);
    t << x;
    if (std::stod(t.str()) == x) return t.str();
  }
  return os.str();
}

std::string fmt(bool b) { return b ? "true" : "false"; }

template <class T>
std::string join(const T& xs) {
  std::string out;
  for (const auto& x : xs) {
    if (!out.empty()) out += ", ";
    if constexpr (std::is_same_v<std::decay_t<decltype(x)>, double>) {
      out += fmt(x);
    } else {
      out += std::to_string(x);
    }
  }
  return out;
}

struct Field {
  const char* section;
  const char* key;
  const char* comment;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define SIZE_FIELD(sec, name, member, comment)                                              \
  Field{sec, name, comment,                                                                 \
        [](RunConfig& c, const std::string& k, const std::string& v) { c.member = to_size(k, v); }, \
        [](const RunConfig& c) { return std::to_string(c.member); }}
#define DOUBLE_FIELD(sec, name, member, comment)                                              \
  Field{sec, name, comment,                                                                   \
        [](RunConfig& c, const std::string& k, const std::string& v) { c.member = to_double(k, v); }, \
        [](const RunConfig& c) { return fmt(c.member); }}
#define BOOL_FIELD(sec, name, member, comment)                                              \
  Field{sec, name, comment,                                                                 \
        [](RunConfig& c, const std::string& k, const std::string& v) { c.member = to_bool(k, v); }, \
        [](const RunConfig& c) { return fmt(c.member); }}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      SIZE_FIELD("model", "vocab_size", train.model.vocab_size, "token vocabulary V"),
      SIZE_FIELD("model", "d_model", train.model.d_model, "hidden width d"),
      SIZE_FIELD("model", "n_layers", train.model.n_layers, "decoder layers n"),
      SIZE_FIELD("model", "n_heads", train.model.n_heads, "attention heads h"),
      SIZE_FIELD("model", "d_ff", train.model.d_ff, "feed-forward width"),
      SIZE_FIELD("model", "max_seq_len", train.model.max_seq_len, "position-embedding rows"),
      SIZE_FIELD("model", "adapter_dim", train.model.adapter_dim, "adapter bottleneck c"),
      SIZE_FIELD("model", "max_turns", train.model.max_turns, "routing tokens beyond the image slot (q_max)"),
      DOUBLE_FIELD("model", "temperature", train.model.temperature, "router softmax temperature tau"),
      DOUBLE_FIELD("model", "ln_eps", train.model.ln_eps, "layer-norm epsilon"),

      Field{"data", "families", "task families mixed into every corpus",
            [](RunConfig& c, const std::string&, const std::string& v) {
              std::vector<TaskFamily> fams;
              for (const auto& f : split_list(v)) fams.push_back(task_family_from_string(f));
              c.train.task.families = fams;
            },
            [](const RunConfig& c) {
              std::string out;
              for (auto f : c.train.task.families) out += (out.empty() ? "" : ", ") + std::string(to_string(f));
              return out;
            }},
      SIZE_FIELD("data", "image_tokens", train.task.image_tokens, "pseudo-image block length n_v (key/value pairs)"),
      SIZE_FIELD("data", "min_turns", train.task.min_turns, "fewest question/answer turns per sample"),
      SIZE_FIELD("data", "max_turns", train.task.max_turns, "most question/answer turns per sample"),
      SIZE_FIELD("data", "copy_min", train.task.copy_min, "copy payload length range (easy)"),
      SIZE_FIELD("data", "copy_max", train.task.copy_max, ""),
      SIZE_FIELD("data", "reverse_min", train.task.reverse_min, "reverse payload length range (hard)"),
      SIZE_FIELD("data", "reverse_max", train.task.reverse_max, ""),
      SIZE_FIELD("data", "sum_min", train.task.sum_min, "modular-sum term count range (hard)"),
      SIZE_FIELD("data", "sum_max", train.task.sum_max, ""),
      Field{"data", "modulus", "modular-sum modulus",
            [](RunConfig& c, const std::string& k, const std::string& v) {
              c.train.task.modulus = static_cast<int>(to_size(k, v));
            },
            [](const RunConfig& c) { return std::to_string(c.train.task.modulus); }},
      BOOL_FIELD("data", "shuffle_keys", train.task.shuffle_keys, "random lookup-table keys instead of a fixed key column"),
      SIZE_FIELD("data", "max_sequence_length", train.task.max_sequence_length, "assembled-length budget"),
      SIZE_FIELD("data", "corpus_size", train.corpus_size, "training conversations"),
      SIZE_FIELD("data", "eval_size", train.eval_size, "held-out conversations"),
      Field{"data", "fractions", "stage 1/2/3 subset fractions of the corpus",
            [](RunConfig& c, const std::string& k, const std::string& v) {
              const auto parts = split_list(v);
              if (parts.size() != 3) throw ConfigError(k + ": expected three fractions");
              for (std::size_t i = 0; i < 3; ++i) c.train.fractions[i] = to_double(k, parts[i]);
            },
            [](const RunConfig& c) { return join(c.train.fractions); }},

      DOUBLE_FIELD("train", "skip_target", train.skip_target, "sparsity target t, fraction of layers"),
      DOUBLE_FIELD("train", "alpha", train.alpha, "sparsity weight alpha"),
      SIZE_FIELD("train", "batch_size", train.batch_size, "conversations per optimizer step"),
      SIZE_FIELD("train", "pretrain_epochs", train.pretrain_epochs, "backbone pretraining passes over the corpus"),
      DOUBLE_FIELD("train", "lr_pretrain", train.lr_pretrain, "backbone pretraining peak learning rate"),
      DOUBLE_FIELD("train", "pretrain_warmup", train.pretrain_warmup, "warmup fraction before cosine decay"),
      DOUBLE_FIELD("train", "lr_backbone", train.lr_backbone, "backbone learning rate in stage 3"),
      DOUBLE_FIELD("train", "lr_roe", train.lr_roe, "adapter and router learning rate"),
      BOOL_FIELD("train", "straight_through", train.straight_through, "hard forward, soft backward in stages 2-3"),
      BOOL_FIELD("train", "turn_weights", train.turn_weights, "difficulty weight per turn rather than per conversation"),
      Field{"train", "stage_epochs", "passes over each routing stage subset",
            [](RunConfig& c, const std::string& k, const std::string& v) {
              const auto parts = split_list(v);
              if (parts.size() != 3) throw ConfigError(k + ": expected three epoch counts");
              for (std::size_t i = 0; i < 3; ++i) c.train.stage_epochs[i] = to_size(k, parts[i]);
            },
            [](const RunConfig& c) { return join(c.train.stage_epochs); }},
      DOUBLE_FIELD("train", "beta1", train.optimizer.beta1, "AdamW moment decay rates"),
      DOUBLE_FIELD("train", "beta2", train.optimizer.beta2, ""),
      DOUBLE_FIELD("train", "eps", train.optimizer.eps, "AdamW denominator guard"),
      DOUBLE_FIELD("train", "weight_decay", train.optimizer.weight_decay, "decoupled decay (not applied to norms or routing tokens)"),

      SIZE_FIELD("eval", "max_new_tokens", max_new_tokens, "greedy decoding budget per question"),

      Field{"bench", "ratios", "forced skip ratios",
            [](RunConfig& c, const std::string& k, const std::string& v) {
              std::vector<double> r;
              for (const auto& p : split_list(v)) r.push_back(to_double(k, p));
              c.bench.skip_ratios = r;
            },
            [](const RunConfig& c) { return join(c.bench.skip_ratios); }},
      SIZE_FIELD("bench", "examples", bench.examples, "prompts per timed repetition"),
      SIZE_FIELD("bench", "repeats", bench.repeats, "timed repetitions; the median is reported"),
      SIZE_FIELD("bench", "decode_steps", bench.decode_steps, "fixed decode passes per prompt"),
      Field{"bench", "seed", "seed for the forced plans",
            [](RunConfig& c, const std::string& k, const std::string& v) { c.bench.seed = to_size(k, v); },
            [](const RunConfig& c) { return std::to_string(c.bench.seed); }},

      Field{"run", "seed", "master seed; model, corpus and stage seeds derive from it",
            [](RunConfig& c, const std::string& k, const std::string& v) {
              c.train.seed = to_size(k, v);
              c.train.model.seed = c.train.seed;
            },
            [](const RunConfig& c) { return std::to_string(c.train.seed); }},
      Field{"run", "workers", "threads for data generation and evaluation",
            [](RunConfig& c, const std::string& k, const std::string& v) {
              c.train.workers = static_cast<unsigned>(to_size(k, v));
            },
            [](const RunConfig& c) { return std::to_string(c.train.workers); }},
      Field{"run", "out", "output directory",
            [](RunConfig& c, const std::string&, const std::string& v) { c.out = v; },
            [](const RunConfig& c) { return c.out.string(); }},
  };
  return table;
}

#undef SIZE_FIELD
#undef DOUBLE_FIELD
#undef BOOL_FIELD

const Field& find_field(const std::string& dotted) {
  for (const auto& f : fields()) {
    if (dotted == std::string(f.section) + "." + f.key) return f;
  }
  throw ConfigError("unknown config key '" + dotted + "'");
}

}  // namespace

void RunConfig::validate() const {
  train.model.validate();
  train.task.validate();
  for (int k = 0; k <= 3; ++k) train.stage(k).validate();
  if (train.corpus_size < 1) throw ConfigError("data.corpus_size must be at least 1");
  if (train.eval_size < 1) throw ConfigError("data.eval_size must be at least 1");
  if (train.workers < 1) throw ConfigError("run.workers must be at least 1");
  if (max_new_tokens < 1) throw ConfigError("eval.max_new_tokens must be at least 1");
  if (bench.skip_ratios.empty()) throw ConfigError("bench.ratios is empty");
  for (double r : bench.skip_ratios) {
    if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("bench.ratios must lie in [0, 1]");
  }
  if (bench.examples < 1 || bench.repeats < 1) throw ConfigError("bench needs examples and repeats");
}

nlohmann::ordered_json RunConfig::to_json() const {
  nlohmann::ordered_json j;
  j["train"] = train.to_json();
  j["max_new_tokens"] = max_new_tokens;
  j["bench"] = {{"ratios", bench.skip_ratios},
                {"examples", bench.examples},
                {"repeats", bench.repeats},
                {"decode_steps", bench.decode_steps},
                {"seed", bench.seed}};
  j["out"] = out.string();
  j["config_hash"] = hash();
  return j;
}

void set_config_value(RunConfig& cfg, const std::string& dotted_key, const std::string& value) {
  find_field(dotted_key).set(cfg, dotted_key, trim(value));
}

RunConfig parse_config(const std::string& text) {
  boost::property_tree::ptree tree;
  std::istringstream in(text);
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  RunConfig cfg;
  std::set<std::string> known_sections;
  for (const auto& f : fields()) known_sections.insert(f.section);
  for (const auto& [section, body] : tree) {
    if (!known_sections.count(section)) throw ConfigError("unknown config section [" + section + "]");
    if (body.empty() && !body.data().empty()) {
      throw ConfigError("config key '" + section + "' appears outside any section");
    }
    for (const auto& [key, value] : body) {
      set_config_value(cfg, section + "." + key, value.get_value<std::string>());
    }
  }
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string config_text(const RunConfig& cfg) {
  std::ostringstream out;
  std::string section;
  for (const auto& f : fields()) {
    if (section != f.section) {
      if (!section.empty()) out << '\n';
      section = f.section;
      out << '[' << section << "]\n";
    }
    if (*f.comment) out << "; " << f.comment << '\n';
    out << f.key << " = " << f.get(cfg) << '\n';
  }
  return out.str();
}

}  // namespace roe
