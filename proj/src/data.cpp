#include "roe/data.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <thread>

#include "roe/errors.hpp"

namespace roe {

const char* to_string(Difficulty d) { return d == Difficulty::Easy ? "easy" : "hard"; }

const char* to_string(TaskFamily f) {
  switch (f) {
    case TaskFamily::Copy: return "copy";
    case TaskFamily::Reverse: return "reverse";
    case TaskFamily::ModularSum: return "modular-sum";
    case TaskFamily::Lookup: return "lookup";
  }
  return "?";
}

Difficulty difficulty_from_string(const std::string& s) {
  if (s == "easy") return Difficulty::Easy;
  if (s == "hard") return Difficulty::Hard;
  throw DataError("unknown difficulty '" + s + "'");
}

TaskFamily task_family_from_string(const std::string& s) {
  for (auto f : {TaskFamily::Copy, TaskFamily::Reverse, TaskFamily::ModularSum, TaskFamily::Lookup})
    if (s == to_string(f)) return f;
  throw ConfigError("unknown task family '" + s + "'");
}

Difficulty difficulty_of(TaskFamily f) {
  return (f == TaskFamily::Copy || f == TaskFamily::Lookup) ? Difficulty::Easy : Difficulty::Hard;
}

TaskFamily task_family(const Turn& turn) {
  if (turn.question.empty()) throw MalformedSampleError("empty question");
  switch (turn.question.front()) {
    case vocab::kCopy: return TaskFamily::Copy;
    case vocab::kReverse: return TaskFamily::Reverse;
    case vocab::kSum: return TaskFamily::ModularSum;
    case vocab::kLookup: return TaskFamily::Lookup;
    default: throw MalformedSampleError("question does not start with a task operator");
  }
}

std::vector<int> solve(const std::vector<int>& image, const std::vector<int>& question,
                       int modulus) {
  if (question.empty()) throw MalformedSampleError("empty question");
  std::vector<int> answer;
  const auto payload_begin = question.begin() + 1;
  switch (question.front()) {
    case vocab::kCopy:
      answer.assign(payload_begin, question.end());
      break;
    case vocab::kReverse:
      answer.assign(question.rbegin(), question.rend() - 1);
      break;
    case vocab::kSum: {
      int s = 0;
      for (auto it = payload_begin; it != question.end(); ++it) s += *it - vocab::kTextBase;
      answer.push_back(vocab::kTextBase + s % modulus);
      break;
    }
    case vocab::kLookup: {
      if (question.size() != 2) throw MalformedSampleError("lookup question must hold one key");
      for (std::size_t i = 0; i + 1 < image.size(); i += 2) {
        if (image[i] == question[1]) {
          answer.push_back(image[i + 1]);
          break;
        }
      }
      if (answer.empty()) throw MalformedSampleError("lookup key not present in image block");
      break;
    }
    default:
      throw MalformedSampleError("question does not start with a task operator");
  }
  answer.push_back(vocab::kEnd);
  return answer;
}

void TaskSpec::validate() const {
  if (families.empty()) throw ConfigError("task spec: no task families");
  if (image_tokens < 2 || image_tokens % 2 != 0 ||
      image_tokens / 2 > static_cast<std::size_t>(vocab::kVisualKeyCount)) {
    throw ConfigError("task spec: image_tokens must be an even count of at most " +
                      std::to_string(2 * vocab::kVisualKeyCount));
  }
  if (min_turns < 1 || min_turns > max_turns) throw ConfigError("task spec: bad turn range");
  if (copy_min < 1 || copy_min > copy_max || reverse_min < 1 || reverse_min > reverse_max ||
      sum_min < 1 || sum_min > sum_max) {
    throw ConfigError("task spec: bad payload length range");
  }
  if (modulus < 2 || modulus > vocab::kTextCount) throw ConfigError("task spec: bad modulus");
}

nlohmann::ordered_json TaskSpec::to_json() const {
  nlohmann::ordered_json j;
  std::vector<std::string> fam;
  for (auto f : families) fam.emplace_back(to_string(f));
  j["families"] = fam;
  j["image_tokens"] = image_tokens;
  j["min_turns"] = min_turns;
  j["max_turns"] = max_turns;
  j["copy"] = {copy_min, copy_max};
  j["reverse"] = {reverse_min, reverse_max};
  j["sum"] = {sum_min, sum_max};
  j["modulus"] = modulus;
  j["shuffle_keys"] = shuffle_keys;
  j["max_sequence_length"] = max_sequence_length;
  return j;
}

std::size_t assembled_length(const ConversationSample& sample) {
  std::size_t n = 1 + sample.image_tokens.size();
  for (const auto& t : sample.turns) n += 1 + t.question.size() + t.answer.size();
  return n;
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

namespace {

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

std::size_t uniform_size(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

ConversationSample generate_one(const TaskSpec& spec, std::uint64_t id, std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed, id));
  ConversationSample s;
  s.id = id;

  std::vector<int> keys(vocab::kVisualKeyCount);
  std::iota(keys.begin(), keys.end(), vocab::kVisualBase);
  if (spec.shuffle_keys) std::shuffle(keys.begin(), keys.end(), rng);
  const std::size_t pairs = spec.image_tokens / 2;
  for (std::size_t i = 0; i < pairs; ++i) {
    s.image_tokens.push_back(keys[i]);
    s.image_tokens.push_back(
        uniform_int(rng, vocab::kVisualValueBase, vocab::kVisualValueBase + vocab::kVisualValueCount - 1));
  }

  const std::size_t q = uniform_size(rng, spec.min_turns, spec.max_turns);
  for (std::size_t k = 0; k < q; ++k) {
    const TaskFamily fam = spec.families[uniform_size(rng, 0, spec.families.size() - 1)];
    Turn turn;
    turn.difficulty = difficulty_of(fam);
    switch (fam) {
      case TaskFamily::Copy:
      case TaskFamily::Reverse: {
        const bool copy = fam == TaskFamily::Copy;
        const std::size_t len = copy ? uniform_size(rng, spec.copy_min, spec.copy_max)
                                     : uniform_size(rng, spec.reverse_min, spec.reverse_max);
        turn.question.push_back(copy ? vocab::kCopy : vocab::kReverse);
        for (std::size_t i = 0; i < len; ++i)
          turn.question.push_back(
              uniform_int(rng, vocab::kTextBase, vocab::kTextBase + vocab::kTextCount - 1));
        break;
      }
      case TaskFamily::ModularSum: {
        const std::size_t len = uniform_size(rng, spec.sum_min, spec.sum_max);
        turn.question.push_back(vocab::kSum);
        for (std::size_t i = 0; i < len; ++i)
          turn.question.push_back(vocab::kTextBase + uniform_int(rng, 0, spec.modulus - 1));
        break;
      }
      case TaskFamily::Lookup: {
        const std::size_t pair = uniform_size(rng, 0, pairs - 1);
        turn.question = {vocab::kLookup, s.image_tokens[2 * pair]};
        break;
      }
    }
    turn.answer = solve(s.image_tokens, turn.question, spec.modulus);
    s.turns.push_back(std::move(turn));
  }
  if (assembled_length(s) > spec.max_sequence_length) {
    throw CapacityError("sample " + std::to_string(id) + " assembles to " +
                        std::to_string(assembled_length(s)) + " tokens, limit " +
                        std::to_string(spec.max_sequence_length));
  }
  return s;
}

}  // namespace

std::vector<ConversationSample> generate_corpus(const TaskSpec& spec, std::size_t count,
                                                std::uint64_t seed, unsigned workers) {
  spec.validate();
  if (count < 1) throw ConfigError("generate_corpus: count must be at least 1");
  std::vector<ConversationSample> out(count);
  workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(count)));
  if (workers == 1) {
    for (std::size_t i = 0; i < count; ++i) out[i] = generate_one(spec, i, seed);
    return out;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < count; i += workers) out[i] = generate_one(spec, i, seed);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

StageSplit split_corpus(const std::vector<ConversationSample>& corpus,
                        const std::array<double, 3>& fractions, std::uint64_t seed) {
  double total = 0.0;
  for (double f : fractions) {
    if (!(f >= 0.0 && f <= 1.0)) throw ParameterError("split_corpus: fraction out of [0, 1]");
    total += f;
  }
  if (total > 1.0 + 1e-12) throw ParameterError("split_corpus: fractions sum above 1");

  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(mix_seed(seed, 0x5e17));
  std::shuffle(order.begin(), order.end(), rng);

  std::array<std::size_t, 3> sizes{};
  std::size_t used = 0;
  for (std::size_t k = 0; k < 3; ++k) {
    // Small epsilon so 0.15 * 1000 lands on 150 rather than 149.
    sizes[k] = static_cast<std::size_t>(fractions[k] * static_cast<double>(corpus.size()) + 1e-9);
    sizes[k] = std::min(sizes[k], corpus.size() - used);
    used += sizes[k];
  }
  StageSplit split;
  std::size_t pos = 0;
  std::array<std::vector<ConversationSample>*, 3> dst{&split.stage1, &split.stage2, &split.stage3};
  for (std::size_t k = 0; k < 3; ++k) {
    // Keep corpus order inside each subset so stage-1 with fraction 1 equals the corpus.
    std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(pos),
                                 order.begin() + static_cast<std::ptrdiff_t>(pos + sizes[k]));
    std::sort(idx.begin(), idx.end());
    for (auto i : idx) dst[k]->push_back(corpus[i]);
    pos += sizes[k];
  }
  return split;
}

nlohmann::ordered_json sample_to_json(const ConversationSample& sample) {
  nlohmann::ordered_json j;
  j["id"] = sample.id;
  j["image_tokens"] = sample.image_tokens;
  auto turns = nlohmann::ordered_json::array();
  for (const auto& t : sample.turns) {
    nlohmann::ordered_json tj;
    tj["q"] = t.question;
    tj["a"] = t.answer;
    tj["difficulty"] = to_string(t.difficulty);
    turns.push_back(std::move(tj));
  }
  j["turns"] = std::move(turns);
  return j;
}

ConversationSample sample_from_json(const nlohmann::json& j) {
  try {
    ConversationSample s;
    s.id = j.at("id").get<std::uint64_t>();
    s.image_tokens = j.at("image_tokens").get<std::vector<int>>();
    for (const auto& tj : j.at("turns")) {
      Turn t;
      t.question = tj.at("q").get<std::vector<int>>();
      t.answer = tj.at("a").get<std::vector<int>>();
      t.difficulty = difficulty_from_string(tj.at("difficulty").get<std::string>());
      if (t.question.empty() || t.answer.empty()) {
        throw MalformedSampleError("sample " + std::to_string(s.id) + " has an empty turn");
      }
      s.turns.push_back(std::move(t));
    }
    if (s.turns.empty()) throw MalformedSampleError("sample " + std::to_string(s.id) + " has no turns");
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed corpus record: ") + e.what());
  }
}

void write_corpus_jsonl(const std::filesystem::path& path,
                        const std::vector<ConversationSample>& corpus) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  for (const auto& s : corpus) out << sample_to_json(s).dump() << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

std::vector<ConversationSample> read_corpus_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<ConversationSample> corpus;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    corpus.push_back(sample_from_json(j));
  }
  return corpus;
}

}  // namespace roe
