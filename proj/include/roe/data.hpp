#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace roe {

/// Token id layout of the synthetic vocabulary (64 ids).
namespace vocab {
inline constexpr int kPad = 0;
inline constexpr int kEnd = 1;
inline constexpr int kCopy = 2;
inline constexpr int kReverse = 3;
inline constexpr int kSum = 4;
inline constexpr int kLookup = 5;
inline constexpr int kTextBase = 8;
inline constexpr int kTextCount = 32;
/// "Visual" band used for pseudo-image tokens: keys then values.
inline constexpr int kVisualBase = 40;
inline constexpr int kVisualKeyCount = 12;
inline constexpr int kVisualValueBase = kVisualBase + kVisualKeyCount;
inline constexpr int kVisualValueCount = 12;
inline constexpr int kSize = 64;
}  // namespace vocab

enum class Difficulty { Easy, Hard };
enum class TaskFamily { Copy, Reverse, ModularSum, Lookup };

const char* to_string(Difficulty d);
const char* to_string(TaskFamily f);
Difficulty difficulty_from_string(const std::string& s);
TaskFamily task_family_from_string(const std::string& s);
Difficulty difficulty_of(TaskFamily f);

struct Turn {
  std::vector<int> question;
  std::vector<int> answer;
  Difficulty difficulty = Difficulty::Easy;

  bool operator==(const Turn&) const = default;
};

/// One multi-turn example: a pseudo-image block followed by q question/answer
/// turns that all refer to the same image.
struct ConversationSample {
  std::uint64_t id = 0;
  std::vector<int> image_tokens;
  std::vector<Turn> turns;

  bool operator==(const ConversationSample&) const = default;
};

/// Task family inferred from the operator token that opens every question.
TaskFamily task_family(const Turn& turn);

/// Ground-truth answer (terminated by kEnd) for a question against an image.
std::vector<int> solve(const std::vector<int>& image_tokens, const std::vector<int>& question,
                       int modulus);

struct TaskSpec {
  std::vector<TaskFamily> families{TaskFamily::Copy, TaskFamily::Reverse, TaskFamily::ModularSum,
                                   TaskFamily::Lookup};
  std::size_t image_tokens = 8;  // n_v, key/value pairs
  std::size_t min_turns = 1;
  std::size_t max_turns = 4;  // q_max
  std::size_t copy_min = 2, copy_max = 3;
  std::size_t reverse_min = 3, reverse_max = 4;
  std::size_t sum_min = 2, sum_max = 3;
  int modulus = 4;
  /// Draw table keys at random. By default every table lists the same keys in
  /// the same order, so a lookup resolves in one attention hop; random keys
  /// need a two-hop circuit the toy backbone does not learn in budget.
  bool shuffle_keys = false;
  /// Assembled-length budget (router slots included); over-length samples are rejected.
  std::size_t max_sequence_length = 128;

  void validate() const;
  nlohmann::ordered_json to_json() const;
};

/// Length of the routed sequence for a sample: 1 + n_v + sum(1 + |Q| + |A|).
std::size_t assembled_length(const ConversationSample& sample);

/// Deterministic given (spec, count, seed): sample i is drawn from its own
/// RNG seeded by mixing `seed` with i, so `workers` only changes wall time.
std::vector<ConversationSample> generate_corpus(const TaskSpec& spec, std::size_t count,
                                                std::uint64_t seed, unsigned workers = 1);

struct StageSplit {
  std::vector<ConversationSample> stage1, stage2, stage3;
};

/// Disjoint random subsets sized floor(f_k * |corpus|).
StageSplit split_corpus(const std::vector<ConversationSample>& corpus,
                        const std::array<double, 3>& fractions, std::uint64_t seed);

nlohmann::ordered_json sample_to_json(const ConversationSample& sample);
ConversationSample sample_from_json(const nlohmann::json& j);

void write_corpus_jsonl(const std::filesystem::path& path,
                        const std::vector<ConversationSample>& corpus);
std::vector<ConversationSample> read_corpus_jsonl(const std::filesystem::path& path);

/// splitmix64 finalizer, used to derive per-sample and per-stage seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace roe
