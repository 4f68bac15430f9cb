#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "circuitforge/model.hpp"

namespace circuitforge::tasks {

enum class TaskKind { IOI, GreaterThan, GenderedPronouns, Induction, Docstring, ToyInduction };

std::string to_string(TaskKind t);
TaskKind parse_task(const std::string& name);

enum class VocabKind { toy_symbols, word_level };

// Bijection between token strings and dense ids [0, size).
class Vocab {
public:
    // "s0" .. "s<n-1>"
    static Vocab toy_symbols(std::size_t n);
    // Every word the natural-language templates can emit, one token each.
    static Vocab word_level();

    VocabKind kind() const noexcept { return kind_; }
    std::size_t size() const noexcept { return strings_.size(); }
    bool contains(const std::string& s) const { return ids_.contains(s); }
    // Throws VocabIncomplete.
    std::int32_t id(const std::string& s) const;
    const std::string& str(std::int32_t id) const;

private:
    Vocab(VocabKind kind, std::vector<std::string> strings);

    VocabKind kind_;
    std::vector<std::string> strings_;
    std::unordered_map<std::string, std::int32_t> ids_;
};

enum class AnswerMode { single_vs_single, set_sum_vs_set_sum, correct_vs_max_wrong };

std::string to_string(AnswerMode m);
AnswerMode parse_answer_mode(const std::string& s);

struct AnswerSpec {
    std::vector<std::int32_t> correct;
    std::vector<std::int32_t> wrong;
    AnswerMode mode = AnswerMode::single_vs_single;
};

struct SamplePair {
    std::vector<std::int32_t> clean_tokens;
    std::vector<std::int32_t> corrupted_tokens;
    AnswerSpec answer;
    nlohmann::json meta = nlohmann::json::object();
};

struct TaskDataset {
    TaskKind task = TaskKind::ToyInduction;
    std::vector<SamplePair> pairs;
    std::uint64_t seed = 0;

    std::size_t seq() const { return pairs.empty() ? 0 : pairs.front().clean_tokens.size(); }
    TokenBatch clean_batch() const;
    TokenBatch corrupted_batch() const;
    // Same pairs with clean and corrupted prompts swapped.
    TaskDataset with_corrupted_as_clean() const;
    // First n pairs.
    TaskDataset head(std::size_t n) const;
    // Order-sensitive digest of every token and answer id.
    std::string digest() const;
};

struct GenerateOptions {
    // Prompt length of ToyInduction samples.
    std::size_t toy_seq = 16;
};

// Errors: VocabIncomplete, UnsatisfiableTemplate, InvalidArgument (n == 0).
TaskDataset generate(TaskKind task, std::size_t n, std::uint64_t seed, const Vocab& vocab,
                     const GenerateOptions& opts = {});

// Errors: EmptyAnswerSet.
float logit_diff(std::span<const float> logits_at_answer, const AnswerSpec& spec);

// Mean logit difference at the final position of each row of `logits` ([batch, seq, vocab]).
double mean_logit_diff(const Tensor& logits, const TaskDataset& ds);

// Mean clean-run logit difference.
double dataset_ld(const Model& model, const TaskDataset& ds);

struct DigitPairSets {
    std::vector<std::pair<int, int>> correct;
    std::vector<std::pair<int, int>> wrong;
};

// Partition of all (v1, v2) digit pairs for a two-token year suffix [y1][y2].
DigitPairSets two_token_greater_than_sets(int y1, int y2);

// JSON lines: {task, clean_tokens, corrupted_tokens, correct_ids, wrong_ids, mode, meta}
void save_jsonl(const std::filesystem::path& path, const TaskDataset& ds);
TaskDataset load_jsonl(const std::filesystem::path& path);

}  // namespace circuitforge::tasks
