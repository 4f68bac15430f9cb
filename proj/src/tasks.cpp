#include "circuitforge/tasks.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <iomanip>
#include <random>
#include <set>
#include <sstream>

#include "circuitforge/error.hpp"

namespace circuitforge::tasks {

using nlohmann::json;

namespace {

// Template word lists. Every entry is a single token of the word-level vocab.
const std::vector<std::string> kIoiNames = {"John",  "Mary", "Tom",  "James", "Dan",   "Sid",
                                            "Amy",   "Lisa", "Kate", "Paul",  "Anna",  "Mike",
                                            "Sarah", "Alex", "Rose", "Emily", "Peter", "Laura"};
const std::vector<std::string> kPlaces = {"store",  "park",     "school",     "station",
                                          "garden", "office",   "restaurant", "hospital",
                                          "beach",  "library"};
const std::vector<std::string> kNouns = {"war",    "expedition", "project", "drought", "reign",
                                         "siege",  "strike",     "voyage",  "famine",  "treaty",
                                         "empire", "dynasty"};
const std::vector<std::string> kFemaleNames = {"Mary", "Amy",  "Lisa",  "Kate",
                                               "Anna", "Sarah", "Rose", "Emily", "Laura"};
const std::vector<std::string> kMaleNames = {"John", "Tom", "James", "Dan", "Sid",
                                             "Paul", "Mike", "Peter", "Alex"};
const std::vector<std::string> kAdjectives = {"good", "great", "nice", "kind"};
// Names split into exactly two tokens; first halves are pairwise distinct.
const std::vector<std::pair<std::string, std::string>> kTwoTokenNames = {
    {"Cl", "aire"}, {"Tr", "istan"}, {"Bre", "nda"}, {"Mar", "cus"}, {"Ji", "llian"},
    {"Da", "rius"}, {"Fe", "lix"},   {"Vi", "ola"},  {"Ro", "wan"},  {"Qu", "entin"},
    {"Ed", "mund"}, {"Gw", "endolyn"}};
const std::vector<std::string> kVariableNames = {
    "first",  "page",   "names",  "size",   "files",  "read",   "project", "target",
    "new",    "image",  "update", "data",   "key",    "value",  "path",    "mode",
    "count",  "index",  "items",  "config", "source", "result", "token",   "limit",
    "offset", "parent", "child",  "node",   "buffer", "width",  "height",  "color"};
const std::vector<std::string> kFunctionNames = {"old", "run", "load", "check", "parse", "build"};
const std::vector<std::string> kDescriptionWords = {
    "sector", "gap",  "population", "message", "tree",   "detail", "mine",  "river",
    "stone",  "field", "light",     "number",  "object", "record", "state", "signal"};

const std::vector<std::string> kFixedWords = {
    "When", "and",  "went",   "to",     "the",    ",",     "bought", "a",       "drink",
    "for",  "The",  "lasted", "from",   "year",   "So",    "That",   "person",  "is",
    "such", "friend", "isn't", "she",   "he",     "Today", "visited", ".",      "There",
    "def",  "(",    "self",   ")",      ":",      "\"\"\"", ":param"};

std::string two_digit(int v) {
    std::ostringstream os;
    os << std::setw(2) << std::setfill('0') << v;
    return os.str();
}

// Bounded draw that does not depend on the standard library's distributions.
std::size_t draw(std::mt19937_64& rng, std::size_t n) { return static_cast<std::size_t>(rng() % n); }

template <typename T>
const T& pick(std::mt19937_64& rng, const std::vector<T>& v) {
    return v[draw(rng, v.size())];
}

// k distinct indices out of [0, n), in draw order.
std::vector<std::size_t> distinct(std::mt19937_64& rng, std::size_t n, std::size_t k) {
    std::vector<std::size_t> pool(n);
    for (std::size_t i = 0; i < n; ++i) pool[i] = i;
    for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + draw(rng, n - i)]);
    pool.resize(k);
    return pool;
}

std::vector<std::int32_t> encode(const Vocab& vocab, const std::vector<std::string>& words) {
    std::vector<std::int32_t> ids;
    ids.reserve(words.size());
    for (const auto& w : words) ids.push_back(vocab.id(w));
    return ids;
}

SamplePair make_ioi(std::mt19937_64& rng, const Vocab& vocab) {
    const auto idx = distinct(rng, kIoiNames.size(), 3);
    const std::string& io = kIoiNames[idx[0]];
    const std::string& subject = kIoiNames[idx[1]];
    const std::string& third = kIoiNames[idx[2]];
    const std::string& place = pick(rng, kPlaces);
    const bool subject_first = draw(rng, 2) == 1;  // BAB vs ABB ordering
    const std::string& n1 = subject_first ? subject : io;
    const std::string& n2 = subject_first ? io : subject;

    std::vector<std::string> clean = {"When", n1,  "and",    n2,  "went",  "to", "the",
                                      place,  ",", subject, "bought", "a", "drink", "for"};
    std::vector<std::string> corrupted = clean;
    corrupted[9] = third;

    SamplePair p;
    p.clean_tokens = encode(vocab, clean);
    p.corrupted_tokens = encode(vocab, corrupted);
    p.answer = {{vocab.id(io)}, {vocab.id(subject)}, AnswerMode::single_vs_single};
    p.meta = {{"io", io},
              {"subject", subject},
              {"corrupt_name", third},
              {"place", place},
              {"order", subject_first ? "BAB" : "ABB"}};
    return p;
}

SamplePair make_greater_than(std::mt19937_64& rng, const Vocab& vocab) {
    const int century = 11 + static_cast<int>(draw(rng, 7));  // 11..17
    const int yy = 2 + static_cast<int>(draw(rng, 96));       // 02..97
    const std::string& noun = pick(rng, kNouns);
    const std::string xx = two_digit(century);

    std::vector<std::string> clean = {"The", noun, "lasted", "from", xx, two_digit(yy),
                                      "to",  "the", "year",  xx};
    std::vector<std::string> corrupted = clean;
    corrupted[5] = "01";

    SamplePair p;
    p.clean_tokens = encode(vocab, clean);
    p.corrupted_tokens = encode(vocab, corrupted);
    p.answer.mode = AnswerMode::set_sum_vs_set_sum;
    for (int v = 0; v <= 99; ++v) {
        if (v > yy && v <= 98) p.answer.correct.push_back(vocab.id(two_digit(v)));
        if (v <= yy) p.answer.wrong.push_back(vocab.id(two_digit(v)));
    }
    p.meta = {{"noun", noun}, {"century", xx}, {"yy", two_digit(yy)}};
    return p;
}

SamplePair make_gendered(std::mt19937_64& rng, const Vocab& vocab) {
    const bool female = draw(rng, 2) == 0;
    const std::string& name = pick(rng, female ? kFemaleNames : kMaleNames);
    const std::string& adjective = pick(rng, kAdjectives);

    std::vector<std::string> clean = {"So", name, "is", "such", "a", adjective, "friend", ",",
                                      "isn't"};
    std::vector<std::string> corrupted = clean;
    corrupted[0] = "That";
    corrupted[1] = "person";

    SamplePair p;
    p.clean_tokens = encode(vocab, clean);
    p.corrupted_tokens = encode(vocab, corrupted);
    p.answer = {{vocab.id(female ? "she" : "he")},
                {vocab.id(female ? "he" : "she")},
                AnswerMode::single_vs_single};
    p.meta = {{"name", name}, {"gender", female ? "female" : "male"}, {"adjective", adjective}};
    return p;
}

SamplePair make_induction(std::mt19937_64& rng, const Vocab& vocab) {
    const auto idx = distinct(rng, kTwoTokenNames.size(), 2);
    const auto& name = kTwoTokenNames[idx[0]];
    const auto& other = kTwoTokenNames[idx[1]];
    const std::string& place = pick(rng, kPlaces);

    std::vector<std::string> clean = {"Today", ",", name.first, name.second, "visited",
                                      "the",   place, ".",      "There",     name.first};
    std::vector<std::string> corrupted = clean;
    corrupted.back() = other.first;

    SamplePair p;
    p.clean_tokens = encode(vocab, clean);
    p.corrupted_tokens = encode(vocab, corrupted);
    p.answer = {{vocab.id(name.second)}, {vocab.id(other.second)}, AnswerMode::single_vs_single};
    p.meta = {{"name", name.first + name.second},
              {"corrupt_name", other.first + other.second},
              {"place", place}};
    return p;
}

SamplePair make_docstring(std::mt19937_64& rng, const Vocab& vocab) {
    // 6 def-arguments, 3 replacement arguments and 2 corrupted param names, all distinct.
    const auto idx = distinct(rng, kVariableNames.size(), 11);
    std::vector<std::string> args;
    for (int i = 0; i < 6; ++i) args.push_back(kVariableNames[idx[i]]);
    const std::array<std::string, 3> replacements = {kVariableNames[idx[6]], kVariableNames[idx[7]],
                                                     kVariableNames[idx[8]]};
    const std::array<std::string, 2> param_names = {kVariableNames[idx[9]],
                                                    kVariableNames[idx[10]]};
    const std::string& fn = pick(rng, kFunctionNames);
    const auto words = distinct(rng, kDescriptionWords.size(), 7);
    auto word = [&](int i) { return kDescriptionWords[words[static_cast<std::size_t>(i)]]; };

    auto build = [&](const std::vector<std::string>& def_args, const std::string& param1,
                     const std::string& param2) {
        std::vector<std::string> t = {"def", fn, "(", "self"};
        for (const auto& a : def_args) {
            t.push_back(",");
            t.push_back(a);
        }
        for (const auto& s : {std::string(")"), std::string(":"), std::string("\"\"\""), word(0),
                              word(1), word(2), std::string(":param"), param1, std::string(":"),
                              word(3), word(4), std::string(":param"), param2, std::string(":"),
                              word(5), word(6), std::string(":param")}) {
            t.push_back(s);
        }
        return t;
    };

    std::vector<std::string> corrupt_args = args;
    for (int i = 0; i < 3; ++i) corrupt_args[static_cast<std::size_t>(i) + 1] = replacements[i];

    SamplePair p;
    p.clean_tokens = encode(vocab, build(args, args[1], args[2]));
    p.corrupted_tokens = encode(vocab, build(corrupt_args, param_names[0], param_names[1]));
    p.answer.mode = AnswerMode::correct_vs_max_wrong;
    p.answer.correct = {vocab.id(args[3])};
    for (int i : {0, 1, 2, 4, 5}) p.answer.wrong.push_back(vocab.id(args[static_cast<std::size_t>(i)]));
    for (const auto& r : replacements) p.answer.wrong.push_back(vocab.id(r));
    p.meta = {{"function", fn},
              {"args", args},
              {"corrupt_args", corrupt_args},
              {"corrupt_params", param_names}};
    return p;
}

// [A][B] ... [A] over distinct symbols; the corrupted prompt replaces the first [A]
// with a symbol [C] absent from the prompt, so nothing earlier matches the final [A].
SamplePair make_toy_induction(std::mt19937_64& rng, const Vocab& vocab, std::size_t seq) {
    if (seq < 4) fail(ErrorCode::UnsatisfiableTemplate, "toy induction needs seq >= 4");
    if (vocab.size() < seq + 1) {
        fail(ErrorCode::UnsatisfiableTemplate,
             "toy induction needs vocab_size >= seq + 1 distinct symbols");
    }
    const auto symbols = distinct(rng, vocab.size(), seq + 1);
    std::vector<std::int32_t> clean(seq);
    for (std::size_t t = 0; t + 1 < seq; ++t) clean[t] = static_cast<std::int32_t>(symbols[t]);
    const std::size_t a_pos = draw(rng, seq - 3);  // B sits at a_pos + 1 <= seq - 3
    clean[seq - 1] = clean[a_pos];
    const auto c_token = static_cast<std::int32_t>(symbols[seq - 1]);
    const auto d_token = static_cast<std::int32_t>(symbols[seq]);

    SamplePair p;
    p.clean_tokens = clean;
    p.corrupted_tokens = clean;
    p.corrupted_tokens[a_pos] = c_token;
    p.answer = {{clean[a_pos + 1]}, {d_token}, AnswerMode::single_vs_single};
    p.meta = {{"a_pos", a_pos},
              {"A", vocab.str(clean[a_pos])},
              {"B", vocab.str(clean[a_pos + 1])},
              {"C", vocab.str(c_token)},
              {"D", vocab.str(d_token)}};
    return p;
}

}  // namespace

std::string to_string(TaskKind t) {
    switch (t) {
        case TaskKind::IOI: return "ioi";
        case TaskKind::GreaterThan: return "greater_than";
        case TaskKind::GenderedPronouns: return "gendered_pronouns";
        case TaskKind::Induction: return "induction";
        case TaskKind::Docstring: return "docstring";
        case TaskKind::ToyInduction: return "toy_induction";
    }
    return "?";
}

TaskKind parse_task(const std::string& name) {
    for (TaskKind t : {TaskKind::IOI, TaskKind::GreaterThan, TaskKind::GenderedPronouns,
                       TaskKind::Induction, TaskKind::Docstring, TaskKind::ToyInduction}) {
        if (to_string(t) == name) return t;
    }
    fail(ErrorCode::InvalidArgument, "unknown task " + name);
}

std::string to_string(AnswerMode m) {
    switch (m) {
        case AnswerMode::single_vs_single: return "single_vs_single";
        case AnswerMode::set_sum_vs_set_sum: return "set_sum_vs_set_sum";
        case AnswerMode::correct_vs_max_wrong: return "correct_vs_max_wrong";
    }
    return "?";
}

AnswerMode parse_answer_mode(const std::string& s) {
    for (AnswerMode m : {AnswerMode::single_vs_single, AnswerMode::set_sum_vs_set_sum,
                         AnswerMode::correct_vs_max_wrong}) {
        if (to_string(m) == s) return m;
    }
    fail(ErrorCode::FormatError, "unknown answer mode " + s);
}

// ---------------------------------------------------------------- vocab

Vocab::Vocab(VocabKind kind, std::vector<std::string> strings)
    : kind_(kind), strings_(std::move(strings)) {
    for (std::size_t i = 0; i < strings_.size(); ++i) {
        if (!ids_.emplace(strings_[i], static_cast<std::int32_t>(i)).second) {
            fail(ErrorCode::InvalidArgument, "duplicate vocab entry " + strings_[i]);
        }
    }
}

Vocab Vocab::toy_symbols(std::size_t n) {
    std::vector<std::string> s;
    for (std::size_t i = 0; i < n; ++i) s.push_back("s" + std::to_string(i));
    return Vocab(VocabKind::toy_symbols, std::move(s));
}

Vocab Vocab::word_level() {
    std::set<std::string> seen;
    std::vector<std::string> words;
    auto add = [&](const std::string& w) {
        if (seen.insert(w).second) words.push_back(w);
    };
    for (const auto& w : kFixedWords) add(w);
    for (int v = 0; v <= 99; ++v) add(two_digit(v));
    for (const auto* list : {&kIoiNames, &kPlaces, &kNouns, &kFemaleNames, &kMaleNames,
                             &kAdjectives, &kVariableNames, &kFunctionNames, &kDescriptionWords}) {
        for (const auto& w : *list) add(w);
    }
    for (const auto& [a, b] : kTwoTokenNames) {
        add(a);
        add(b);
    }
    return Vocab(VocabKind::word_level, std::move(words));
}

std::int32_t Vocab::id(const std::string& s) const {
    auto it = ids_.find(s);
    if (it == ids_.end()) fail(ErrorCode::VocabIncomplete, "vocab lacks token '" + s + "'");
    return it->second;
}

const std::string& Vocab::str(std::int32_t id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= strings_.size()) {
        fail(ErrorCode::TokenOutOfRange, "token id " + std::to_string(id) + " out of range");
    }
    return strings_[static_cast<std::size_t>(id)];
}

// ---------------------------------------------------------------- datasets

namespace {

TokenBatch batch_of(const TaskDataset& ds, bool clean) {
    TokenBatch b;
    b.batch = ds.pairs.size();
    b.seq = ds.seq();
    b.ids.reserve(b.batch * b.seq);
    for (const auto& p : ds.pairs) {
        const auto& toks = clean ? p.clean_tokens : p.corrupted_tokens;
        if (toks.size() != b.seq) {
            fail(ErrorCode::AlignmentError, "dataset prompts differ in length");
        }
        b.ids.insert(b.ids.end(), toks.begin(), toks.end());
    }
    return b;
}

}  // namespace

TokenBatch TaskDataset::clean_batch() const { return batch_of(*this, true); }
TokenBatch TaskDataset::corrupted_batch() const { return batch_of(*this, false); }

TaskDataset TaskDataset::with_corrupted_as_clean() const {
    TaskDataset out = *this;
    for (auto& p : out.pairs) std::swap(p.clean_tokens, p.corrupted_tokens);
    return out;
}

TaskDataset TaskDataset::head(std::size_t n) const {
    TaskDataset out{task, {}, seed};
    out.pairs.assign(pairs.begin(), pairs.begin() + static_cast<std::ptrdiff_t>(std::min(n, pairs.size())));
    return out;
}

std::string TaskDataset::digest() const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](std::int64_t v) {
        for (int i = 0; i < 8; ++i) {
            h ^= static_cast<std::uint64_t>(v >> (8 * i)) & 0xffu;
            h *= 1099511628211ull;
        }
    };
    mix(static_cast<std::int64_t>(task));
    for (const auto& p : pairs) {
        for (auto t : p.clean_tokens) mix(t);
        mix(-1);
        for (auto t : p.corrupted_tokens) mix(t);
        mix(-2);
        for (auto t : p.answer.correct) mix(t);
        mix(-3);
        for (auto t : p.answer.wrong) mix(t);
        mix(-4 - static_cast<std::int64_t>(p.answer.mode));
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

TaskDataset generate(TaskKind task, std::size_t n, std::uint64_t seed, const Vocab& vocab,
                     const GenerateOptions& opts) {
    if (n == 0) fail(ErrorCode::InvalidArgument, "dataset size must be >= 1");
    std::mt19937_64 rng(seed);
    TaskDataset ds{task, {}, seed};
    ds.pairs.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        SamplePair p;
        switch (task) {
            case TaskKind::IOI: p = make_ioi(rng, vocab); break;
            case TaskKind::GreaterThan: p = make_greater_than(rng, vocab); break;
            case TaskKind::GenderedPronouns: p = make_gendered(rng, vocab); break;
            case TaskKind::Induction: p = make_induction(rng, vocab); break;
            case TaskKind::Docstring: p = make_docstring(rng, vocab); break;
            case TaskKind::ToyInduction: p = make_toy_induction(rng, vocab, opts.toy_seq); break;
        }
        p.meta["index"] = i;
        ds.pairs.push_back(std::move(p));
    }
    return ds;
}

// ---------------------------------------------------------------- metrics

float logit_diff(std::span<const float> logits, const AnswerSpec& spec) {
    if (spec.correct.empty() || spec.wrong.empty()) {
        fail(ErrorCode::EmptyAnswerSet, "answer sets must be nonempty");
    }
    auto at = [&](std::int32_t id) {
        if (id < 0 || static_cast<std::size_t>(id) >= logits.size()) {
            fail(ErrorCode::TokenOutOfRange, "answer id outside logits");
        }
        return logits[static_cast<std::size_t>(id)];
    };
    switch (spec.mode) {
        case AnswerMode::single_vs_single:
            return at(spec.correct.front()) - at(spec.wrong.front());
        case AnswerMode::set_sum_vs_set_sum: {
            float c = 0.0f;
            float w = 0.0f;
            for (auto id : spec.correct) c += at(id);
            for (auto id : spec.wrong) w += at(id);
            return c - w;
        }
        case AnswerMode::correct_vs_max_wrong: {
            float best = at(spec.wrong.front());
            for (auto id : spec.wrong) best = std::max(best, at(id));
            return at(spec.correct.front()) - best;
        }
    }
    return 0.0f;
}

double mean_logit_diff(const Tensor& logits, const TaskDataset& ds) {
    if (ds.pairs.empty()) fail(ErrorCode::EmptyDataset, "dataset is empty");
    const std::size_t B = logits.dim(0);
    const std::size_t S = logits.dim(1);
    const std::size_t V = logits.dim(2);
    if (B != ds.pairs.size()) fail(ErrorCode::CacheMismatch, "logit batch differs from dataset");
    double total = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        std::span<const float> row(logits.data() + (b * S + S - 1) * V, V);
        total += logit_diff(row, ds.pairs[b].answer);
    }
    return total / static_cast<double>(B);
}

double dataset_ld(const Model& model, const TaskDataset& ds) {
    if (ds.pairs.empty()) fail(ErrorCode::EmptyDataset, "dataset is empty");
    return mean_logit_diff(model.forward(ds.clean_batch()).logits, ds);
}

DigitPairSets two_token_greater_than_sets(int y1, int y2) {
    if (y1 < 0 || y1 > 9 || y2 < 0 || y2 > 9) {
        fail(ErrorCode::InvalidArgument, "digits must be in [0, 9]");
    }
    DigitPairSets out;
    for (int v1 = 0; v1 <= 9; ++v1) {
        for (int v2 = 0; v2 <= 9; ++v2) {
            const bool correct = v1 > y1 || (v1 == y1 && v2 > y2);
            (correct ? out.correct : out.wrong).emplace_back(v1, v2);
        }
    }
    return out;
}

// ---------------------------------------------------------------- JSON lines

void save_jsonl(const std::filesystem::path& path, const TaskDataset& ds) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
    for (const auto& p : ds.pairs) {
        json meta = p.meta;
        meta["seed"] = ds.seed;
        json line = {{"task", to_string(ds.task)},
                     {"clean_tokens", p.clean_tokens},
                     {"corrupted_tokens", p.corrupted_tokens},
                     {"correct_ids", p.answer.correct},
                     {"wrong_ids", p.answer.wrong},
                     {"mode", to_string(p.answer.mode)},
                     {"meta", meta}};
        out << line.dump() << '\n';
    }
}

TaskDataset load_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
    TaskDataset ds;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
            const json j = json::parse(line);
            const TaskKind task = parse_task(j.at("task").get<std::string>());
            if (first) {
                ds.task = task;
                if (j.at("meta").contains("seed")) ds.seed = j["meta"]["seed"].get<std::uint64_t>();
                first = false;
            } else if (task != ds.task) {
                fail(ErrorCode::FormatError, "mixed tasks in one dataset file");
            }
            SamplePair p;
            p.clean_tokens = j.at("clean_tokens").get<std::vector<std::int32_t>>();
            p.corrupted_tokens = j.at("corrupted_tokens").get<std::vector<std::int32_t>>();
            p.answer.correct = j.at("correct_ids").get<std::vector<std::int32_t>>();
            p.answer.wrong = j.at("wrong_ids").get<std::vector<std::int32_t>>();
            p.answer.mode = parse_answer_mode(j.at("mode").get<std::string>());
            p.meta = j.at("meta");
            p.meta.erase("seed");
            if (p.clean_tokens.size() != p.corrupted_tokens.size()) {
                fail(ErrorCode::AlignmentError, "clean and corrupted prompts differ in length");
            }
            ds.pairs.push_back(std::move(p));
        } catch (const json::exception& e) {
            fail(ErrorCode::FormatError, std::string("bad dataset line: ") + e.what());
        }
    }
    if (ds.pairs.empty()) fail(ErrorCode::EmptyDataset, "dataset file has no samples");
    return ds;
}

}  // namespace circuitforge::tasks
