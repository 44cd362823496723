#include "mergeforge/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include <json.hpp>

#include "mergeforge/errors.hpp"
#include "mergeforge/rng.hpp"

namespace mergeforge {

using nlohmann::json;

const std::vector<size_t>& TaskDataset::split_indices(Split s) const {
    switch (s) {
        case Split::train: return train_idx;
        case Split::validation: return validation_idx;
        default: return test_idx;
    }
}

std::vector<std::string> TaskDataset::prompts(Split s) const {
    std::vector<std::string> out;
    for (size_t i : split_indices(s)) out.push_back(examples[i].prompt);
    return out;
}

std::vector<TaskExample> TaskDataset::split_examples(Split s) const {
    std::vector<TaskExample> out;
    for (size_t i : split_indices(s)) out.push_back(examples[i]);
    return out;
}

TaskDataset TaskFamily::make() const {
    return kind == TaskKind::classification ? make_classification_task(rule, seed, sizes)
                                            : make_generation_task(rule, seed, sizes);
}

namespace {

constexpr const char* kAnswerCue = "Answer: ";
constexpr const char* kVowels = "aeiou";

bool is_vowel(char c) { return std::string_view(kVowels).find(c) != std::string_view::npos; }

std::string make_prompt(const std::string& tag, const std::string& instruction,
                        const std::string& payload) {
    return tag + instruction + "\n" + payload + "\n" + kAnswerCue;
}

std::string lowercase_letters(Rng& rng, int len, const char* alphabet = "abcdefghijklmnopqrstuvwxyz") {
    const int n = static_cast<int>(std::string_view(alphabet).size());
    std::string s;
    for (int i = 0; i < len; ++i) s.push_back(alphabet[rng.uniform_int(0, n - 1)]);
    return s;
}

std::string digit_string(Rng& rng, int len) {
    std::string s;
    for (int i = 0; i < len; ++i) s.push_back(static_cast<char>('0' + rng.uniform_int(0, 9)));
    return s;
}

bool brackets_balanced(const std::string& s) {
    int depth = 0;
    for (char c : s) {
        depth += c == '(' ? 1 : -1;
        if (depth < 0) return false;
    }
    return depth == 0;
}

struct ClassRule {
    std::string instruction;
    std::vector<std::string> labels;
    // Generates a payload whose label index equals target.
    std::function<std::string(Rng&, int target)> gen;
};

ClassRule classification_rule(const std::string& rule) {
    if (rule == "parity") {
        // Parity of the number spelled by the digit string, i.e. of its last digit.
        return {"even or odd?",
                {"even", "odd"},
                [](Rng& rng, int target) {
                    std::string s = digit_string(rng, static_cast<int>(rng.uniform_int(3, 6)));
                    int last = static_cast<int>(rng.uniform_int(0, 4)) * 2 + target;
                    s.back() = static_cast<char>('0' + last);
                    return s;
                }};
    }
    if (rule == "majority_vowel") {
        return {"mostly vowels?",
                {"vowel", "consonant"},
                [](Rng& rng, int target) {
                    const int len = 5;
                    int vowels = target == 0 ? static_cast<int>(rng.uniform_int(3, 5))
                                             : static_cast<int>(rng.uniform_int(0, 2));
                    std::string s;
                    for (int i = 0; i < len; ++i) {
                        bool want_vowel = (len - static_cast<int>(s.size())) <= vowels
                                              ? true
                                              : (vowels > 0 && rng.uniform() < 0.5);
                        if (want_vowel && vowels > 0) {
                            s.push_back(kVowels[rng.uniform_int(0, 4)]);
                            --vowels;
                        } else {
                            s.push_back(lowercase_letters(rng, 1, "bcdfghjklmnpqrstvwxyz")[0]);
                        }
                    }
                    return s;
                }};
    }
    if (rule == "bracket_balance") {
        return {"balanced?",
                {"balanced", "unbalanced"},
                [](Rng& rng, int target) {
                    for (;;) {
                        const int len = 2 * static_cast<int>(rng.uniform_int(2, 7));  // 4..14
                        std::string s;
                        for (int i = 0; i < len; ++i) s.push_back(rng.uniform() < 0.5 ? '(' : ')');
                        if (brackets_balanced(s) == (target == 0)) return s;
                    }
                }};
    }
    if (rule == "starts_vowel") {
        return {"starts with a vowel?",
                {"yes", "no"},
                [](Rng& rng, int target) {
                    std::string s = lowercase_letters(rng, static_cast<int>(rng.uniform_int(3, 7)));
                    s[0] = target == 0 ? kVowels[rng.uniform_int(0, 4)]
                                       : lowercase_letters(rng, 1, "bcdfghjklmnpqrstvwxyz")[0];
                    return s;
                }};
    }
    if (rule == "ends_digit") {
        return {"ends with a digit?",
                {"yes", "no"},
                [](Rng& rng, int target) {
                    std::string s;
                    const int len = static_cast<int>(rng.uniform_int(3, 7));
                    for (int i = 0; i < len; ++i) {
                        s += rng.uniform() < 0.3 ? digit_string(rng, 1) : lowercase_letters(rng, 1);
                    }
                    s.back() = target == 0 ? digit_string(rng, 1)[0] : lowercase_letters(rng, 1)[0];
                    return s;
                }};
    }
    if (rule == "length_parity") {
        return {"length even or odd?",
                {"even", "odd"},
                [](Rng& rng, int target) {
                    int len = static_cast<int>(rng.uniform_int(2, 4)) * 2 + target;  // 4..9
                    return lowercase_letters(rng, len);
                }};
    }
    if (rule == "contains_z") {
        return {"any z?",
                {"yes", "no"},
                [](Rng& rng, int target) {
                    const int len = static_cast<int>(rng.uniform_int(4, 8));
                    std::string s = lowercase_letters(rng, len, "abcdefghijklmnopqrstuvwxy");
                    if (target == 0) s[rng.uniform_int(0, len - 1)] = 'z';
                    return s;
                }};
    }
    throw ContractViolation("unknown classification rule: " + rule);
}

struct GenRule {
    std::string instruction;
    std::function<std::string(Rng&)> gen_payload;
    std::function<std::string(const std::string&)> transform;
};

GenRule generation_rule(const std::string& name) {
    if (name == "reverse") {
        return {"reverse it.",
                [](Rng& rng) { return lowercase_letters(rng, static_cast<int>(rng.uniform_int(3, 6))); },
                [](const std::string& p) { return std::string(p.rbegin(), p.rend()); }};
    }
    if (name == "sort") {
        return {"sort the letters.",
                [](Rng& rng) {
                    return lowercase_letters(rng, static_cast<int>(rng.uniform_int(3, 6)), "abcdef");
                },
                [](const std::string& p) {
                    std::string s = p;
                    std::sort(s.begin(), s.end());
                    return s;
                }};
    }
    if (name == "duplicate") {
        return {"repeat twice with a dash.",
                [](Rng& rng) { return lowercase_letters(rng, static_cast<int>(rng.uniform_int(3, 6))); },
                [](const std::string& p) { return p + "-" + p; }};
    }
    if (name == "uppercase_vowels") {
        return {"uppercase the vowels.",
                [](Rng& rng) { return lowercase_letters(rng, static_cast<int>(rng.uniform_int(3, 6))); },
                [](const std::string& p) {
                    std::string s = p;
                    for (char& c : s)
                        if (is_vowel(c)) c = static_cast<char>(c - 'a' + 'A');
                    return s;
                }};
    }
    throw ContractViolation("unknown generation transformation: " + name);
}

void assign_splits(TaskDataset& task, const DatasetSizes& sizes) {
    task.train_idx.clear();
    task.validation_idx.clear();
    task.test_idx.clear();
    for (int i = 0; i < sizes.train; ++i) task.train_idx.push_back(static_cast<size_t>(i));
    for (int i = 0; i < sizes.validation; ++i)
        task.validation_idx.push_back(static_cast<size_t>(sizes.train + i));
    for (int i = 0; i < sizes.test; ++i)
        task.test_idx.push_back(static_cast<size_t>(sizes.train + sizes.validation + i));
}

}  // namespace

const std::vector<std::string>& classification_rules() {
    static const std::vector<std::string> rules = {
        "parity",     "majority_vowel", "bracket_balance", "starts_vowel",
        "ends_digit", "length_parity",  "contains_z"};
    return rules;
}

const std::vector<std::string>& generation_transformations() {
    static const std::vector<std::string> rules = {"reverse", "sort", "duplicate",
                                                   "uppercase_vowels"};
    return rules;
}

TaskDataset make_classification_task(const std::string& rule, uint64_t seed,
                                     const DatasetSizes& sizes) {
    ClassRule r = classification_rule(rule);
    Rng rng = Rng(seed).fork("task/classification/" + rule);

    TaskDataset task;
    task.task_id = rule;
    task.kind = TaskKind::classification;

    std::set<std::string> seen;
    const int total = sizes.total();
    for (int i = 0; i < total; ++i) {
        const int target = i % 2;  // alternating targets keep labels balanced within +-1
        for (int tries = 0;; ++tries) {
            if (tries > 100000) throw NumericError("payload space exhausted for rule " + rule);
            std::string payload = r.gen(rng, target);
            std::string prompt = make_prompt("", r.instruction, payload);
            if (seen.insert(prompt).second) {
                task.examples.push_back({std::move(prompt), r.labels[static_cast<size_t>(target)]});
                break;
            }
        }
    }
    assign_splits(task, sizes);
    return task;
}

TaskDataset make_generation_task(const std::string& transformation, uint64_t seed,
                                 const DatasetSizes& sizes) {
    GenRule r = generation_rule(transformation);
    Rng rng = Rng(seed).fork("task/generation/" + transformation);

    TaskDataset task;
    task.task_id = transformation;
    task.kind = TaskKind::generation;

    std::set<std::string> seen;
    const int total = sizes.total();
    for (int i = 0; i < total; ++i) {
        for (int tries = 0;; ++tries) {
            if (tries > 100000)
                throw NumericError("payload space exhausted for transformation " + transformation);
            std::string payload = r.gen_payload(rng);
            std::string prompt = make_prompt("", r.instruction, payload);
            if (seen.insert(prompt).second) {
                task.examples.push_back({std::move(prompt), r.transform(payload)});
                break;
            }
        }
    }
    assign_splits(task, sizes);
    return task;
}

namespace {

// Digit rules for the support-disjoint suite; all share one payload pool so
// that disjointness comes from the sentinel alone.
struct DigitRule {
    std::string name;
    std::string instruction;
    std::vector<std::string> labels;
    std::function<int(const std::string&)> label_of;
};

const std::vector<DigitRule>& digit_rules() {
    static const std::vector<DigitRule> rules = {
        {"parity", "even or odd?", {"even", "odd"},
         [](const std::string& p) { return (p.back() - '0') % 2; }},
        {"has_seven", "any 7?", {"yes", "no"},
         [](const std::string& p) { return p.find('7') != std::string::npos ? 0 : 1; }},
        {"first_odd", "first digit odd?", {"yes", "no"},
         [](const std::string& p) { return (p.front() - '0') % 2 == 1 ? 0 : 1; }},
        {"len_parity", "length even or odd?", {"even", "odd"},
         [](const std::string& p) { return static_cast<int>(p.size()) % 2; }},
        {"first_big", "first digit 5 or more?", {"yes", "no"},
         [](const std::string& p) { return p.front() >= '5' ? 0 : 1; }},
        {"has_zero", "any 0?", {"yes", "no"},
         [](const std::string& p) { return p.find('0') != std::string::npos ? 0 : 1; }},
        {"descending", "first digit more than last?", {"yes", "no"},
         [](const std::string& p) { return p.front() > p.back() ? 0 : 1; }},
        {"ascending", "first digit less than last?", {"yes", "no"},
         [](const std::string& p) { return p.front() < p.back() ? 0 : 1; }},
    };
    return rules;
}

constexpr const char* kSentinels = "#$%&*+@^";

}  // namespace

std::vector<TaskDataset> make_disjoint_suite(int n_tasks, uint64_t seed,
                                             const DatasetSizes& sizes) {
    if (n_tasks < 1 || n_tasks > 8) throw ContractViolation("disjoint suite supports 1..8 tasks");

    Rng pool_rng = Rng(seed).fork("disjoint/pool");
    std::set<std::string> pool_set;
    const size_t pool_size = std::max<size_t>(1600, static_cast<size_t>(sizes.total()) * 4);
    while (pool_set.size() < pool_size) {
        pool_set.insert(digit_string(pool_rng, static_cast<int>(pool_rng.uniform_int(3, 6))));
    }
    std::vector<std::string> pool(pool_set.begin(), pool_set.end());
    std::shuffle(pool.begin(), pool.end(), pool_rng.engine());

    std::vector<TaskDataset> suite;
    for (int t = 0; t < n_tasks; ++t) {
        const DigitRule& rule = digit_rules()[static_cast<size_t>(t)];
        Rng rng = Rng(seed).fork("disjoint/task/" + rule.name);

        std::vector<std::vector<std::string>> by_label(rule.labels.size());
        for (const auto& payload : pool) {
            by_label[static_cast<size_t>(rule.label_of(payload))].push_back(payload);
        }
        const int per_label = (sizes.total() + 1) / 2;
        for (size_t li = 0; li < by_label.size(); ++li) {
            if (static_cast<int>(by_label[li].size()) < per_label)
                throw NumericError("shared payload pool too small for rule " + rule.name);
            std::shuffle(by_label[li].begin(), by_label[li].end(), rng.engine());
        }

        TaskDataset task;
        task.task_id = "dj" + std::to_string(t) + "_" + rule.name;
        task.kind = TaskKind::classification;
        task.support_tag = std::string(1, kSentinels[t]);
        std::vector<size_t> cursor(rule.labels.size(), 0);
        for (int i = 0; i < sizes.total(); ++i) {
            const int target = i % 2;
            const std::string& payload = by_label[static_cast<size_t>(target)][cursor[static_cast<size_t>(target)]++];
            task.examples.push_back(
                {make_prompt(task.support_tag, rule.instruction, payload),
                 rule.labels[static_cast<size_t>(target)]});
        }
        assign_splits(task, sizes);
        suite.push_back(std::move(task));
    }
    return suite;
}

std::vector<TaskDataset> default_classification_suite(uint64_t seed, const DatasetSizes& sizes) {
    std::vector<TaskDataset> suite;
    for (const auto& rule : classification_rules())
        suite.push_back(make_classification_task(rule, seed, sizes));
    return suite;
}

std::vector<TaskDataset> default_generation_suite(uint64_t seed, const DatasetSizes& sizes) {
    std::vector<TaskDataset> suite;
    for (const auto& rule : generation_transformations())
        suite.push_back(make_generation_task(rule, seed, sizes));
    return suite;
}

namespace {

const char* split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::validation: return "validation";
        default: return "test";
    }
}

}  // namespace

void write_jsonl(const std::filesystem::path& file, const TaskDataset& task) {
    std::ofstream out(file);
    if (!out) throw ContractViolation("cannot write " + file.string());
    auto dump_split = [&](Split s) {
        for (size_t i : task.split_indices(s)) {
            json j = {{"task", task.task_id},
                      {"split", split_name(s)},
                      {"prompt", task.examples[i].prompt},
                      {"answer", task.examples[i].answer}};
            out << j.dump() << "\n";
        }
    };
    dump_split(Split::train);
    dump_split(Split::validation);
    dump_split(Split::test);
}

TaskDataset read_jsonl(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw ContractViolation("cannot read " + file.string());
    TaskDataset task;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        const std::string split = j.at("split").get<std::string>();
        if (task.examples.empty()) task.task_id = j.at("task").get<std::string>();
        size_t idx = task.examples.size();
        task.examples.push_back({j.at("prompt").get<std::string>(), j.at("answer").get<std::string>()});
        if (split == "train") task.train_idx.push_back(idx);
        else if (split == "validation") task.validation_idx.push_back(idx);
        else if (split == "test") task.test_idx.push_back(idx);
        else throw ContractViolation("unknown split in " + file.string() + ": " + split);
    }
    // Metric routing: generation transformations are known by name, everything
    // else evaluates as classification.
    const auto& gens = generation_transformations();
    task.kind = std::find(gens.begin(), gens.end(), task.task_id) != gens.end()
                    ? TaskKind::generation
                    : TaskKind::classification;
    // Sentinel detection: a task is support-disjoint iff every prompt starts
    // with the same sentinel byte from the disjoint-suite alphabet.
    if (!task.examples.empty()) {
        char first = task.examples.front().prompt.empty() ? '\0' : task.examples.front().prompt[0];
        if (first && std::string_view(kSentinels).find(first) != std::string_view::npos) {
            bool all = std::all_of(task.examples.begin(), task.examples.end(),
                                   [&](const TaskExample& e) {
                                       return !e.prompt.empty() && e.prompt[0] == first;
                                   });
            if (all) task.support_tag = std::string(1, first);
        }
    }
    return task;
}

}  // namespace mergeforge
