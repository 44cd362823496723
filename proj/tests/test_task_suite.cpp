#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <set>

#include "mergeforge/errors.hpp"
#include "mergeforge/model.hpp"
#include "mergeforge/tasks.hpp"

using namespace mergeforge;

TEST_SUITE_BEGIN("task_suite");

namespace {

// Payload is the middle line of "instruction\npayload\nAnswer: ".
std::string payload_of(const std::string& prompt) {
    const size_t a = prompt.find('\n');
    const size_t b = prompt.find('\n', a + 1);
    return prompt.substr(a + 1, b - a - 1);
}

// Independent stack-based bracket checker.
bool stack_balanced(const std::string& s) {
    int depth = 0;
    for (char c : s) {
        if (c == '(') ++depth;
        else if (c == ')') {
            if (depth == 0) return false;
            --depth;
        }
    }
    return depth == 0;
}

}  // namespace

TEST_CASE("parity task: labels closed, balanced, and correct") {
    TaskDataset task = make_classification_task("parity", 7);
    CHECK(task.examples.size() == 400);
    int even = 0, odd = 0;
    for (const auto& e : task.examples) {
        REQUIRE((e.answer == "even" || e.answer == "odd"));
        (e.answer == "even" ? even : odd)++;
        // parity of the number spelled by the payload = parity of its last digit
        const std::string payload = payload_of(e.prompt);
        const int last = payload.back() - '0';
        CHECK(e.answer == (last % 2 == 0 ? "even" : "odd"));
    }
    CHECK(std::abs(even - odd) <= 1);
}

TEST_CASE("default split sizes are 200/100/100") {
    TaskDataset task = make_classification_task("contains_z", 3);
    CHECK(task.train_idx.size() == 200);
    CHECK(task.validation_idx.size() == 100);
    CHECK(task.test_idx.size() == 100);
}

TEST_CASE("bracket-balance answers agree with a stack checker on every prompt") {
    TaskDataset task = make_classification_task("bracket_balance", 11);
    for (const auto& e : task.examples) {
        const bool balanced = stack_balanced(payload_of(e.prompt));
        CHECK(e.answer == (balanced ? "balanced" : "unbalanced"));
    }
}

TEST_CASE("every classification rule produces its declared labels") {
    for (const auto& rule : classification_rules()) {
        TaskDataset task = make_classification_task(rule, 19);
        std::set<std::string> labels;
        for (const auto& e : task.examples) labels.insert(e.answer);
        CHECK(labels.size() == 2);
    }
}

TEST_CASE("unknown rules are rejected") {
    CHECK_THROWS_AS(make_classification_task("sudoku", 1), ContractViolation);
    CHECK_THROWS_AS(make_generation_task("translate", 1), ContractViolation);
}

TEST_CASE("generation answers match an independent recomputation") {
    auto second_impl = [](const std::string& rule, std::string p) -> std::string {
        if (rule == "reverse") {
            std::reverse(p.begin(), p.end());
            return p;
        }
        if (rule == "sort") {
            std::sort(p.begin(), p.end());
            return p;
        }
        if (rule == "duplicate") return p + "-" + p;
        // uppercase_vowels
        for (char& c : p)
            if (c == 'a' || c == 'e' || c == 'i' || c == 'o' || c == 'u')
                c = static_cast<char>(c - 'a' + 'A');
        return p;
    };
    for (const auto& rule : generation_transformations()) {
        TaskDataset task = make_generation_task(rule, 23);
        CHECK(task.kind == TaskKind::generation);
        for (const auto& e : task.examples)
            CHECK(e.answer == second_impl(rule, payload_of(e.prompt)));
    }
}

TEST_CASE("generation transformations on fixed payloads") {
    // reverse("abc") = "cba", sort("bca") = "abc" per the rule definitions.
    TaskDataset rev = make_generation_task("reverse", 1);
    TaskDataset srt = make_generation_task("sort", 1);
    auto check_rule = [&](const TaskDataset& t, const std::string& payload, const std::string& want) {
        for (const auto& e : t.examples)
            if (payload_of(e.prompt) == payload) CHECK(e.answer == want);
    };
    check_rule(rev, "abc", "cba");
    check_rule(srt, "bca", "abc");
}

TEST_CASE("regeneration from the same seed is bitwise identical") {
    for (int variant = 0; variant < 2; ++variant) {
        TaskFamily fam{variant == 0 ? TaskKind::classification : TaskKind::generation,
                       variant == 0 ? "majority_vowel" : "duplicate", 31, {}};
        TaskDataset a = fam.make();
        TaskDataset b = fam.make();
        REQUIRE(a.examples.size() == b.examples.size());
        for (size_t i = 0; i < a.examples.size(); ++i) {
            CHECK(a.examples[i].prompt == b.examples[i].prompt);
            CHECK(a.examples[i].answer == b.examples[i].answer);
        }
        CHECK(a.train_idx == b.train_idx);
    }
}

TEST_CASE("no prompt appears in two splits") {
    for (const auto& rule : classification_rules()) {
        TaskDataset task = make_classification_task(rule, 5);
        std::set<std::string> train, val, test;
        for (size_t i : task.train_idx) train.insert(task.examples[i].prompt);
        for (size_t i : task.validation_idx) val.insert(task.examples[i].prompt);
        for (size_t i : task.test_idx) test.insert(task.examples[i].prompt);
        CHECK(train.size() == task.train_idx.size());
        for (const auto& p : val) CHECK(train.count(p) == 0);
        for (const auto& p : test) {
            CHECK(train.count(p) == 0);
            CHECK(val.count(p) == 0);
        }
    }
}

TEST_CASE("disjoint suite: sentinels make prompt sets pairwise disjoint") {
    auto suite = make_disjoint_suite(7, 13);
    REQUIRE(suite.size() == 7);

    std::set<std::string> sentinels;
    for (const auto& task : suite) {
        REQUIRE(task.support_tag.size() == 1);
        sentinels.insert(task.support_tag);
        for (const auto& e : task.examples) CHECK(e.prompt.substr(0, 1) == task.support_tag);
    }
    CHECK(sentinels.size() == 7);

    for (size_t a = 0; a < suite.size(); ++a) {
        std::set<std::string> pa;
        for (const auto& e : suite[a].examples) pa.insert(e.prompt);
        for (size_t b = a + 1; b < suite.size(); ++b)
            for (const auto& e : suite[b].examples) CHECK(pa.count(e.prompt) == 0);
    }
}

TEST_CASE("disjoint suite payloads overlap once sentinels are stripped") {
    auto suite = make_disjoint_suite(2, 13);
    std::set<std::string> payloads_a, payloads_b;
    for (const auto& e : suite[0].examples) payloads_a.insert(payload_of(e.prompt));
    for (const auto& e : suite[1].examples) payloads_b.insert(payload_of(e.prompt));
    size_t shared = 0;
    for (const auto& p : payloads_a) shared += payloads_b.count(p);
    CHECK(shared > 0);  // disjointness comes from the sentinel alone
}

TEST_CASE("disjoint suite is capped at 8 tasks") {
    CHECK_THROWS_AS(make_disjoint_suite(9, 1), ContractViolation);
    CHECK(make_disjoint_suite(8, 1).size() == 8);
}

TEST_CASE("default suites have seven classification and four generation tasks") {
    CHECK(default_classification_suite(2).size() == 7);
    CHECK(default_generation_suite(2).size() == 4);
}

TEST_CASE("every example fits the model context window") {
    ModelConfig config;  // default max_seq_len 64
    auto check_task = [&](const TaskDataset& task) {
        for (const auto& e : task.examples) {
            // BOS + prompt + answer + EOS must fit for training and generation.
            const size_t need = 1 + e.prompt.size() + e.answer.size() + 1;
            CHECK(need <= static_cast<size_t>(config.max_seq_len));
        }
    };
    for (const auto& t : default_classification_suite(41)) check_task(t);
    for (const auto& t : default_generation_suite(41)) check_task(t);
    for (const auto& t : make_disjoint_suite(8, 41)) check_task(t);
}

TEST_CASE("jsonl round trip preserves the dataset") {
    namespace fs = std::filesystem;
    const fs::path file = fs::temp_directory_path() / "mergeforge_task.jsonl";
    for (const TaskDataset& task :
         {make_classification_task("parity", 3), make_generation_task("reverse", 3),
          make_disjoint_suite(2, 3)[0]}) {
        write_jsonl(file, task);
        TaskDataset loaded = read_jsonl(file);
        CHECK(loaded.task_id == task.task_id);
        CHECK(loaded.kind == task.kind);
        CHECK(loaded.support_tag == task.support_tag);
        REQUIRE(loaded.examples.size() == task.examples.size());
        CHECK(loaded.train_idx == task.train_idx);
        CHECK(loaded.validation_idx == task.validation_idx);
        CHECK(loaded.test_idx == task.test_idx);
        for (size_t i = 0; i < task.examples.size(); ++i) {
            CHECK(loaded.examples[i].prompt == task.examples[i].prompt);
            CHECK(loaded.examples[i].answer == task.examples[i].answer);
        }
    }
    fs::remove(file);
}

TEST_SUITE_END();
