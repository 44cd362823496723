#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace mergeforge {

enum class Split { train, validation, test };

struct TaskExample {
    std::string prompt;
    std::string answer;
};

struct DatasetSizes {
    int train = 200;
    int validation = 100;
    int test = 100;
    int total() const { return train + validation + test; }
};

enum class TaskKind { classification, generation };

// Prompt/answer pairs with disjoint train/validation/test splits. Prompts of
// a support-disjoint task all start with support_tag (a single sentinel
// byte), which is what makes suite supports provably non-overlapping.
struct TaskDataset {
    std::string task_id;
    TaskKind kind = TaskKind::classification;
    std::vector<TaskExample> examples;
    std::vector<size_t> train_idx;
    std::vector<size_t> validation_idx;
    std::vector<size_t> test_idx;
    std::string support_tag;  // empty unless support-disjoint

    const std::vector<size_t>& split_indices(Split s) const;
    std::vector<std::string> prompts(Split s) const;
    std::vector<TaskExample> split_examples(Split s) const;
};

// Generator family: (kind, rule, seed) regenerate a dataset bit-identically.
struct TaskFamily {
    TaskKind kind;
    std::string rule;
    uint64_t seed = 0;
    DatasetSizes sizes;

    TaskDataset make() const;
};

// Classification rules: parity, majority_vowel, bracket_balance,
// starts_vowel, ends_digit, length_parity, contains_z.
TaskDataset make_classification_task(const std::string& rule, uint64_t seed,
                                     const DatasetSizes& sizes = {});

// Generation transformations: reverse, sort, duplicate, uppercase_vowels.
TaskDataset make_generation_task(const std::string& transformation, uint64_t seed,
                                 const DatasetSizes& sizes = {});

// n_tasks <= 8 digit-classification tasks drawn over one shared payload pool,
// each prompt prefixed by a sentinel byte unique to its task. Prompt sets are
// pairwise disjoint by construction while payloads overlap across tasks.
std::vector<TaskDataset> make_disjoint_suite(int n_tasks, uint64_t seed,
                                             const DatasetSizes& sizes = {});

// The default experiment suites: seven classification and four generation tasks.
std::vector<TaskDataset> default_classification_suite(uint64_t seed, const DatasetSizes& sizes = {});
std::vector<TaskDataset> default_generation_suite(uint64_t seed, const DatasetSizes& sizes = {});

const std::vector<std::string>& classification_rules();
const std::vector<std::string>& generation_transformations();

// JSONL: one {"task","split","prompt","answer"} object per example.
void write_jsonl(const std::filesystem::path& file, const TaskDataset& task);
TaskDataset read_jsonl(const std::filesystem::path& file);

}  // namespace mergeforge
