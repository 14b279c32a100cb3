#pragma once

#include <string>
#include <utility>
#include <vector>

#include "grad2task/rng.hpp"
#include "grad2task/vocab.hpp"

namespace g2t {

struct TextExample {
    std::vector<int> tokens; // [CLS]-prefixed token ids
    int label = 0;           // dense id into class_names
};

/// One task's labeled data with train/val/test pools.
struct LabeledDataset {
    std::string name;
    std::vector<std::string> class_names;
    std::vector<TextExample> train, val, test;

    std::size_t num_classes() const { return class_names.size(); }
    void validate() const; // class ids in range, names unique
};

/// One few-shot task instance: support and query sets from a single task.
/// Class ids are episode-local, 0..num_classes-1, with k support examples
/// per class; support and query are disjoint draws.
struct Episode {
    std::string task;
    std::size_t num_classes = 0;
    std::size_t shots = 0;
    std::vector<std::pair<std::vector<int>, int>> support, query;
};

enum class Role { meta_train, meta_test };

/// Named datasets with sqrt-of-size sampling weights over the meta-train
/// pool.
class TaskRegistry {
public:
    void add(LabeledDataset ds, Role role);

    bool has(const std::string& name) const;
    const LabeledDataset& dataset(const std::string& name) const;
    Role role(const std::string& name) const;
    std::vector<const LabeledDataset*> by_role(Role role) const;
    std::size_t size() const { return datasets_.size(); }

    /// weight_i = sqrt(|D_i|) / sum_j sqrt(|D_j|), over meta-train tasks.
    std::vector<double> train_weights() const;
    std::vector<std::string> train_names() const;

    /// Categorical draw over meta-train tasks with sqrt-size weights.
    const std::string& sample_task(Rng& rng) const;

private:
    struct Item {
        LabeledDataset ds;
        Role role;
    };
    std::vector<Item> datasets_;
};

// ---- ingestion ----------------------------------------------------------------

/// Parse a JSONL file of {"text": ..., "label": ...} objects into the train
/// pool. Labels get dense ids in first-occurrence order.
LabeledDataset load_jsonl(const std::string& path, const Vocab& vocab,
                          const std::string& name = "");

/// Assemble a dataset from three JSONL files sharing the train file's label
/// mapping.
LabeledDataset load_dataset(const std::string& name, const std::string& train_path,
                            const std::string& val_path, const std::string& test_path,
                            const Vocab& vocab);

void save_jsonl(const std::vector<TextExample>& pool,
                const std::vector<std::string>& class_names, const Vocab& vocab,
                const std::string& path);

struct RegistryManifestEntry {
    Role role;
    std::string name, train_path, val_path, test_path;
};
void save_registry_manifest(const std::string& path,
                            const std::vector<RegistryManifestEntry>& entries);
std::vector<RegistryManifestEntry> load_registry_manifest(const std::string& path);
TaskRegistry load_registry(const std::string& manifest_path, const Vocab& vocab);

// ---- synthetic task suite -------------------------------------------------------

enum class FamilyKind { keyword_presence, keyword_parity, dominant_topic, lexicon_sentiment };

struct FamilySpec {
    FamilyKind kind;
    std::string name;
    std::size_t num_classes = 2; // used by dominant_topic (3, 5, or 7)
};

struct SyntheticSpec {
    std::vector<FamilySpec> families;
    std::size_t seq_len = 16;            // tokens per example including [CLS]
    std::size_t train_per_class = 64;
    std::size_t val_per_class = 16;
    std::size_t min_test_examples = 200; // per dataset
    double label_noise = 0.0;
    std::size_t filler_tokens_per_family = 12;
    std::size_t max_vocab_size = 0; // 0 = unbounded

    static SyntheticSpec default_suite();
};

/// Generates one dataset per family, each over its own disjoint vocabulary
/// region (tokens are appended to `vocab`). Labels are a pure function of
/// the token sequence when label_noise == 0.
std::vector<LabeledDataset> make_synthetic_suite(Rng& rng, const SyntheticSpec& spec,
                                                 Vocab& vocab);

// ---- sampling -------------------------------------------------------------------

/// k support + query_k query examples per class, drawn without replacement
/// from the given pool (default: train).
Episode sample_episode(const LabeledDataset& ds, std::size_t k, std::size_t query_k, Rng& rng);
Episode sample_episode_from(const LabeledDataset& ds, const std::vector<TextExample>& pool,
                            std::size_t k, std::size_t query_k, Rng& rng);

/// Two disjoint subsets of the support set: m examples per class for
/// prototype building, and probe_size further examples.
std::pair<std::vector<std::pair<std::vector<int>, int>>,
          std::vector<std::pair<std::vector<int>, int>>>
subsample_support(const Episode& episode, std::size_t proto_per_class, std::size_t probe_size,
                  Rng& rng);

} // namespace g2t
