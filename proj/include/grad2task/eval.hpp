#pragma once

#include <string>
#include <vector>

#include "grad2task/adaptation.hpp"
#include "grad2task/episodes.hpp"
#include "grad2task/task_embedding.hpp"
#include "grad2task/trainer.hpp"

namespace g2t {

enum class Variant { pn, grad2task, pn_longer, x, x_and_y, adapt_all, hypernet };

/// Parses one of {pn, grad2task, pn-longer, x, x-and-y, adapt-all,
/// hypernet}; the error message lists the valid names.
Variant parse_variant(const std::string& name);
std::string variant_name(Variant v);

struct EvalRow {
    std::string variant;
    std::string task;
    std::size_t k = 0;
    double mean_accuracy = 0.0;
    double std_accuracy = 0.0; // population std (n denominator)
    std::size_t runs = 0;
};

struct EvalReport {
    std::vector<EvalRow> rows;
};

void write_report_csv(const EvalReport& report, const std::string& path);
std::string format_report_table(const EvalReport& report);

/// Bundles whichever networks a variant needs; unused pointers stay null.
struct VariantModel {
    Variant variant = Variant::pn;
    BaseModel* model = nullptr;
    TaskEmbedNet* task_net = nullptr;
    AdaptNet* adapt_net = nullptr;
    HyperNet* hyper_net = nullptr;
    const Vocab* vocab = nullptr; // class-name encoding for x-and-y
    const TaskRegistry* registry = nullptr;
    FimOptions fim;
};

/// Single run: k support examples per class from the task's train pool, the
/// full test pool as queries.
double kshot_run_accuracy(VariantModel& vm, const LabeledDataset& ds, std::size_t k, Rng& rng);

/// The k-shot protocol: `runs` independent support draws per meta-test
/// task, full-test-pool accuracy each time, mean and population std.
/// Evaluating a meta-train task is an error unless allow_overlap.
EvalReport evaluate_kshot(VariantModel& vm, const TaskRegistry& registry, std::size_t k,
                          std::size_t runs, Rng& rng, bool allow_overlap = false,
                          const std::vector<std::string>& tasks = {});

// ---- same/different task probe ---------------------------------------------------

/// Mean of the per-adapter Fisher feature vectors (all adapters share one
/// flattened length).
std::vector<double> pooled_feature(const GradFeatures& feats);

struct SameDiffPair {
    std::vector<double> a, b;
    bool same = false;
};

struct SameDiffConfig {
    std::size_t proj_size = 16;
    double lr = 0.05;
    std::size_t steps = 200;
    std::uint64_t seed = 0;
};

/// Shared linear map W on both sides, cosine of the projections, then a
/// learnable affine into a sigmoid. score(A,B) = score(B,A) exactly.
class SameDiffModel {
public:
    SameDiffModel() = default;
    SameDiffModel(std::size_t input_size, std::size_t proj_size, Rng& rng);

    Tensor score(const std::vector<double>& a, const std::vector<double>& b) const;
    Tensor probability(const std::vector<double>& a, const std::vector<double>& b) const;

    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    std::size_t input_size() const { return input_size_; }

private:
    std::size_t input_size_ = 0, proj_size_ = 0;
    ParamStore params_;
};

/// Full-batch Adam on binary cross-entropy. Requires both labels present.
SameDiffModel samediff_train(const std::vector<SameDiffPair>& pairs, const SameDiffConfig& cfg);

/// ROC AUC of the model's probabilities on held-out pairs.
double samediff_eval(const SameDiffModel& model, const std::vector<SameDiffPair>& pairs);

/// Rank-based ROC AUC; ties count half. Throws if labels are single-class.
double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

/// Balanced same-task/different-task feature pairs from k-shot episodes of
/// the given role. Features are log-scaled pooled gradient statistics.
std::vector<SameDiffPair> build_samediff_pairs(BaseModel& model, const TaskRegistry& registry,
                                               Role role, std::size_t k,
                                               std::size_t pairs_per_kind, const FimOptions& fim,
                                               Rng& rng);

// ---- ablation orchestration ------------------------------------------------------

struct AblationConfig {
    TrainConfig train;                  // stage-2 budget; reused as the extra
                                        // stage-1 budget for pn-longer
    std::vector<std::size_t> ks = {4, 16};
    std::size_t runs = 10;
    std::size_t task_embed_hidden = 32;
    std::size_t task_embed_size = 16;
    std::uint64_t seed = 0;
};

/// Trains one variant on top of the already-loaded stage-1 model and
/// evaluates it on the meta-test tasks. The caller reloads the shared
/// stage-1 checkpoint between variants (pn-longer mutates the model).
EvalReport run_ablation(Variant v, BaseModel& model, const TaskRegistry& registry,
                        const Vocab& vocab, const AblationConfig& cfg);

} // namespace g2t
