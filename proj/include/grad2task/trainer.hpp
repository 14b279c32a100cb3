#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <string>

#include "grad2task/adaptation.hpp"
#include "grad2task/encoder.hpp"
#include "grad2task/episodes.hpp"
#include "grad2task/task_embedding.hpp"

namespace g2t {

struct TrainConfig {
    int stage = 1;
    std::size_t episodes_per_step = 4; // episodes accumulated per Adam step
    std::size_t fim_rounds = 1;
    std::size_t shots = 4;
    std::size_t query_shots = 0; // 0 = shots
    double lr = 1e-3;            // default grid: {1e-3, 3e-4, 1e-4}
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t max_epochs = 10;
    std::size_t steps_per_epoch = 0; // 0 = derived from meta-train size
    std::size_t max_steps = 0;       // 0 = epoch budget only
    std::size_t patience = 2;        // epochs without val improvement
    std::size_t start_step = 0;      // resume offset; step rngs derive from it
    std::uint64_t seed = 0;
    std::size_t val_episodes = 20;
    bool restore_best = true;
    bool normalize_features = true;
    bool linear_adapt_net = false;
    std::size_t task_embed_size = 16;
    std::size_t task_embed_hidden = 32;
    std::string checkpoint_path;
    std::string metrics_path;
    /// Extra named scalars stored alongside the checkpoint (model geometry
    /// and the like); not a config-file key.
    std::map<std::string, double> checkpoint_extras;

    void validate() const;
};

/// Flat key=value text; '#' comments and blank lines skipped.
std::map<std::string, std::string> parse_config_file(const std::string& path);
/// Applies parsed (or override) pairs onto a config; unknown keys and
/// unparseable values are errors.
void apply_config(TrainConfig& cfg, const std::map<std::string, std::string>& kv);

/// CSV metrics writer (step, epoch, split, task, loss, accuracy). A
/// default-constructed or empty-path log discards records.
class MetricsLog {
public:
    MetricsLog() = default;
    explicit MetricsLog(const std::string& path);
    void record(std::size_t step, std::size_t epoch, const std::string& split,
                const std::string& task, double loss, double accuracy);

private:
    std::ofstream os_;
};

struct TrainResult {
    std::size_t steps = 0;  // optimizer steps taken (including start_step)
    std::size_t epochs = 0;
    double best_val_accuracy = 0.0;
    double best_val_loss = 0.0;
    double final_train_loss = 0.0;
};

/// Episodes per epoch scaled so one epoch sees roughly the whole meta-train
/// pool, then divided by the accumulation factor.
std::size_t derive_steps_per_epoch(const TaskRegistry& registry, const TrainConfig& cfg);

/// Stage 1: episodic prototypical-network training of the adapters, layer
/// norms and output head; transformer weights stay frozen.
TrainResult train_stage1(BaseModel& model, const TaskRegistry& registry, const TrainConfig& cfg);

/// Stage 2: the whole base model is frozen (its parameters never receive
/// gradients); only the task-embedding net (phi) and adaptation net (psi)
/// train on the adapted query loss.
TrainResult train_stage2(BaseModel& model, TaskEmbedNet& task_net, AdaptNet& adapt_net,
                         const TaskRegistry& registry, const TrainConfig& cfg,
                         bool adapt_all = false);

/// Stage 2 for the hypernetwork ablation.
TrainResult train_stage2_hypernet(BaseModel& model, TaskEmbedNet& task_net, HyperNet& hyper_net,
                                  const TaskRegistry& registry, const TrainConfig& cfg);

enum class FixedRepKind { input_mean, input_label };

/// Stage 2 for the fixed-representation ablations: the task vector is the
/// mean support embedding, optionally concatenated with encoded class
/// names; only psi trains.
TrainResult train_stage2_fixed(BaseModel& model, AdaptNet& adapt_net, FixedRepKind kind,
                               const Vocab& vocab, const TaskRegistry& registry,
                               const TrainConfig& cfg);

/// True when every final layer of the adaptation net is zero, i.e. the net
/// still emits the identity modulation.
bool adapt_net_at_identity(const AdaptNet& net);

} // namespace g2t
