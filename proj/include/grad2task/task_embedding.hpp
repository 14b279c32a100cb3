#pragma once

#include <string>
#include <vector>

#include "grad2task/encoder.hpp"
#include "grad2task/episodes.hpp"
#include "grad2task/param_store.hpp"
#include "grad2task/rng.hpp"
#include "grad2task/tensor.hpp"

namespace g2t {

/// Per-adapter diagonal Fisher features: mean over sampling rounds of the
/// elementwise squared gradient of the probe loss with respect to each
/// adapter's flattened parameters. Stored as plain doubles, so nothing
/// downstream can backpropagate through them.
struct GradFeatures {
    std::vector<std::vector<double>> layers; // one vector per adapter
    std::size_t rounds = 0;
};

struct FimOptions {
    std::size_t rounds = 1;
    std::size_t protos_per_class = 0; // 0 = ceil(shots / 2)
    std::size_t probe_size = 0;       // 0 = num_classes * ceil(shots / 2)
    /// Rescale each feature vector by 1 / (mean entry + 1e-12); raw squared
    /// gradients span many orders of magnitude.
    bool normalize = true;
};

/// Extracts Fisher-diagonal gradient features from the episode's support
/// set. Per round: splits the support into prototype and probe subsets,
/// samples pseudo-labels from the base model's own predictive distribution,
/// and backpropagates the summed negative log-likelihood into the adapter
/// parameters only. Deterministic given (weights, episode, rng seed).
GradFeatures fim_diag_features(BaseModel& model, const Episode& episode, const FimOptions& opts,
                               Rng& rng);

struct TaskEmbedConfig {
    std::size_t input_size = 0; // adapter parameter count
    std::size_t hidden_size = 32;
    std::size_t embed_size = 16;
    std::size_t num_gru_layers = 2;

    void validate() const;
};

/// Stacked gated recurrent cells (shared weights across all adapter steps)
/// with a learnable initial hidden state per cell and a linear output head.
/// Parameters live under the "phi." prefix.
class TaskEmbedNet {
public:
    TaskEmbedNet(TaskEmbedConfig cfg, Rng& rng);

    const TaskEmbedConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    /// Runs the recurrence over the feature sequence; one embedding per
    /// adapter. e_l depends only on features 1..l and the initial state.
    std::vector<Tensor> embed_layers(const GradFeatures& feats) const;

private:
    Tensor gru_cell(std::size_t layer, const Tensor& x, const Tensor& h) const;

    TaskEmbedConfig cfg_;
    ParamStore params_;
};

/// Mean base-model embedding of the support set (input-only task
/// representation).
Tensor mean_input_task_rep(const BaseModel& model, const Episode& episode);

/// Concatenation of the mean support embedding and the mean embedding of
/// the class-name strings treated as text.
Tensor input_label_task_rep(const BaseModel& model, const Episode& episode,
                            const std::vector<std::string>& class_names, const Vocab& vocab);

struct EpisodeEmbeddings {
    std::size_t episode_id = 0;
    std::string task_name;
    std::vector<Tensor> layers; // per-adapter task embeddings
};

/// CSV with columns episode_id, task_name, layer, dim_0..dim_{E-1}; values
/// printed with 12 significant digits.
void export_embeddings(const std::vector<EpisodeEmbeddings>& batch, const std::string& path);

} // namespace g2t
