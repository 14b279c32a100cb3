#pragma once

#include <vector>

#include "grad2task/encoder.hpp"
#include "grad2task/episodes.hpp"
#include "grad2task/task_embedding.hpp"

namespace g2t {

struct AdaptNetConfig {
    std::size_t embed_size = 0;   // task embedding width
    std::size_t model_dim = 0;
    std::size_t adapter_dim = 0;  // bottleneck width
    std::size_t num_adapters = 0;
    /// Plain linear maps instead of one-hidden-layer perceptrons.
    bool linear_only = false;

    std::size_t input_size() const { return embed_size + model_dim; }
    void validate() const;
};

/// Per-adapter blocks of four networks mapping concat(task embedding,
/// [CLS] activation) to the FiLM parameters. Gammas are parameterized as
/// 1 + raw output and final layers start at zero, so a fresh net emits the
/// identity modulation exactly. Parameters live under the "psi." prefix.
class AdaptNet {
public:
    AdaptNet(AdaptNetConfig cfg, Rng& rng);

    const AdaptNetConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    AdaptationParams generate(std::size_t adapter_index, const Tensor& task_embedding,
                              const Tensor& cls_activation) const;

private:
    Tensor head(const std::string& prefix, const Tensor& input) const;

    AdaptNetConfig cfg_;
    ParamStore params_;
};

AdaptationParams gen_adapt_params(const AdaptNet& net, std::size_t adapter_index,
                                  const Tensor& task_embedding, const Tensor& cls_activation);

/// Per-adapter linear maps from a task embedding to a flat residual on the
/// adapter's own weights; zero-initialized so the base adapters are
/// reproduced exactly at the start. Parameters live under "psi.hyper.".
class HyperNet {
public:
    HyperNet(std::size_t embed_size, std::size_t adapter_param_count, std::size_t num_adapters,
             Rng& rng);

    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    std::size_t num_adapters() const { return num_adapters_; }

    /// Flat residual of adapter_param_count entries for one adapter.
    Tensor adapter_residual(std::size_t adapter_index, const Tensor& task_embedding) const;

private:
    std::size_t embed_size_, param_count_, num_adapters_;
    ParamStore params_;
};

struct AdaptedPrediction {
    std::vector<Tensor> task_embeddings;          // one per adapter
    Tensor prototypes;                            // built from adapted support embeddings
    Tensor loss;                                  // mean query NLL, differentiable into phi/psi
    double accuracy = 0.0;
    std::vector<std::vector<double>> query_probs; // p_final per query example
};

/// Full pipeline: gradient features -> task embeddings -> auto-regressive
/// FiLM-adapted encoding of support and query -> nearest-prototype softmax.
/// adapt_all modulates every sequence position instead of [CLS] only.
AdaptedPrediction adapted_predict(BaseModel& model, const TaskEmbedNet& task_net,
                                  const AdaptNet& adapt_net, const Episode& episode,
                                  const FimOptions& fim_opts, Rng& rng, bool adapt_all = false);

/// Same pipeline, but task embeddings drive a hypernetwork that rewrites
/// the adapter weights wholesale instead of FiLM modulation.
AdaptedPrediction hypernet_predict(BaseModel& model, const TaskEmbedNet& task_net,
                                   const HyperNet& hyper_net, const Episode& episode,
                                   const FimOptions& fim_opts, Rng& rng);

/// Pipeline with a fixed task representation broadcast to every adapter
/// (input-only and input+label ablations supply `task_rep` directly).
AdaptedPrediction fixed_rep_predict(BaseModel& model, const AdaptNet& adapt_net,
                                    const Tensor& task_rep, const Episode& episode);

} // namespace g2t
