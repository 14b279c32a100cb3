#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "grad2task/param_store.hpp"
#include "grad2task/rng.hpp"
#include "grad2task/tensor.hpp"

namespace g2t {

struct EncoderConfig {
    std::size_t vocab_size = 0;
    std::size_t max_seq_len = 32;
    std::size_t model_dim = 32;
    std::size_t num_layers = 2;
    std::size_t num_heads = 2;
    std::size_t ffn_dim = 64;
    std::size_t adapter_dim = 8;   // bottleneck width
    std::size_t head_out_dim = 32; // output embedding size
    double dropout_rate = 0.1;

    void validate() const;
    std::size_t num_adapters() const { return 2 * num_layers; }
    /// Flattened parameter count of one bottleneck adapter
    /// (down W+b, up W+b).
    std::size_t adapter_param_count() const {
        return model_dim * adapter_dim + adapter_dim + adapter_dim * model_dim + model_dim;
    }
};

/// Per-adapter FiLM parameters. Identity element is gammas of ones and
/// betas of zeros.
struct AdaptationParams {
    Tensor gamma_mid, beta_mid; // bottleneck width
    Tensor gamma_out, beta_out; // model width

    static AdaptationParams identity(std::size_t bottleneck_dim, std::size_t model_dim);
    void validate(std::size_t bottleneck_dim, std::size_t model_dim) const;
};

/// Produces FiLM parameters for adapter `index` from the [CLS] hidden state
/// entering that adapter (auto-regressive adaptation).
using AdaptCallback = std::function<AdaptationParams(std::size_t index, const Tensor& cls_activation)>;

/// Tiny transformer encoder with two bottleneck adapters per layer, [CLS]
/// pooling and a linear output head. Parameter names are partitioned by
/// prefix: "theta." (embeddings, attention, FFN), "alpha." (adapters),
/// "ln." (layer norms), "omega." (output head).
class BaseModel {
public:
    BaseModel(EncoderConfig cfg, Rng& rng);

    const EncoderConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    std::size_t num_adapters() const { return cfg_.num_adapters(); }

    /// [CLS] embedding of head_out_dim, eval mode (deterministic).
    Tensor encode(std::span<const int> tokens) const;
    Tensor encode(std::span<const int> tokens, bool training, Rng* dropout_rng) const;

    /// Forward with FiLM modulation of every adapter; exact encode() when
    /// all parameters are the identity element. adapt_all applies FiLM to
    /// every sequence position instead of [CLS] only.
    Tensor encode_adapted(std::span<const int> tokens,
                          std::span<const AdaptationParams> per_adapter,
                          bool adapt_all = false) const;
    Tensor encode_adapted(std::span<const int> tokens, const AdaptCallback& generate,
                          bool adapt_all = false) const;

    /// Forward with adapter weights replaced wholesale (hypernetwork
    /// variant). One flat tensor of adapter_param_count() per adapter,
    /// layed out as down W, down b, up W, up b.
    Tensor encode_with_adapter_override(std::span<const int> tokens,
                                        const std::vector<Tensor>& adapter_weights) const;

    /// Final hidden matrix [seq_len, model_dim] before pooling; used by the
    /// masked-token warmup.
    Tensor hidden_states(std::span<const int> tokens, bool training, Rng* dropout_rng) const;

    /// Residual bottleneck map on a single hidden vector:
    /// h + up(gelu(down(h))).
    Tensor adapter_forward(std::size_t adapter_index, const Tensor& h) const;

    std::vector<std::string> adapter_param_names(std::size_t adapter_index) const;
    /// Current gradient of one adapter's parameters, flattened; throws if
    /// any piece is missing.
    std::vector<double> flat_adapter_grads(std::size_t adapter_index) const;

    // Parameter group predicates (by name prefix).
    static bool is_theta(const std::string& name) { return name.rfind("theta.", 0) == 0; }
    static bool is_alpha(const std::string& name) { return name.rfind("alpha.", 0) == 0; }
    static bool is_layer_norm(const std::string& name) { return name.rfind("ln.", 0) == 0; }
    static bool is_omega(const std::string& name) { return name.rfind("omega.", 0) == 0; }

private:
    struct ForwardMode {
        bool training = false;
        Rng* dropout_rng = nullptr;
        const AdaptCallback* film = nullptr;
        bool adapt_all = false;
        const std::vector<Tensor>* adapter_override = nullptr;
    };
    Tensor forward(std::span<const int> tokens, const ForwardMode& mode) const;
    Tensor apply_adapter(std::size_t index, const Tensor& h, const ForwardMode& mode) const;
    Tensor attention_block(std::size_t layer, const Tensor& h) const;
    Tensor ffn_block(std::size_t layer, const Tensor& h) const;

    EncoderConfig cfg_;
    ParamStore params_;
};

struct PretrainResult {
    std::vector<double> loss_curve;
    double masked_accuracy = 0.0;
};

/// Masked-token-prediction warmup for the transformer weights theta. Only
/// theta is updated; adapters, layer norms and the head are untouched.
PretrainResult pretrain_encoder(BaseModel& model,
                                const std::vector<std::vector<int>>& corpus,
                                std::size_t steps, double lr, Rng& rng);

} // namespace g2t
