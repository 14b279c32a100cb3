#include "grad2task/adaptation.hpp"

#include <cmath>
#include <stdexcept>

#include "grad2task/proto.hpp"

namespace g2t {

void AdaptNetConfig::validate() const {
    if (embed_size == 0 || model_dim == 0 || adapter_dim == 0 || num_adapters == 0) {
        throw std::invalid_argument("AdaptNetConfig: zero-sized dimension");
    }
}

namespace {

Tensor init_matrix(Rng& rng, std::size_t rows, std::size_t cols) {
    double stddev = 1.0 / std::sqrt(static_cast<double>(cols));
    std::vector<double> data(rows * cols);
    for (auto& x : data) x = rng.normal(0.0, stddev);
    return Tensor::from_data({rows, cols}, std::move(data));
}

} // namespace

AdaptNet::AdaptNet(AdaptNetConfig cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    std::size_t in = cfg_.input_size();
    std::size_t hidden = 2 * in;
    for (std::size_t l = 0; l < cfg_.num_adapters; ++l) {
        for (const char* h : {"gmid", "bmid", "gout", "bout"}) {
            std::string p = "psi.a" + std::to_string(l) + "." + h + ".";
            std::size_t out = (h[0] == 'g' && h[1] == 'm') || (h[0] == 'b' && h[1] == 'm')
                                  ? cfg_.adapter_dim
                                  : cfg_.model_dim;
            if (cfg_.linear_only) {
                params_.create(p + "w", Tensor::zeros({out, in}));
                params_.create(p + "b", Tensor::zeros({out}));
            } else {
                params_.create(p + "w1", init_matrix(rng, hidden, in));
                params_.create(p + "b1", Tensor::zeros({hidden}));
                params_.create(p + "w2", Tensor::zeros({out, hidden}));
                params_.create(p + "b2", Tensor::zeros({out}));
            }
        }
    }
}

Tensor AdaptNet::head(const std::string& prefix, const Tensor& input) const {
    if (cfg_.linear_only) {
        return add(matvec(params_.get(prefix + "w"), input), params_.get(prefix + "b"));
    }
    Tensor h = tanh_op(add(matvec(params_.get(prefix + "w1"), input), params_.get(prefix + "b1")));
    return add(matvec(params_.get(prefix + "w2"), h), params_.get(prefix + "b2"));
}

AdaptationParams AdaptNet::generate(std::size_t adapter_index, const Tensor& task_embedding,
                                    const Tensor& cls_activation) const {
    if (adapter_index >= cfg_.num_adapters) {
        throw std::out_of_range("AdaptNet: adapter index " + std::to_string(adapter_index) +
                                " out of range");
    }
    if (task_embedding.rank() != 1 || task_embedding.dim(0) != cfg_.embed_size) {
        throw std::invalid_argument("AdaptNet: task embedding shape " +
                                    shape_str(task_embedding.shape()) + " vs embed_size " +
                                    std::to_string(cfg_.embed_size));
    }
    if (cls_activation.rank() != 1 || cls_activation.dim(0) != cfg_.model_dim) {
        throw std::invalid_argument("AdaptNet: activation shape " +
                                    shape_str(cls_activation.shape()) + " vs model_dim " +
                                    std::to_string(cfg_.model_dim));
    }
    Tensor input = concat({task_embedding, cls_activation});
    std::string p = "psi.a" + std::to_string(adapter_index) + ".";
    AdaptationParams out;
    out.gamma_mid = add(Tensor::full({cfg_.adapter_dim}, 1.0), head(p + "gmid.", input));
    out.beta_mid = head(p + "bmid.", input);
    out.gamma_out = add(Tensor::full({cfg_.model_dim}, 1.0), head(p + "gout.", input));
    out.beta_out = head(p + "bout.", input);
    return out;
}

AdaptationParams gen_adapt_params(const AdaptNet& net, std::size_t adapter_index,
                                  const Tensor& task_embedding, const Tensor& cls_activation) {
    return net.generate(adapter_index, task_embedding, cls_activation);
}

HyperNet::HyperNet(std::size_t embed_size, std::size_t adapter_param_count,
                   std::size_t num_adapters, Rng& rng)
    : embed_size_(embed_size), param_count_(adapter_param_count), num_adapters_(num_adapters) {
    (void)rng;
    if (embed_size_ == 0 || param_count_ == 0 || num_adapters_ == 0) {
        throw std::invalid_argument("HyperNet: zero-sized dimension");
    }
    for (std::size_t l = 0; l < num_adapters_; ++l) {
        std::string p = "psi.hyper.a" + std::to_string(l) + ".";
        params_.create(p + "w", Tensor::zeros({param_count_, embed_size_}));
        params_.create(p + "b", Tensor::zeros({param_count_}));
    }
}

Tensor HyperNet::adapter_residual(std::size_t adapter_index, const Tensor& task_embedding) const {
    if (adapter_index >= num_adapters_) {
        throw std::out_of_range("HyperNet: adapter index out of range");
    }
    if (task_embedding.rank() != 1 || task_embedding.dim(0) != embed_size_) {
        throw std::invalid_argument("HyperNet: task embedding shape " +
                                    shape_str(task_embedding.shape()) + " vs embed_size " +
                                    std::to_string(embed_size_));
    }
    std::string p = "psi.hyper.a" + std::to_string(adapter_index) + ".";
    return add(matvec(params_.get(p + "w"), task_embedding), params_.get(p + "b"));
}

namespace {

AdaptedPrediction predict_with_callback(const BaseModel& model, const AdaptCallback& cb,
                                        const Episode& episode, bool adapt_all) {
    std::vector<Tensor> support_embs;
    std::vector<int> support_labels;
    for (const auto& [tokens, label] : episode.support) {
        support_embs.push_back(model.encode_adapted(tokens, cb, adapt_all));
        support_labels.push_back(label);
    }
    AdaptedPrediction pred;
    pred.prototypes = compute_prototypes(support_embs, support_labels, episode.num_classes);

    std::vector<Tensor> query_embs;
    std::vector<int> query_labels;
    for (const auto& [tokens, label] : episode.query) {
        query_embs.push_back(model.encode_adapted(tokens, cb, adapt_all));
        query_labels.push_back(label);
    }
    pred.loss = protonet_loss(pred.prototypes, query_embs, query_labels, &pred.accuracy);
    pred.query_probs.reserve(query_embs.size());
    for (const auto& q : query_embs) {
        Tensor probs = softmax(class_logits(pred.prototypes, q));
        pred.query_probs.emplace_back(probs.values().begin(), probs.values().end());
    }
    return pred;
}

} // namespace

AdaptedPrediction adapted_predict(BaseModel& model, const TaskEmbedNet& task_net,
                                  const AdaptNet& adapt_net, const Episode& episode,
                                  const FimOptions& fim_opts, Rng& rng, bool adapt_all) {
    GradFeatures feats = fim_diag_features(model, episode, fim_opts, rng);
    std::vector<Tensor> embeddings = task_net.embed_layers(feats);
    if (embeddings.size() != model.num_adapters()) {
        throw std::invalid_argument("adapted_predict: embedding count mismatch");
    }
    AdaptCallback cb = [&adapt_net, &embeddings](std::size_t index, const Tensor& cls_activation) {
        return adapt_net.generate(index, embeddings[index], cls_activation);
    };
    AdaptedPrediction pred = predict_with_callback(model, cb, episode, adapt_all);
    pred.task_embeddings = std::move(embeddings);
    return pred;
}

AdaptedPrediction hypernet_predict(BaseModel& model, const TaskEmbedNet& task_net,
                                   const HyperNet& hyper_net, const Episode& episode,
                                   const FimOptions& fim_opts, Rng& rng) {
    GradFeatures feats = fim_diag_features(model, episode, fim_opts, rng);
    std::vector<Tensor> embeddings = task_net.embed_layers(feats);
    if (embeddings.size() != model.num_adapters()) {
        throw std::invalid_argument("hypernet_predict: embedding count mismatch");
    }
    // Base adapter weights flattened as constants; residual carries the
    // gradient into psi.
    std::vector<Tensor> weights;
    weights.reserve(model.num_adapters());
    for (std::size_t l = 0; l < model.num_adapters(); ++l) {
        std::vector<Tensor> parts;
        for (const auto& name : model.adapter_param_names(l)) {
            const Tensor& t = model.params().get(name);
            parts.push_back(reshape(t.detach(), {t.size()}));
        }
        weights.push_back(add(concat(parts), hyper_net.adapter_residual(l, embeddings[l])));
    }

    std::vector<Tensor> support_embs;
    std::vector<int> support_labels;
    for (const auto& [tokens, label] : episode.support) {
        support_embs.push_back(model.encode_with_adapter_override(tokens, weights));
        support_labels.push_back(label);
    }
    AdaptedPrediction pred;
    pred.prototypes = compute_prototypes(support_embs, support_labels, episode.num_classes);

    std::vector<Tensor> query_embs;
    std::vector<int> query_labels;
    for (const auto& [tokens, label] : episode.query) {
        query_embs.push_back(model.encode_with_adapter_override(tokens, weights));
        query_labels.push_back(label);
    }
    pred.loss = protonet_loss(pred.prototypes, query_embs, query_labels, &pred.accuracy);
    pred.query_probs.reserve(query_embs.size());
    for (const auto& q : query_embs) {
        Tensor probs = softmax(class_logits(pred.prototypes, q));
        pred.query_probs.emplace_back(probs.values().begin(), probs.values().end());
    }
    pred.task_embeddings = std::move(embeddings);
    return pred;
}

AdaptedPrediction fixed_rep_predict(BaseModel& model, const AdaptNet& adapt_net,
                                    const Tensor& task_rep, const Episode& episode) {
    AdaptCallback cb = [&adapt_net, &task_rep](std::size_t index, const Tensor& cls_activation) {
        return adapt_net.generate(index, task_rep, cls_activation);
    };
    AdaptedPrediction pred = predict_with_callback(model, cb, episode, false);
    pred.task_embeddings.assign(model.num_adapters(), task_rep);
    return pred;
}

} // namespace g2t
