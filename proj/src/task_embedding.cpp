#include "grad2task/task_embedding.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <tuple>

#include "grad2task/proto.hpp"

namespace g2t {

GradFeatures fim_diag_features(BaseModel& model, const Episode& episode, const FimOptions& opts,
                               Rng& rng) {
    if (opts.rounds == 0) throw std::invalid_argument("fim_diag_features: rounds must be >= 1");
    std::size_t half_k = (episode.shots + 1) / 2;
    std::size_t protos_per_class = opts.protos_per_class ? opts.protos_per_class : half_k;
    std::size_t probe_size = opts.probe_size ? opts.probe_size : episode.num_classes * half_k;

    ParamStore& store = model.params();
    std::vector<std::pair<std::string, bool>> saved_rg;
    saved_rg.reserve(store.size());
    for (const auto& e : store.entries()) saved_rg.emplace_back(e.name, e.tensor.requires_grad());
    for (auto& e : store.entries()) e.tensor.node()->requires_grad = BaseModel::is_alpha(e.name);
    store.zero_grads();

    std::size_t n_adapters = model.num_adapters();
    std::vector<std::vector<double>> accum(n_adapters,
                                           std::vector<double>(model.config().adapter_param_count(), 0.0));
    // With k = 1 there is nothing left for a disjoint probe set; fall back
    // to probing the support itself.
    std::size_t slack = episode.support.size() > protos_per_class * episode.num_classes
                            ? episode.support.size() - protos_per_class * episode.num_classes
                            : 0;
    if (probe_size > slack) probe_size = slack;

    for (std::size_t s = 0; s < opts.rounds; ++s) {
        Rng round_rng = rng.child(s + 1);
        std::vector<std::pair<std::vector<int>, int>> proto_set, probe_set;
        if (probe_size == 0) {
            proto_set = episode.support;
            probe_set = episode.support;
        } else {
            std::tie(proto_set, probe_set) =
                subsample_support(episode, protos_per_class, probe_size, round_rng);
        }

        std::vector<Tensor> proto_embs;
        std::vector<int> proto_labels;
        for (const auto& [tokens, label] : proto_set) {
            proto_embs.push_back(model.encode(tokens));
            proto_labels.push_back(label);
        }
        Tensor protos = compute_prototypes(proto_embs, proto_labels, episode.num_classes);

        std::vector<Tensor> nlls;
        nlls.reserve(probe_set.size());
        for (const auto& [tokens, label] : probe_set) {
            (void)label;
            Tensor logits = class_logits(protos, model.encode(tokens));
            Tensor lsm = log_softmax(logits);
            std::vector<double> probs(lsm.size());
            for (std::size_t c = 0; c < probs.size(); ++c) probs[c] = std::exp(lsm.value_at(c));
            std::size_t sampled = round_rng.categorical(probs);
            nlls.push_back(neg(pick(lsm, sampled)));
        }
        backward(sum_all(concat(nlls)));
        for (std::size_t l = 0; l < n_adapters; ++l) {
            auto g = model.flat_adapter_grads(l);
            for (std::size_t i = 0; i < g.size(); ++i) accum[l][i] += g[i] * g[i];
        }
        store.zero_grads();
    }

    for (const auto& [name, rg] : saved_rg) store.get(name).node()->requires_grad = rg;

    GradFeatures feats;
    feats.rounds = opts.rounds;
    feats.layers.reserve(n_adapters);
    for (auto& v : accum) {
        double inv_rounds = 1.0 / static_cast<double>(opts.rounds);
        for (auto& x : v) x *= inv_rounds;
        if (opts.normalize) {
            double mean = 0.0;
            for (double x : v) mean += x;
            mean /= static_cast<double>(v.size());
            double scale = 1.0 / (mean + 1e-12);
            for (auto& x : v) x *= scale;
        }
        for (double x : v) {
            if (!std::isfinite(x)) throw std::runtime_error("fim_diag_features: non-finite feature");
        }
        feats.layers.push_back(std::move(v));
    }
    return feats;
}

void TaskEmbedConfig::validate() const {
    if (input_size == 0 || hidden_size == 0 || embed_size == 0 || num_gru_layers == 0) {
        throw std::invalid_argument("TaskEmbedConfig: zero-sized dimension");
    }
}

TaskEmbedNet::TaskEmbedNet(TaskEmbedConfig cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    auto init = [&rng](std::size_t rows, std::size_t cols) {
        double stddev = 1.0 / std::sqrt(static_cast<double>(cols));
        std::vector<double> data(rows * cols);
        for (auto& x : data) x = rng.normal(0.0, stddev);
        return Tensor::from_data({rows, cols}, std::move(data));
    };
    for (std::size_t j = 0; j < cfg_.num_gru_layers; ++j) {
        std::size_t in = j == 0 ? cfg_.input_size : cfg_.hidden_size;
        std::size_t h = cfg_.hidden_size;
        std::string p = "phi.gru" + std::to_string(j) + ".";
        for (const char* g : {"w_ir", "w_iz", "w_in"}) params_.create(p + g, init(h, in));
        for (const char* g : {"w_hr", "w_hz", "w_hn"}) params_.create(p + g, init(h, h));
        for (const char* g : {"b_ir", "b_iz", "b_in", "b_hr", "b_hz", "b_hn"}) {
            params_.create(p + g, Tensor::zeros({h}));
        }
        params_.create(p + "h0", Tensor::zeros({h}));
    }
    params_.create("phi.out.w", init(cfg_.embed_size, cfg_.hidden_size));
    params_.create("phi.out.b", Tensor::zeros({cfg_.embed_size}));
}

Tensor TaskEmbedNet::gru_cell(std::size_t layer, const Tensor& x, const Tensor& h) const {
    std::string p = "phi.gru" + std::to_string(layer) + ".";
    auto gate = [&](const char* wi, const char* bi, const char* wh, const char* bh) {
        return add(add(matvec(params_.get(p + wi), x), params_.get(p + bi)),
                   add(matvec(params_.get(p + wh), h), params_.get(p + bh)));
    };
    Tensor r = sigmoid(gate("w_ir", "b_ir", "w_hr", "b_hr"));
    Tensor z = sigmoid(gate("w_iz", "b_iz", "w_hz", "b_hz"));
    Tensor n = tanh_op(add(add(matvec(params_.get(p + "w_in"), x), params_.get(p + "b_in")),
                           mul(r, add(matvec(params_.get(p + "w_hn"), h), params_.get(p + "b_hn")))));
    Tensor ones = Tensor::full({h.dim(0)}, 1.0);
    return add(mul(sub(ones, z), n), mul(z, h));
}

std::vector<Tensor> TaskEmbedNet::embed_layers(const GradFeatures& feats) const {
    if (feats.layers.empty()) throw std::invalid_argument("embed_layers: empty feature sequence");
    std::vector<Tensor> hidden;
    for (std::size_t j = 0; j < cfg_.num_gru_layers; ++j) {
        hidden.push_back(params_.get("phi.gru" + std::to_string(j) + ".h0"));
    }
    std::vector<Tensor> out;
    out.reserve(feats.layers.size());
    for (std::size_t l = 0; l < feats.layers.size(); ++l) {
        if (feats.layers[l].size() != cfg_.input_size) {
            throw std::invalid_argument("embed_layers: feature " + std::to_string(l) + " has size " +
                                        std::to_string(feats.layers[l].size()) + ", expected " +
                                        std::to_string(cfg_.input_size));
        }
        Tensor x = Tensor::from_data({cfg_.input_size}, feats.layers[l]);
        for (std::size_t j = 0; j < cfg_.num_gru_layers; ++j) {
            hidden[j] = gru_cell(j, j == 0 ? x : hidden[j - 1], hidden[j]);
        }
        out.push_back(add(matvec(params_.get("phi.out.w"), hidden.back()), params_.get("phi.out.b")));
    }
    return out;
}

Tensor mean_input_task_rep(const BaseModel& model, const Episode& episode) {
    if (episode.support.empty()) throw std::invalid_argument("mean_input_task_rep: empty support");
    Tensor sum = model.encode(episode.support[0].first);
    for (std::size_t i = 1; i < episode.support.size(); ++i) {
        sum = add(sum, model.encode(episode.support[i].first));
    }
    return scale(sum, 1.0 / static_cast<double>(episode.support.size()));
}

Tensor input_label_task_rep(const BaseModel& model, const Episode& episode,
                            const std::vector<std::string>& class_names, const Vocab& vocab) {
    if (class_names.size() != episode.num_classes) {
        throw std::invalid_argument("input_label_task_rep: " + std::to_string(class_names.size()) +
                                    " class names vs " + std::to_string(episode.num_classes) +
                                    " classes");
    }
    Tensor label_sum;
    for (const auto& name : class_names) {
        std::vector<int> ids = vocab.encode_text(name);
        bool known = false;
        for (std::size_t i = 1; i < ids.size(); ++i) known |= ids[i] != Vocab::kUnk;
        if (ids.size() < 2 || !known) {
            throw std::invalid_argument("input_label_task_rep: class name '" + name +
                                        "' has no in-vocabulary tokens");
        }
        Tensor e = model.encode(ids);
        label_sum = label_sum.defined() ? add(label_sum, e) : e;
    }
    Tensor label_mean = scale(label_sum, 1.0 / static_cast<double>(class_names.size()));
    return concat({mean_input_task_rep(model, episode), label_mean});
}

void export_embeddings(const std::vector<EpisodeEmbeddings>& batch, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("export_embeddings: cannot write " + path);
    std::size_t dim = 0;
    for (const auto& ep : batch) {
        if (!ep.layers.empty()) {
            dim = ep.layers[0].dim(0);
            break;
        }
    }
    os << "episode_id,task_name,layer";
    for (std::size_t d = 0; d < dim; ++d) os << ",dim_" << d;
    os << "\n";
    char buf[64];
    for (const auto& ep : batch) {
        for (std::size_t l = 0; l < ep.layers.size(); ++l) {
            const Tensor& e = ep.layers[l];
            if (e.dim(0) != dim) {
                throw std::invalid_argument("export_embeddings: inconsistent embedding sizes");
            }
            os << ep.episode_id << "," << ep.task_name << "," << l;
            for (std::size_t d = 0; d < dim; ++d) {
                std::snprintf(buf, sizeof(buf), "%.12g", e.value_at(d));
                os << "," << buf;
            }
            os << "\n";
        }
    }
    if (!os) throw std::runtime_error("export_embeddings: write failed for " + path);
}

} // namespace g2t
