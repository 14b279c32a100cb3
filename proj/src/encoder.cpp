#include "grad2task/encoder.hpp"

#include <cmath>
#include <iostream>
#include <numeric>
#include <stdexcept>

#include "grad2task/adam.hpp"
#include "grad2task/vocab.hpp"

namespace g2t {

void EncoderConfig::validate() const {
    if (vocab_size < 4) throw std::invalid_argument("EncoderConfig: vocab_size must be >= 4");
    if (model_dim == 0 || num_layers == 0 || num_heads == 0 || ffn_dim == 0 || adapter_dim == 0) {
        throw std::invalid_argument("EncoderConfig: zero-sized dimension");
    }
    if (model_dim % num_heads != 0) {
        throw std::invalid_argument("EncoderConfig: model_dim " + std::to_string(model_dim) +
                                    " not divisible by num_heads " + std::to_string(num_heads));
    }
    if (head_out_dim == 0) throw std::invalid_argument("EncoderConfig: head_out_dim must be > 0");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
        throw std::invalid_argument("EncoderConfig: dropout_rate must be in [0, 1)");
    }
}

AdaptationParams AdaptationParams::identity(std::size_t bottleneck_dim, std::size_t model_dim) {
    AdaptationParams p;
    p.gamma_mid = Tensor::full({bottleneck_dim}, 1.0);
    p.beta_mid = Tensor::zeros({bottleneck_dim});
    p.gamma_out = Tensor::full({model_dim}, 1.0);
    p.beta_out = Tensor::zeros({model_dim});
    return p;
}

void AdaptationParams::validate(std::size_t bottleneck_dim, std::size_t model_dim) const {
    auto check = [](const Tensor& t, std::size_t want, const char* which) {
        if (!t.defined() || t.rank() != 1 || t.dim(0) != want) {
            throw std::invalid_argument(std::string("AdaptationParams: ") + which +
                                        " has wrong shape (want [" + std::to_string(want) + "])");
        }
    };
    check(gamma_mid, bottleneck_dim, "gamma_mid");
    check(beta_mid, bottleneck_dim, "beta_mid");
    check(gamma_out, model_dim, "gamma_out");
    check(beta_out, model_dim, "beta_out");
}

namespace {

Tensor init_matrix(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
    std::vector<double> data(rows * cols);
    for (auto& x : data) x = rng.normal(0.0, stddev);
    return Tensor::from_data({rows, cols}, std::move(data));
}

Tensor init_vector(Rng& rng, std::size_t n, double stddev) {
    std::vector<double> data(n);
    for (auto& x : data) x = rng.normal(0.0, stddev);
    return Tensor::from_data({n}, std::move(data));
}

} // namespace

BaseModel::BaseModel(EncoderConfig cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    std::size_t d = cfg_.model_dim;
    params_.create("theta.tok_emb", init_matrix(rng, cfg_.vocab_size, d, 0.1));
    params_.create("theta.pos_emb", init_matrix(rng, cfg_.max_seq_len, d, 0.1));
    double attn_std = 1.0 / std::sqrt(static_cast<double>(d));
    for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
        std::string lp = "theta.l" + std::to_string(l) + ".";
        for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) {
            params_.create(lp + w, init_matrix(rng, d, d, attn_std));
        }
        for (const char* b : {"attn.bq", "attn.bk", "attn.bv", "attn.bo"}) {
            params_.create(lp + b, Tensor::zeros({d}));
        }
        params_.create(lp + "ffn.w1", init_matrix(rng, d, cfg_.ffn_dim, attn_std));
        params_.create(lp + "ffn.b1", Tensor::zeros({cfg_.ffn_dim}));
        params_.create(lp + "ffn.w2",
                       init_matrix(rng, cfg_.ffn_dim, d, 1.0 / std::sqrt(double(cfg_.ffn_dim))));
        params_.create(lp + "ffn.b2", Tensor::zeros({d}));
        std::string np = "ln.l" + std::to_string(l) + ".";
        for (const char* sub : {"attn", "ffn"}) {
            params_.create(np + sub + ".gain", Tensor::full({d}, 1.0));
            params_.create(np + sub + ".bias", Tensor::zeros({d}));
        }
        // Two adapters per layer; up-projection zero-initialized so a fresh
        // adapter is the identity map.
        for (std::size_t a = 0; a < 2; ++a) {
            std::string ap = "alpha.a" + std::to_string(2 * l + a) + ".";
            params_.create(ap + "down_w", init_matrix(rng, d, cfg_.adapter_dim, attn_std));
            params_.create(ap + "down_b", Tensor::zeros({cfg_.adapter_dim}));
            params_.create(ap + "up_w", Tensor::zeros({cfg_.adapter_dim, d}));
            params_.create(ap + "up_b", Tensor::zeros({d}));
        }
    }
    params_.create("omega.w", init_matrix(rng, cfg_.head_out_dim, d, attn_std));
    params_.create("omega.b", Tensor::zeros({cfg_.head_out_dim}));
}

std::vector<std::string> BaseModel::adapter_param_names(std::size_t adapter_index) const {
    if (adapter_index >= num_adapters()) {
        throw std::out_of_range("adapter index " + std::to_string(adapter_index) + " out of range");
    }
    std::string ap = "alpha.a" + std::to_string(adapter_index) + ".";
    return {ap + "down_w", ap + "down_b", ap + "up_w", ap + "up_b"};
}

std::vector<double> BaseModel::flat_adapter_grads(std::size_t adapter_index) const {
    std::vector<double> flat;
    flat.reserve(cfg_.adapter_param_count());
    for (const auto& name : adapter_param_names(adapter_index)) {
        const Tensor& t = params_.get(name);
        if (!t.has_grad()) {
            throw std::runtime_error("flat_adapter_grads: no gradient on '" + name + "'");
        }
        auto g = t.grad();
        flat.insert(flat.end(), g.begin(), g.end());
    }
    return flat;
}

Tensor BaseModel::attention_block(std::size_t layer, const Tensor& h) const {
    std::string lp = "theta.l" + std::to_string(layer) + ".";
    Tensor q = add_rowvec(matmul(h, params_.get(lp + "attn.wq")), params_.get(lp + "attn.bq"));
    Tensor k = add_rowvec(matmul(h, params_.get(lp + "attn.wk")), params_.get(lp + "attn.bk"));
    Tensor v = add_rowvec(matmul(h, params_.get(lp + "attn.wv")), params_.get(lp + "attn.bv"));
    std::size_t hd = cfg_.model_dim / cfg_.num_heads;
    std::vector<Tensor> heads;
    heads.reserve(cfg_.num_heads);
    for (std::size_t i = 0; i < cfg_.num_heads; ++i) {
        Tensor qh = slice_cols(q, i * hd, (i + 1) * hd);
        Tensor kh = slice_cols(k, i * hd, (i + 1) * hd);
        Tensor vh = slice_cols(v, i * hd, (i + 1) * hd);
        Tensor scores = scale(matmul_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(hd)));
        heads.push_back(matmul(softmax(scores), vh));
    }
    Tensor ctx = cfg_.num_heads == 1 ? heads[0] : concat_cols(heads);
    return add_rowvec(matmul(ctx, params_.get(lp + "attn.wo")), params_.get(lp + "attn.bo"));
}

Tensor BaseModel::ffn_block(std::size_t layer, const Tensor& h) const {
    std::string lp = "theta.l" + std::to_string(layer) + ".";
    Tensor mid = gelu(add_rowvec(matmul(h, params_.get(lp + "ffn.w1")), params_.get(lp + "ffn.b1")));
    return add_rowvec(matmul(mid, params_.get(lp + "ffn.w2")), params_.get(lp + "ffn.b2"));
}

Tensor BaseModel::apply_adapter(std::size_t index, const Tensor& h, const ForwardMode& mode) const {
    std::string ap = "alpha.a" + std::to_string(index) + ".";
    Tensor down_w = params_.get(ap + "down_w");
    Tensor down_b = params_.get(ap + "down_b");
    Tensor up_w = params_.get(ap + "up_w");
    Tensor up_b = params_.get(ap + "up_b");
    if (mode.adapter_override) {
        std::size_t d = cfg_.model_dim, b = cfg_.adapter_dim;
        const Tensor& flat = mode.adapter_override->at(index);
        if (flat.size() != cfg_.adapter_param_count()) {
            throw std::invalid_argument("adapter override " + std::to_string(index) + " has size " +
                                        std::to_string(flat.size()) + ", expected " +
                                        std::to_string(cfg_.adapter_param_count()));
        }
        std::size_t off = 0;
        down_w = reshape(slice(flat, off, off + d * b), {d, b});
        off += d * b;
        down_b = slice(flat, off, off + b);
        off += b;
        up_w = reshape(slice(flat, off, off + b * d), {b, d});
        off += b * d;
        up_b = slice(flat, off, off + d);
    }

    AdaptationParams film;
    bool use_film = mode.film != nullptr;
    if (use_film) {
        film = (*mode.film)(index, row(h, 0));
        film.validate(cfg_.adapter_dim, cfg_.model_dim);
    }

    Tensor mid = gelu(add_rowvec(matmul(h, down_w), down_b));
    if (use_film) {
        mid = mode.adapt_all ? film_all_rows(mid, film.gamma_mid, film.beta_mid)
                             : film_row(mid, film.gamma_mid, film.beta_mid, 0);
    }
    Tensor up = add_rowvec(matmul(mid, up_w), up_b);
    if (use_film) {
        up = mode.adapt_all ? film_all_rows(up, film.gamma_out, film.beta_out)
                            : film_row(up, film.gamma_out, film.beta_out, 0);
    }
    return add(h, up);
}

Tensor BaseModel::forward(std::span<const int> tokens, const ForwardMode& mode) const {
    if (tokens.empty()) throw std::invalid_argument("encode: empty token sequence");
    if (tokens.size() > cfg_.max_seq_len) {
        throw std::invalid_argument("encode: sequence length " + std::to_string(tokens.size()) +
                                    " exceeds max_seq_len " + std::to_string(cfg_.max_seq_len));
    }
    if (tokens[0] != Vocab::kCls) {
        throw std::invalid_argument("encode: sequence must start with the [CLS] token id");
    }
    for (int id : tokens) {
        if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size) {
            throw std::invalid_argument("encode: unknown token id " + std::to_string(id) +
                                        " (vocab size " + std::to_string(cfg_.vocab_size) + ")");
        }
    }
    std::vector<int> ids(tokens.begin(), tokens.end());
    std::vector<int> pos(tokens.size());
    std::iota(pos.begin(), pos.end(), 0);
    Tensor h = add(gather_rows(params_.get("theta.tok_emb"), ids),
                   gather_rows(params_.get("theta.pos_emb"), pos));

    auto maybe_dropout = [&](Tensor t) {
        if (mode.training && mode.dropout_rng && cfg_.dropout_rate > 0.0) {
            return dropout(t, cfg_.dropout_rate, *mode.dropout_rng, true);
        }
        return t;
    };

    for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
        std::string np = "ln.l" + std::to_string(l) + ".";
        Tensor a = maybe_dropout(attention_block(l, h));
        a = apply_adapter(2 * l, a, mode);
        h = layer_norm(add(h, a), params_.get(np + "attn.gain"), params_.get(np + "attn.bias"));
        Tensor f = maybe_dropout(ffn_block(l, h));
        f = apply_adapter(2 * l + 1, f, mode);
        h = layer_norm(add(h, f), params_.get(np + "ffn.gain"), params_.get(np + "ffn.bias"));
    }
    Tensor cls = row(h, 0);
    return add(matvec(params_.get("omega.w"), cls), params_.get("omega.b"));
}

Tensor BaseModel::encode(std::span<const int> tokens) const { return forward(tokens, {}); }

Tensor BaseModel::encode(std::span<const int> tokens, bool training, Rng* dropout_rng) const {
    ForwardMode mode;
    mode.training = training;
    mode.dropout_rng = dropout_rng;
    return forward(tokens, mode);
}

Tensor BaseModel::encode_adapted(std::span<const int> tokens,
                                 std::span<const AdaptationParams> per_adapter,
                                 bool adapt_all) const {
    if (per_adapter.size() != num_adapters()) {
        throw std::invalid_argument("encode_adapted: got " + std::to_string(per_adapter.size()) +
                                    " adaptation parameter sets, expected " +
                                    std::to_string(num_adapters()));
    }
    AdaptCallback cb = [&per_adapter](std::size_t index, const Tensor&) {
        return per_adapter[index];
    };
    return encode_adapted(tokens, cb, adapt_all);
}

Tensor BaseModel::encode_adapted(std::span<const int> tokens, const AdaptCallback& generate,
                                 bool adapt_all) const {
    if (!generate) throw std::invalid_argument("encode_adapted: null adaptation callback");
    ForwardMode mode;
    mode.film = &generate;
    mode.adapt_all = adapt_all;
    return forward(tokens, mode);
}

Tensor BaseModel::encode_with_adapter_override(std::span<const int> tokens,
                                               const std::vector<Tensor>& adapter_weights) const {
    if (adapter_weights.size() != num_adapters()) {
        throw std::invalid_argument("encode_with_adapter_override: got " +
                                    std::to_string(adapter_weights.size()) +
                                    " weight sets, expected " + std::to_string(num_adapters()));
    }
    ForwardMode mode;
    mode.adapter_override = &adapter_weights;
    return forward(tokens, mode);
}

Tensor BaseModel::hidden_states(std::span<const int> tokens, bool training, Rng* dropout_rng) const {
    // Same trunk as forward() but returns the full final hidden matrix.
    if (tokens.empty()) throw std::invalid_argument("encode: empty token sequence");
    ForwardMode mode;
    mode.training = training;
    mode.dropout_rng = dropout_rng;
    std::vector<int> ids(tokens.begin(), tokens.end());
    std::vector<int> pos(tokens.size());
    std::iota(pos.begin(), pos.end(), 0);
    Tensor h = add(gather_rows(params_.get("theta.tok_emb"), ids),
                   gather_rows(params_.get("theta.pos_emb"), pos));
    for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
        std::string np = "ln.l" + std::to_string(l) + ".";
        Tensor a = attention_block(l, h);
        if (training && dropout_rng && cfg_.dropout_rate > 0.0) {
            a = dropout(a, cfg_.dropout_rate, *dropout_rng, true);
        }
        a = apply_adapter(2 * l, a, mode);
        h = layer_norm(add(h, a), params_.get(np + "attn.gain"), params_.get(np + "attn.bias"));
        Tensor f = ffn_block(l, h);
        if (training && dropout_rng && cfg_.dropout_rate > 0.0) {
            f = dropout(f, cfg_.dropout_rate, *dropout_rng, true);
        }
        f = apply_adapter(2 * l + 1, f, mode);
        h = layer_norm(add(h, f), params_.get(np + "ffn.gain"), params_.get(np + "ffn.bias"));
    }
    return h;
}

Tensor BaseModel::adapter_forward(std::size_t adapter_index, const Tensor& h) const {
    if (adapter_index >= num_adapters()) {
        throw std::out_of_range("adapter index out of range");
    }
    if (h.rank() != 1 || h.dim(0) != cfg_.model_dim) {
        throw std::invalid_argument("adapter_forward: input shape " + shape_str(h.shape()) +
                                    " vs model_dim " + std::to_string(cfg_.model_dim));
    }
    Tensor m = reshape(h, {1, cfg_.model_dim});
    ForwardMode mode;
    return row(apply_adapter(adapter_index, m, mode), 0);
}

PretrainResult pretrain_encoder(BaseModel& model, const std::vector<std::vector<int>>& corpus,
                                std::size_t steps, double lr, Rng& rng) {
    if (corpus.empty()) throw std::invalid_argument("pretrain_encoder: empty corpus");
    PretrainResult result;
    if (steps == 0) {
        std::cerr << "pretrain_encoder: steps = 0, nothing to do\n";
        return result;
    }
    const EncoderConfig& cfg = model.config();

    // Temporary decoder head for masked-token prediction; discarded after.
    ParamStore decoder;
    Rng init_rng = rng.child(0xDEC0DE);
    decoder.create("dec.w", init_matrix(init_rng, cfg.vocab_size, cfg.model_dim,
                                        1.0 / std::sqrt(double(cfg.model_dim))));
    decoder.create("dec.b", Tensor::zeros({cfg.vocab_size}));

    // Freeze everything except theta for the duration.
    std::vector<std::pair<std::string, bool>> saved;
    for (auto& e : model.params().entries()) {
        saved.emplace_back(e.name, e.trainable);
        e.trainable = BaseModel::is_theta(e.name);
    }
    Adam opt_model(lr);
    Adam opt_decoder(lr);

    std::size_t correct = 0, total = 0;
    for (std::size_t step = 0; step < steps; ++step) {
        Rng step_rng = rng.child(step + 1);
        const auto& seq = corpus[step_rng.uniform_int(corpus.size())];
        if (seq.size() < 2) continue;
        std::vector<int> masked = seq;
        std::vector<std::size_t> targets;
        for (std::size_t i = 1; i < masked.size(); ++i) {
            if (step_rng.uniform() < 0.15) targets.push_back(i);
        }
        if (targets.empty()) targets.push_back(1 + step_rng.uniform_int(masked.size() - 1));
        for (auto i : targets) masked[i] = Vocab::kMask;

        Tensor h = model.hidden_states(masked, false, nullptr);
        std::vector<Tensor> losses;
        for (auto i : targets) {
            Tensor logits = add(matvec(decoder.get("dec.w"), row(h, i)), decoder.get("dec.b"));
            Tensor lsm = log_softmax(logits);
            losses.push_back(neg(pick(lsm, static_cast<std::size_t>(seq[i]))));
            std::size_t argmax = 0;
            for (std::size_t c = 1; c < logits.size(); ++c) {
                if (logits.value_at(c) > logits.value_at(argmax)) argmax = c;
            }
            if (argmax == static_cast<std::size_t>(seq[i])) ++correct;
            ++total;
        }
        Tensor loss = scale(sum_all(concat(losses)), 1.0 / double(losses.size()));
        result.loss_curve.push_back(loss.scalar_value());
        backward(loss);
        opt_model.step(model.params());
        opt_decoder.step(decoder);
    }
    result.masked_accuracy = total ? static_cast<double>(correct) / double(total) : 0.0;

    for (const auto& [name, trainable] : saved) model.params().set_trainable(name, trainable);
    return result;
}

} // namespace g2t
