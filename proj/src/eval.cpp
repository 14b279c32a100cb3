#include "grad2task/eval.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "grad2task/adam.hpp"
#include "grad2task/proto.hpp"

namespace g2t {

Variant parse_variant(const std::string& name) {
    if (name == "pn") return Variant::pn;
    if (name == "grad2task") return Variant::grad2task;
    if (name == "pn-longer") return Variant::pn_longer;
    if (name == "x") return Variant::x;
    if (name == "x-and-y") return Variant::x_and_y;
    if (name == "adapt-all") return Variant::adapt_all;
    if (name == "hypernet") return Variant::hypernet;
    throw std::invalid_argument("unknown variant '" + name +
                                "' (valid: pn, grad2task, pn-longer, x, x-and-y, adapt-all, "
                                "hypernet)");
}

std::string variant_name(Variant v) {
    switch (v) {
    case Variant::pn: return "pn";
    case Variant::grad2task: return "grad2task";
    case Variant::pn_longer: return "pn-longer";
    case Variant::x: return "x";
    case Variant::x_and_y: return "x-and-y";
    case Variant::adapt_all: return "adapt-all";
    case Variant::hypernet: return "hypernet";
    }
    throw std::logic_error("variant_name: bad enum value");
}

void write_report_csv(const EvalReport& report, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("report: cannot write " + path);
    os << "variant,task,k,mean,std,runs\n";
    char buf[64];
    for (const auto& r : report.rows) {
        std::snprintf(buf, sizeof(buf), "%.12g,%.12g", r.mean_accuracy, r.std_accuracy);
        os << r.variant << "," << r.task << "," << r.k << "," << buf << "," << r.runs << "\n";
    }
    if (!os) throw std::runtime_error("report: write failed for " + path);
}

std::string format_report_table(const EvalReport& report) {
    std::vector<std::array<std::string, 6>> cells;
    cells.push_back({"variant", "task", "k", "mean", "std", "runs"});
    char buf[64];
    for (const auto& r : report.rows) {
        std::array<std::string, 6> row;
        row[0] = r.variant;
        row[1] = r.task;
        row[2] = std::to_string(r.k);
        std::snprintf(buf, sizeof(buf), "%.4f", r.mean_accuracy);
        row[3] = buf;
        std::snprintf(buf, sizeof(buf), "%.4f", r.std_accuracy);
        row[4] = buf;
        row[5] = std::to_string(r.runs);
        cells.push_back(std::move(row));
    }
    std::array<std::size_t, 6> width{};
    for (const auto& row : cells) {
        for (std::size_t i = 0; i < 6; ++i) width[i] = std::max(width[i], row[i].size());
    }
    std::ostringstream os;
    for (const auto& row : cells) {
        for (std::size_t i = 0; i < 6; ++i) {
            os << row[i] << std::string(width[i] - row[i].size() + (i + 1 < 6 ? 2 : 0), ' ');
        }
        os << "\n";
    }
    return os.str();
}

namespace {

/// Disables gradient tracking on the given stores for the guard's lifetime;
/// evaluation forwards then build no graph.
class NoGradGuard {
public:
    explicit NoGradGuard(std::vector<ParamStore*> stores) : stores_(std::move(stores)) {
        for (auto* s : stores_) {
            if (!s) continue;
            for (auto& e : s->entries()) {
                saved_.push_back(e.tensor.requires_grad());
                e.tensor.node()->requires_grad = false;
            }
        }
    }
    ~NoGradGuard() {
        std::size_t i = 0;
        for (auto* s : stores_) {
            if (!s) continue;
            for (auto& e : s->entries()) e.tensor.node()->requires_grad = saved_[i++];
        }
    }

private:
    std::vector<ParamStore*> stores_;
    std::vector<bool> saved_;
};

Episode full_test_episode(const LabeledDataset& ds, std::size_t k, Rng& rng) {
    std::size_t C = ds.num_classes();
    if (C < 2) throw std::invalid_argument("evaluate: task '" + ds.name + "' has fewer than 2 classes");
    if (ds.test.empty()) throw std::invalid_argument("evaluate: task '" + ds.name + "' has no test pool");
    std::vector<std::vector<std::size_t>> by_class(C);
    for (std::size_t i = 0; i < ds.train.size(); ++i) {
        by_class[static_cast<std::size_t>(ds.train[i].label)].push_back(i);
    }
    Episode ep;
    ep.task = ds.name;
    ep.num_classes = C;
    ep.shots = k;
    for (std::size_t c = 0; c < C; ++c) {
        if (by_class[c].size() < k) {
            throw std::runtime_error("evaluate: class '" + ds.class_names[c] + "' of task '" +
                                     ds.name + "' has " + std::to_string(by_class[c].size()) +
                                     " train examples, need " + std::to_string(k));
        }
        auto idx = rng.sample_without_replacement(by_class[c].size(), k);
        for (auto i : idx) {
            ep.support.emplace_back(ds.train[by_class[c][i]].tokens, static_cast<int>(c));
        }
    }
    for (const auto& ex : ds.test) ep.query.emplace_back(ex.tokens, ex.label);
    return ep;
}

double plain_protonet_accuracy(const BaseModel& model, const Episode& ep) {
    std::vector<Tensor> s_embs, q_embs;
    std::vector<int> s_labels, q_labels;
    for (const auto& [tokens, label] : ep.support) {
        s_embs.push_back(model.encode(tokens));
        s_labels.push_back(label);
    }
    for (const auto& [tokens, label] : ep.query) {
        q_embs.push_back(model.encode(tokens));
        q_labels.push_back(label);
    }
    Tensor protos = compute_prototypes(s_embs, s_labels, ep.num_classes);
    double acc = 0.0;
    protonet_loss(protos, q_embs, q_labels, &acc);
    return acc;
}

} // namespace

double kshot_run_accuracy(VariantModel& vm, const LabeledDataset& ds, std::size_t k, Rng& rng) {
    if (!vm.model) throw std::invalid_argument("evaluate: no base model");
    Episode ep = full_test_episode(ds, k, rng);
    switch (vm.variant) {
    case Variant::pn:
    case Variant::pn_longer:
        return plain_protonet_accuracy(*vm.model, ep);
    case Variant::grad2task:
    case Variant::adapt_all: {
        if (!vm.task_net || !vm.adapt_net) throw std::invalid_argument("evaluate: variant needs nets");
        bool all = vm.variant == Variant::adapt_all;
        return adapted_predict(*vm.model, *vm.task_net, *vm.adapt_net, ep, vm.fim, rng, all).accuracy;
    }
    case Variant::x: {
        if (!vm.adapt_net) throw std::invalid_argument("evaluate: variant needs an adaptation net");
        Tensor rep = mean_input_task_rep(*vm.model, ep);
        return fixed_rep_predict(*vm.model, *vm.adapt_net, rep, ep).accuracy;
    }
    case Variant::x_and_y: {
        if (!vm.adapt_net || !vm.vocab) throw std::invalid_argument("evaluate: variant needs nets");
        Tensor rep = input_label_task_rep(*vm.model, ep, ds.class_names, *vm.vocab);
        return fixed_rep_predict(*vm.model, *vm.adapt_net, rep, ep).accuracy;
    }
    case Variant::hypernet: {
        if (!vm.task_net || !vm.hyper_net) throw std::invalid_argument("evaluate: variant needs nets");
        return hypernet_predict(*vm.model, *vm.task_net, *vm.hyper_net, ep, vm.fim, rng).accuracy;
    }
    }
    throw std::logic_error("kshot_run_accuracy: bad variant");
}

EvalReport evaluate_kshot(VariantModel& vm, const TaskRegistry& registry, std::size_t k,
                          std::size_t runs, Rng& rng, bool allow_overlap,
                          const std::vector<std::string>& tasks) {
    if (runs < 1) throw std::invalid_argument("evaluate_kshot: runs must be >= 1");
    std::vector<std::string> names = tasks;
    if (names.empty()) {
        for (const auto* ds : registry.by_role(Role::meta_test)) names.push_back(ds->name);
    }
    if (names.empty()) throw std::invalid_argument("evaluate_kshot: no meta-test tasks");

    NoGradGuard guard({vm.model ? &vm.model->params() : nullptr,
                       vm.task_net ? &vm.task_net->params() : nullptr,
                       vm.adapt_net ? &vm.adapt_net->params() : nullptr,
                       vm.hyper_net ? &vm.hyper_net->params() : nullptr});

    EvalReport report;
    for (std::size_t ti = 0; ti < names.size(); ++ti) {
        const auto& name = names[ti];
        if (registry.role(name) == Role::meta_train && !allow_overlap) {
            throw std::invalid_argument("evaluate_kshot: task '" + name +
                                        "' is a meta-train task (pass allow_overlap to evaluate "
                                        "it anyway)");
        }
        const LabeledDataset& ds = registry.dataset(name);
        std::vector<double> accs;
        accs.reserve(runs);
        for (std::size_t r = 0; r < runs; ++r) {
            Rng run_rng = rng.child((ti + 1) * 10'000 + r + 1);
            accs.push_back(kshot_run_accuracy(vm, ds, k, run_rng));
        }
        double mean = std::accumulate(accs.begin(), accs.end(), 0.0) / double(runs);
        double var = 0.0;
        for (double a : accs) var += (a - mean) * (a - mean);
        var /= double(runs);
        report.rows.push_back({variant_name(vm.variant), name, k, mean, std::sqrt(var), runs});
    }
    return report;
}

// ---- same/different task probe ---------------------------------------------------

std::vector<double> pooled_feature(const GradFeatures& feats) {
    if (feats.layers.empty()) throw std::invalid_argument("pooled_feature: empty features");
    std::vector<double> out(feats.layers[0].size(), 0.0);
    for (const auto& layer : feats.layers) {
        if (layer.size() != out.size()) {
            throw std::invalid_argument("pooled_feature: inconsistent layer sizes");
        }
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += layer[i];
    }
    for (auto& x : out) x /= static_cast<double>(feats.layers.size());
    return out;
}

SameDiffModel::SameDiffModel(std::size_t input_size, std::size_t proj_size, Rng& rng)
    : input_size_(input_size), proj_size_(proj_size) {
    if (input_size_ == 0 || proj_size_ == 0) {
        throw std::invalid_argument("SameDiffModel: zero-sized dimension");
    }
    double stddev = 1.0 / std::sqrt(static_cast<double>(input_size_));
    std::vector<double> w(proj_size_ * input_size_);
    for (auto& x : w) x = rng.normal(0.0, stddev);
    params_.create("sd.w", Tensor::from_data({proj_size_, input_size_}, std::move(w)));
    params_.create("sd.a", Tensor::full({1}, 1.0));
    params_.create("sd.b", Tensor::zeros({1}));
}

Tensor SameDiffModel::score(const std::vector<double>& a, const std::vector<double>& b) const {
    if (a.size() != input_size_ || b.size() != input_size_) {
        throw std::invalid_argument("SameDiffModel: feature size mismatch (" +
                                    std::to_string(a.size()) + "/" + std::to_string(b.size()) +
                                    " vs " + std::to_string(input_size_) + ")");
    }
    Tensor ua = matvec(params_.get("sd.w"), Tensor::from_data({input_size_}, a));
    Tensor ub = matvec(params_.get("sd.w"), Tensor::from_data({input_size_}, b));
    Tensor dot = sum_all(mul(ua, ub));
    Tensor norm2 = mul(sum_all(square(ua)), sum_all(square(ub)));
    // dot / sqrt(|u|^2 |v|^2): identical inputs give exactly 1.
    return div(dot, sqrt_op(norm2));
}

Tensor SameDiffModel::probability(const std::vector<double>& a, const std::vector<double>& b) const {
    Tensor z = add(mul(params_.get("sd.a"), score(a, b)), params_.get("sd.b"));
    return sigmoid(z);
}

SameDiffModel samediff_train(const std::vector<SameDiffPair>& pairs, const SameDiffConfig& cfg) {
    if (pairs.empty()) throw std::invalid_argument("samediff_train: no pairs");
    bool any_same = false, any_diff = false;
    for (const auto& p : pairs) (p.same ? any_same : any_diff) = true;
    if (!any_same || !any_diff) {
        throw std::invalid_argument("samediff_train: need both same-task and different-task pairs");
    }
    Rng rng(cfg.seed);
    SameDiffModel model(pairs[0].a.size(), cfg.proj_size, rng);
    Adam opt(cfg.lr);
    Tensor one = Tensor::full({1}, 1.0);
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        std::vector<Tensor> losses;
        losses.reserve(pairs.size());
        for (const auto& p : pairs) {
            Tensor z = add(mul(model.params().get("sd.a"), model.score(p.a, p.b)),
                           model.params().get("sd.b"));
            // BCE via softplus(z) - y*z, avoiding log of a saturated sigmoid.
            Tensor softplus = log_op(add(exp_op(z), one));
            losses.push_back(p.same ? sub(softplus, z) : softplus);
        }
        Tensor loss = scale(sum_all(concat(losses)), 1.0 / double(losses.size()));
        backward(loss);
        opt.step(model.params());
    }
    return model;
}

double samediff_eval(const SameDiffModel& model, const std::vector<SameDiffPair>& pairs) {
    std::vector<double> scores;
    std::vector<int> labels;
    scores.reserve(pairs.size());
    for (const auto& p : pairs) {
        scores.push_back(model.probability(p.a, p.b).scalar_value());
        labels.push_back(p.same ? 1 : 0);
    }
    return roc_auc(scores, labels);
}

double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size() || scores.empty()) {
        throw std::invalid_argument("roc_auc: bad input sizes");
    }
    std::size_t pos = 0, neg = 0;
    for (int y : labels) {
        if (y == 1) ++pos;
        else if (y == 0) ++neg;
        else throw std::invalid_argument("roc_auc: labels must be 0 or 1");
    }
    if (pos == 0 || neg == 0) {
        throw std::invalid_argument("roc_auc: undefined for single-class labels");
    }
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&scores](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    // Average ranks over tied scores, then the Mann-Whitney statistic.
    std::vector<double> rank(scores.size());
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
        double avg = (double(i + 1) + double(j + 1)) / 2.0;
        for (std::size_t t = i; t <= j; ++t) rank[order[t]] = avg;
        i = j + 1;
    }
    double pos_rank_sum = 0.0;
    for (std::size_t t = 0; t < labels.size(); ++t) {
        if (labels[t] == 1) pos_rank_sum += rank[t];
    }
    double p = static_cast<double>(pos), n = static_cast<double>(neg);
    return (pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n);
}

std::vector<SameDiffPair> build_samediff_pairs(BaseModel& model, const TaskRegistry& registry,
                                               Role role, std::size_t k,
                                               std::size_t pairs_per_kind, const FimOptions& fim,
                                               Rng& rng) {
    auto tasks = registry.by_role(role);
    if (tasks.size() < 2) {
        throw std::invalid_argument("build_samediff_pairs: need at least 2 tasks of the role");
    }
    auto episode_feature = [&](const LabeledDataset& ds, Rng& erng) {
        Episode ep = sample_episode(ds, k, 1, erng);
        Rng frng = erng.child(0xF1);
        auto f = pooled_feature(fim_diag_features(model, ep, fim, frng));
        // Squared gradients span orders of magnitude; a cosine probe needs
        // the entries on a comparable scale.
        for (auto& x : f) x = std::log(x + 1e-8);
        return f;
    };
    std::vector<SameDiffPair> out;
    out.reserve(2 * pairs_per_kind);
    for (std::size_t i = 0; i < pairs_per_kind; ++i) {
        Rng prng = rng.child(2 * i + 1);
        const auto& ds = *tasks[prng.uniform_int(tasks.size())];
        Rng ra = prng.child(1), rb = prng.child(2);
        out.push_back({episode_feature(ds, ra), episode_feature(ds, rb), true});
    }
    for (std::size_t i = 0; i < pairs_per_kind; ++i) {
        Rng prng = rng.child(2 * i + 2);
        std::size_t a = prng.uniform_int(tasks.size());
        std::size_t b = prng.uniform_int(tasks.size() - 1);
        if (b >= a) ++b;
        Rng ra = prng.child(1), rb = prng.child(2);
        out.push_back({episode_feature(*tasks[a], ra), episode_feature(*tasks[b], rb), false});
    }
    return out;
}

// ---- ablation orchestration ------------------------------------------------------

EvalReport run_ablation(Variant v, BaseModel& model, const TaskRegistry& registry,
                        const Vocab& vocab, const AblationConfig& cfg) {
    const EncoderConfig& ec = model.config();
    Rng root(cfg.seed);
    Rng init_rng = root.child(0x171);

    FimOptions fim;
    fim.rounds = cfg.train.fim_rounds;
    fim.normalize = cfg.train.normalize_features;

    VariantModel vm;
    vm.variant = v;
    vm.model = &model;
    vm.vocab = &vocab;
    vm.registry = &registry;
    vm.fim = fim;

    TaskEmbedConfig tec;
    tec.input_size = ec.adapter_param_count();
    tec.hidden_size = cfg.task_embed_hidden;
    tec.embed_size = cfg.task_embed_size;

    AdaptNetConfig anc;
    anc.model_dim = ec.model_dim;
    anc.adapter_dim = ec.adapter_dim;
    anc.num_adapters = ec.num_adapters();
    anc.linear_only = cfg.train.linear_adapt_net;

    std::optional<TaskEmbedNet> task_net;
    std::optional<AdaptNet> adapt_net;
    std::optional<HyperNet> hyper_net;

    switch (v) {
    case Variant::pn:
        break;
    case Variant::pn_longer:
        train_stage1(model, registry, cfg.train);
        break;
    case Variant::grad2task:
    case Variant::adapt_all:
        task_net.emplace(tec, init_rng);
        anc.embed_size = cfg.task_embed_size;
        adapt_net.emplace(anc, init_rng);
        train_stage2(model, *task_net, *adapt_net, registry, cfg.train, v == Variant::adapt_all);
        vm.task_net = &*task_net;
        vm.adapt_net = &*adapt_net;
        break;
    case Variant::hypernet:
        task_net.emplace(tec, init_rng);
        hyper_net.emplace(cfg.task_embed_size, ec.adapter_param_count(), ec.num_adapters(), init_rng);
        train_stage2_hypernet(model, *task_net, *hyper_net, registry, cfg.train);
        vm.task_net = &*task_net;
        vm.hyper_net = &*hyper_net;
        break;
    case Variant::x:
        anc.embed_size = ec.head_out_dim;
        adapt_net.emplace(anc, init_rng);
        train_stage2_fixed(model, *adapt_net, FixedRepKind::input_mean, vocab, registry, cfg.train);
        vm.adapt_net = &*adapt_net;
        break;
    case Variant::x_and_y:
        anc.embed_size = 2 * ec.head_out_dim;
        adapt_net.emplace(anc, init_rng);
        train_stage2_fixed(model, *adapt_net, FixedRepKind::input_label, vocab, registry, cfg.train);
        vm.adapt_net = &*adapt_net;
        break;
    }

    EvalReport report;
    for (std::size_t ki = 0; ki < cfg.ks.size(); ++ki) {
        Rng eval_rng = root.child(0xE7A1 + ki);
        EvalReport part = evaluate_kshot(vm, registry, cfg.ks[ki], cfg.runs, eval_rng);
        report.rows.insert(report.rows.end(), part.rows.begin(), part.rows.end());
    }
    return report;
}

} // namespace g2t
