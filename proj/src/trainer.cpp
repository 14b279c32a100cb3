#include "grad2task/trainer.hpp"

#include <cmath>
#include <filesystem>
#include <functional>
#include <stdexcept>

#include "grad2task/adam.hpp"
#include "grad2task/checkpoint.hpp"
#include "grad2task/proto.hpp"

namespace g2t {

void TrainConfig::validate() const {
    if (stage != 1 && stage != 2) throw std::invalid_argument("TrainConfig: stage must be 1 or 2");
    if (episodes_per_step < 1) throw std::invalid_argument("TrainConfig: episodes_per_step must be >= 1");
    if (fim_rounds < 1) throw std::invalid_argument("TrainConfig: fim_rounds must be >= 1");
    if (shots < 1) throw std::invalid_argument("TrainConfig: shots must be >= 1");
    if (lr < 0.0) throw std::invalid_argument("TrainConfig: negative learning rate");
    if (max_epochs < 1) throw std::invalid_argument("TrainConfig: max_epochs must be >= 1");
    if (val_episodes < 1) throw std::invalid_argument("TrainConfig: val_episodes must be >= 1");
}

std::map<std::string, std::string> parse_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("config: cannot open " + path);
    std::map<std::string, std::string> kv;
    std::string line;
    std::size_t lineno = 0;
    auto trim = [](std::string s) {
        auto b = s.find_first_not_of(" \t\r");
        auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    while (std::getline(is, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw std::runtime_error("config: " + path + ":" + std::to_string(lineno) +
                                     ": expected key=value, got '" + t + "'");
        }
        kv[trim(t.substr(0, eq))] = trim(t.substr(eq + 1));
    }
    return kv;
}

namespace {

double parse_double(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("config: bad number for " + key + ": '" + v + "'");
    return x;
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    auto x = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("config: bad integer for " + key + ": '" + v + "'");
    return x;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw std::invalid_argument("config: bad boolean for " + key + ": '" + v + "'");
}

} // namespace

void apply_config(TrainConfig& cfg, const std::map<std::string, std::string>& kv) {
    for (const auto& [key, v] : kv) {
        if (key == "stage") cfg.stage = static_cast<int>(parse_uint(key, v));
        else if (key == "episodes_per_step") cfg.episodes_per_step = parse_uint(key, v);
        else if (key == "fim_rounds") cfg.fim_rounds = parse_uint(key, v);
        else if (key == "shots") cfg.shots = parse_uint(key, v);
        else if (key == "query_shots") cfg.query_shots = parse_uint(key, v);
        else if (key == "lr") cfg.lr = parse_double(key, v);
        else if (key == "beta1") cfg.beta1 = parse_double(key, v);
        else if (key == "beta2") cfg.beta2 = parse_double(key, v);
        else if (key == "adam_eps") cfg.adam_eps = parse_double(key, v);
        else if (key == "max_epochs") cfg.max_epochs = parse_uint(key, v);
        else if (key == "steps_per_epoch") cfg.steps_per_epoch = parse_uint(key, v);
        else if (key == "max_steps") cfg.max_steps = parse_uint(key, v);
        else if (key == "patience") cfg.patience = parse_uint(key, v);
        else if (key == "start_step") cfg.start_step = parse_uint(key, v);
        else if (key == "seed") cfg.seed = parse_uint(key, v);
        else if (key == "val_episodes") cfg.val_episodes = parse_uint(key, v);
        else if (key == "restore_best") cfg.restore_best = parse_bool(key, v);
        else if (key == "normalize_features") cfg.normalize_features = parse_bool(key, v);
        else if (key == "linear_adapt_net") cfg.linear_adapt_net = parse_bool(key, v);
        else if (key == "task_embed_size") cfg.task_embed_size = parse_uint(key, v);
        else if (key == "task_embed_hidden") cfg.task_embed_hidden = parse_uint(key, v);
        else if (key == "checkpoint_path") cfg.checkpoint_path = v;
        else if (key == "metrics_path") cfg.metrics_path = v;
        else throw std::invalid_argument("config: unknown key '" + key + "'");
    }
}

MetricsLog::MetricsLog(const std::string& path) {
    if (path.empty()) return;
    os_.open(path, std::ios::trunc);
    if (!os_) throw std::runtime_error("metrics: cannot write " + path);
    os_ << "step,epoch,split,task,loss,accuracy\n";
    os_.precision(12);
}

void MetricsLog::record(std::size_t step, std::size_t epoch, const std::string& split,
                        const std::string& task, double loss, double accuracy) {
    if (!os_.is_open()) return;
    os_ << step << "," << epoch << "," << split << "," << task << "," << loss << "," << accuracy
        << "\n";
}

std::size_t derive_steps_per_epoch(const TaskRegistry& registry, const TrainConfig& cfg) {
    auto tasks = registry.by_role(Role::meta_train);
    if (tasks.empty()) throw std::invalid_argument("trainer: no meta-train tasks");
    std::size_t total = 0;
    double avg_episode = 0.0;
    std::size_t qk = cfg.query_shots ? cfg.query_shots : cfg.shots;
    for (const auto* ds : tasks) {
        total += ds->train.size();
        avg_episode += static_cast<double>(ds->num_classes() * (cfg.shots + qk));
    }
    avg_episode /= static_cast<double>(tasks.size());
    std::size_t episodes = std::max<std::size_t>(1, static_cast<std::size_t>(total / avg_episode));
    return std::max<std::size_t>(1, episodes / cfg.episodes_per_step);
}

bool adapt_net_at_identity(const AdaptNet& net) {
    bool linear = net.config().linear_only;
    for (const auto& e : net.params().entries()) {
        bool final_layer;
        if (linear) {
            final_layer = true;
        } else {
            auto n = e.name;
            final_layer = n.size() > 2 && (n.ends_with(".w2") || n.ends_with(".b2"));
        }
        if (!final_layer) continue;
        for (double x : e.tensor.values()) {
            if (x != 0.0) return false;
        }
    }
    return true;
}

namespace {

struct EpisodeOutcome {
    Tensor loss;
    double accuracy = 0.0;
};

using EpisodeFn = std::function<EpisodeOutcome(const Episode&, Rng&, bool training)>;

/// Shared episodic training loop. `store` carries both the optimizer's
/// trainable set and what gets checkpointed. Step rngs derive from the seed
/// and the global step index alone, so resumed runs replay the exact
/// episode stream of an uninterrupted run.
TrainResult run_training(const TaskRegistry& registry, const TrainConfig& cfg, ParamStore& store,
                         Adam& opt, const EpisodeFn& run_episode,
                         const std::function<void()>& post_backward) {
    cfg.validate();
    std::size_t spe = cfg.steps_per_epoch ? cfg.steps_per_epoch : derive_steps_per_epoch(registry, cfg);
    std::size_t end_step = cfg.max_epochs * spe;
    if (cfg.max_steps) end_step = std::min(end_step, cfg.max_steps);

    MetricsLog log(cfg.metrics_path);
    Rng root(cfg.seed);
    std::size_t qk = cfg.query_shots ? cfg.query_shots : cfg.shots;

    auto tasks = registry.train_names();
    TrainResult result;
    result.best_val_accuracy = -1.0;
    std::vector<std::vector<double>> best_snapshot;
    std::size_t bad_epochs = 0;
    std::size_t global = cfg.start_step;

    auto validate_epoch = [&](std::size_t epoch) {
        Rng vrng = root.child(0x56A11D00ULL + epoch);
        double acc_sum = 0.0, loss_sum = 0.0;
        for (std::size_t i = 0; i < cfg.val_episodes; ++i) {
            const auto& name = tasks[i % tasks.size()];
            const auto& ds = registry.dataset(name);
            Rng erng = vrng.child(i + 1);
            Episode ep = sample_episode_from(ds, ds.val, cfg.shots, qk, erng);
            EpisodeOutcome out = run_episode(ep, erng, false);
            acc_sum += out.accuracy;
            loss_sum += out.loss.scalar_value();
            log.record(global, epoch, "val", name, out.loss.scalar_value(), out.accuracy);
        }
        return std::make_pair(acc_sum / double(cfg.val_episodes), loss_sum / double(cfg.val_episodes));
    };

    while (global < end_step) {
        std::size_t epoch = global / spe + 1;
        Rng step_rng = root.child(global + 1);
        Tensor total;
        double step_loss = 0.0;
        try {
            for (std::size_t m = 0; m < cfg.episodes_per_step; ++m) {
                Rng ep_rng = step_rng.child(m + 1);
                const std::string& name = registry.sample_task(ep_rng);
                Episode ep = sample_episode(registry.dataset(name), cfg.shots, qk, ep_rng);
                EpisodeOutcome out = run_episode(ep, ep_rng, true);
                log.record(global, epoch, "train", name, out.loss.scalar_value(), out.accuracy);
                step_loss += out.loss.scalar_value();
                Tensor piece = scale(out.loss, 1.0 / double(cfg.episodes_per_step));
                total = total.defined() ? add(total, piece) : piece;
            }
            backward(total);
            if (post_backward) post_backward();
            opt.step(store);
        } catch (const std::exception& e) {
            throw std::runtime_error("training aborted at step " + std::to_string(global) + ": " +
                                     e.what());
        }
        result.final_train_loss = step_loss / double(cfg.episodes_per_step);
        ++global;

        if (global % spe == 0 || global == end_step) {
            std::size_t done_epoch = (global + spe - 1) / spe;
            auto [val_acc, val_loss] = validate_epoch(done_epoch);
            result.epochs = done_epoch;
            if (val_acc > result.best_val_accuracy + 1e-12) {
                result.best_val_accuracy = val_acc;
                result.best_val_loss = val_loss;
                bad_epochs = 0;
                best_snapshot.clear();
                for (const auto& e : store.entries()) {
                    best_snapshot.emplace_back(e.tensor.values().begin(), e.tensor.values().end());
                }
            } else {
                ++bad_epochs;
            }
            if (global % spe == 0 && bad_epochs > cfg.patience) break;
        }
    }
    result.steps = global;

    if (cfg.restore_best && !best_snapshot.empty()) {
        std::size_t i = 0;
        for (auto& e : store.entries()) {
            auto vals = e.tensor.mutable_values();
            std::copy(best_snapshot[i].begin(), best_snapshot[i].end(), vals.begin());
            ++i;
        }
    }
    if (!cfg.checkpoint_path.empty()) {
        std::map<std::string, double> extras = cfg.checkpoint_extras;
        extras["step"] = static_cast<double>(result.steps);
        extras["stage"] = static_cast<double>(cfg.stage);
        save_checkpoint(cfg.checkpoint_path, store, &opt, extras);
    }
    return result;
}

EpisodeOutcome protonet_episode(const BaseModel& model, const Episode& ep, Rng& rng, bool training) {
    Rng drop_rng = rng.child(0xD40);
    std::vector<Tensor> s_embs, q_embs;
    std::vector<int> s_labels, q_labels;
    for (const auto& [tokens, label] : ep.support) {
        s_embs.push_back(model.encode(tokens, training, training ? &drop_rng : nullptr));
        s_labels.push_back(label);
    }
    for (const auto& [tokens, label] : ep.query) {
        q_embs.push_back(model.encode(tokens, training, training ? &drop_rng : nullptr));
        q_labels.push_back(label);
    }
    EpisodeOutcome out;
    Tensor protos = compute_prototypes(s_embs, s_labels, ep.num_classes);
    out.loss = protonet_loss(protos, q_embs, q_labels, &out.accuracy);
    return out;
}

void check_model_frozen(const BaseModel& model, const char* where) {
    for (const auto& e : model.params().entries()) {
        if (e.tensor.has_grad()) {
            throw std::logic_error(std::string(where) + ": gradient leaked into frozen parameter '" +
                                   e.name + "'");
        }
    }
}

/// Exact agreement between the unadapted and the identity-adapted
/// predictive distributions on one probe episode.
void verify_identity_equivalence(BaseModel& model, const Episode& ep,
                                 const std::function<AdaptedPrediction(const Episode&, Rng&)>& predict,
                                 Rng& rng) {
    Rng probe_rng = rng.child(0x1DE47);
    AdaptedPrediction adapted = predict(ep, probe_rng);

    std::vector<Tensor> s_embs;
    std::vector<int> s_labels;
    for (const auto& [tokens, label] : ep.support) {
        s_embs.push_back(model.encode(tokens));
        s_labels.push_back(label);
    }
    Tensor protos = compute_prototypes(s_embs, s_labels, ep.num_classes);
    for (std::size_t j = 0; j < ep.query.size(); ++j) {
        Tensor probs = softmax(class_logits(protos, model.encode(ep.query[j].first)));
        for (std::size_t c = 0; c < probs.size(); ++c) {
            if (probs.value_at(c) != adapted.query_probs[j][c]) {
                throw std::logic_error("stage 2: identity-initialized adaptation does not "
                                       "reproduce the base predictions exactly");
            }
        }
    }
}

std::vector<std::pair<std::string, bool>> freeze_all(ParamStore& store) {
    std::vector<std::pair<std::string, bool>> saved;
    saved.reserve(store.size());
    for (auto& e : store.entries()) {
        saved.emplace_back(e.name, e.tensor.requires_grad());
        e.trainable = false;
        e.tensor.node()->requires_grad = false;
    }
    return saved;
}

void restore_requires_grad(ParamStore& store, const std::vector<std::pair<std::string, bool>>& saved) {
    for (const auto& [name, rg] : saved) store.get(name).node()->requires_grad = rg;
}

Episode identity_probe_episode(const TaskRegistry& registry, const TrainConfig& cfg) {
    Rng rng = Rng(cfg.seed).child(0xBA5E);
    const std::string& name = registry.sample_task(rng);
    std::size_t qk = cfg.query_shots ? cfg.query_shots : cfg.shots;
    return sample_episode(registry.dataset(name), cfg.shots, qk, rng);
}

} // namespace

TrainResult train_stage1(BaseModel& model, const TaskRegistry& registry, const TrainConfig& cfg) {
    ParamStore& store = model.params();
    for (auto& e : store.entries()) e.trainable = !BaseModel::is_theta(e.name);

    Adam opt(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
    if (cfg.start_step > 0) {
        if (cfg.checkpoint_path.empty() || !std::filesystem::exists(cfg.checkpoint_path)) {
            throw std::runtime_error("train_stage1: resume requested but checkpoint missing");
        }
        load_checkpoint(cfg.checkpoint_path, store, &opt);
    }

    EpisodeFn fn = [&model](const Episode& ep, Rng& rng, bool training) {
        return protonet_episode(model, ep, rng, training);
    };
    return run_training(registry, cfg, store, opt, fn, nullptr);
}

TrainResult train_stage2(BaseModel& model, TaskEmbedNet& task_net, AdaptNet& adapt_net,
                         const TaskRegistry& registry, const TrainConfig& cfg, bool adapt_all) {
    auto saved = freeze_all(model.params());

    ParamStore merged;
    for (auto& e : task_net.params().entries()) merged.create(e.name, e.tensor);
    for (auto& e : adapt_net.params().entries()) merged.create(e.name, e.tensor);

    Adam opt(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
    if (cfg.start_step > 0) {
        if (cfg.checkpoint_path.empty() || !std::filesystem::exists(cfg.checkpoint_path)) {
            throw std::runtime_error("train_stage2: resume requested but checkpoint missing");
        }
        load_checkpoint(cfg.checkpoint_path, merged, &opt);
    }

    FimOptions fim;
    fim.rounds = cfg.fim_rounds;
    fim.normalize = cfg.normalize_features;

    auto predict = [&](const Episode& ep, Rng& rng) {
        return adapted_predict(model, task_net, adapt_net, ep, fim, rng, adapt_all);
    };
    if (adapt_net_at_identity(adapt_net)) {
        Rng probe = Rng(cfg.seed).child(0x1D);
        verify_identity_equivalence(model, identity_probe_episode(registry, cfg), predict, probe);
        model.params().zero_grads();
    }

    EpisodeFn fn = [&](const Episode& ep, Rng& rng, bool) {
        AdaptedPrediction p = predict(ep, rng);
        return EpisodeOutcome{p.loss, p.accuracy};
    };
    auto guard = [&model] { check_model_frozen(model, "train_stage2"); };
    TrainResult r = run_training(registry, cfg, merged, opt, fn, guard);
    restore_requires_grad(model.params(), saved);
    return r;
}

TrainResult train_stage2_hypernet(BaseModel& model, TaskEmbedNet& task_net, HyperNet& hyper_net,
                                  const TaskRegistry& registry, const TrainConfig& cfg) {
    auto saved = freeze_all(model.params());

    ParamStore merged;
    for (auto& e : task_net.params().entries()) merged.create(e.name, e.tensor);
    for (auto& e : hyper_net.params().entries()) merged.create(e.name, e.tensor);

    Adam opt(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
    if (cfg.start_step > 0) {
        if (cfg.checkpoint_path.empty() || !std::filesystem::exists(cfg.checkpoint_path)) {
            throw std::runtime_error("train_stage2_hypernet: resume requested but checkpoint missing");
        }
        load_checkpoint(cfg.checkpoint_path, merged, &opt);
    }

    FimOptions fim;
    fim.rounds = cfg.fim_rounds;
    fim.normalize = cfg.normalize_features;

    EpisodeFn fn = [&](const Episode& ep, Rng& rng, bool) {
        AdaptedPrediction p = hypernet_predict(model, task_net, hyper_net, ep, fim, rng);
        return EpisodeOutcome{p.loss, p.accuracy};
    };
    auto guard = [&model] { check_model_frozen(model, "train_stage2_hypernet"); };
    TrainResult r = run_training(registry, cfg, merged, opt, fn, guard);
    restore_requires_grad(model.params(), saved);
    return r;
}

TrainResult train_stage2_fixed(BaseModel& model, AdaptNet& adapt_net, FixedRepKind kind,
                               const Vocab& vocab, const TaskRegistry& registry,
                               const TrainConfig& cfg) {
    auto saved = freeze_all(model.params());

    ParamStore merged;
    for (auto& e : adapt_net.params().entries()) merged.create(e.name, e.tensor);

    Adam opt(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
    if (cfg.start_step > 0) {
        if (cfg.checkpoint_path.empty() || !std::filesystem::exists(cfg.checkpoint_path)) {
            throw std::runtime_error("train_stage2_fixed: resume requested but checkpoint missing");
        }
        load_checkpoint(cfg.checkpoint_path, merged, &opt);
    }

    EpisodeFn fn = [&](const Episode& ep, Rng&, bool) {
        Tensor rep = kind == FixedRepKind::input_mean
                         ? mean_input_task_rep(model, ep)
                         : input_label_task_rep(model, ep,
                                                registry.dataset(ep.task).class_names, vocab);
        AdaptedPrediction p = fixed_rep_predict(model, adapt_net, rep, ep);
        return EpisodeOutcome{p.loss, p.accuracy};
    };
    auto guard = [&model] { check_model_frozen(model, "train_stage2_fixed"); };
    TrainResult r = run_training(registry, cfg, merged, opt, fn, guard);
    restore_requires_grad(model.params(), saved);
    return r;
}

} // namespace g2t
