#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "grad2task/adaptation.hpp"
#include "grad2task/checkpoint.hpp"
#include "grad2task/encoder.hpp"
#include "grad2task/episodes.hpp"
#include "grad2task/eval.hpp"
#include "grad2task/task_embedding.hpp"
#include "grad2task/trainer.hpp"
#include "grad2task/vocab.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace g2t;

namespace {

/// Wrong invocation (bad flags, missing files): exit code 1. Everything
/// else that throws is a runtime failure: exit code 2.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string fnv1a_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot hash missing file " + path);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[4096];
    while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
        for (std::streamsize i = 0; i < is.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ULL;
        }
    }
    char out[32];
    std::snprintf(out, sizeof(out), "fnv1a:%016llx", static_cast<unsigned long long>(h));
    return out;
}

struct Manifest {
    std::string verb;
    std::uint64_t seed = 0;
    std::map<std::string, std::string> config;
    std::map<std::string, std::string> inputs;  // path -> hash
    std::vector<std::string> outputs;           // hashed at write time

    void write(const fs::path& out_dir) const {
        json j;
        j["verb"] = verb;
        j["seed"] = seed;
        j["config"] = config;
        j["inputs"] = inputs;
        json outs = json::object();
        for (const auto& p : outputs) outs[p] = fnv1a_file((out_dir / p).string());
        j["outputs"] = outs;
        fs::path path = out_dir / (verb + ".manifest.json");
        std::ofstream os(path, std::ios::trunc);
        if (!os) throw std::runtime_error("cannot write manifest " + path.string());
        os << j.dump(2) << "\n";
    }
};

void require_file(const std::string& path, const char* what) {
    if (!fs::exists(path)) {
        throw UsageError(std::string(what) + " not found: " + path);
    }
}

std::map<std::string, std::string> config_to_map(const TrainConfig& c) {
    std::map<std::string, std::string> m;
    auto put = [&m](const char* k, auto v) { m[k] = std::to_string(v); };
    put("stage", c.stage);
    put("episodes_per_step", c.episodes_per_step);
    put("fim_rounds", c.fim_rounds);
    put("shots", c.shots);
    put("query_shots", c.query_shots);
    put("lr", c.lr);
    put("beta1", c.beta1);
    put("beta2", c.beta2);
    put("adam_eps", c.adam_eps);
    put("max_epochs", c.max_epochs);
    put("steps_per_epoch", c.steps_per_epoch);
    put("max_steps", c.max_steps);
    put("patience", c.patience);
    put("start_step", c.start_step);
    put("seed", c.seed);
    put("val_episodes", c.val_episodes);
    m["restore_best"] = c.restore_best ? "true" : "false";
    m["normalize_features"] = c.normalize_features ? "true" : "false";
    m["linear_adapt_net"] = c.linear_adapt_net ? "true" : "false";
    put("task_embed_size", c.task_embed_size);
    put("task_embed_hidden", c.task_embed_hidden);
    return m;
}

TrainConfig resolve_train_config(const std::string& config_path,
                                 const std::vector<std::string>& overrides, std::uint64_t seed) {
    TrainConfig cfg;
    if (!config_path.empty()) {
        require_file(config_path, "config file");
        apply_config(cfg, parse_config_file(config_path));
    }
    std::map<std::string, std::string> kv;
    for (const auto& o : overrides) {
        auto eq = o.find('=');
        if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + o + "'");
        kv[o.substr(0, eq)] = o.substr(eq + 1);
    }
    try {
        apply_config(cfg, kv);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    cfg.seed = seed;
    return cfg;
}

std::map<std::string, double> peek_extras(const std::string& path) {
    std::map<std::string, double> extras;
    for (const auto& [name, tensor] : read_tensor_file(path)) {
        if (name.rfind("~x.", 0) == 0) extras[name.substr(3)] = tensor.scalar_value();
    }
    return extras;
}

std::map<std::string, double> encoder_extras(const EncoderConfig& c) {
    return {{"enc.vocab_size", double(c.vocab_size)},   {"enc.max_seq_len", double(c.max_seq_len)},
            {"enc.model_dim", double(c.model_dim)},     {"enc.num_layers", double(c.num_layers)},
            {"enc.num_heads", double(c.num_heads)},     {"enc.ffn_dim", double(c.ffn_dim)},
            {"enc.adapter_dim", double(c.adapter_dim)}, {"enc.head_out_dim", double(c.head_out_dim)},
            {"enc.dropout", c.dropout_rate}};
}

EncoderConfig encoder_from_extras(const std::map<std::string, double>& x, const std::string& path) {
    auto get = [&](const char* k) {
        auto it = x.find(k);
        if (it == x.end()) {
            throw std::runtime_error("checkpoint " + path + " lacks geometry entry '" + k + "'");
        }
        return it->second;
    };
    EncoderConfig c;
    c.vocab_size = std::size_t(get("enc.vocab_size"));
    c.max_seq_len = std::size_t(get("enc.max_seq_len"));
    c.model_dim = std::size_t(get("enc.model_dim"));
    c.num_layers = std::size_t(get("enc.num_layers"));
    c.num_heads = std::size_t(get("enc.num_heads"));
    c.ffn_dim = std::size_t(get("enc.ffn_dim"));
    c.adapter_dim = std::size_t(get("enc.adapter_dim"));
    c.head_out_dim = std::size_t(get("enc.head_out_dim"));
    c.dropout_rate = get("enc.dropout");
    return c;
}

BaseModel load_base_model(const std::string& ckpt, std::uint64_t seed) {
    require_file(ckpt, "base checkpoint");
    EncoderConfig ec = encoder_from_extras(peek_extras(ckpt), ckpt);
    Rng rng = Rng(seed).child(0xB0DE);
    BaseModel model(ec, rng);
    load_checkpoint(ckpt, model.params());
    return model;
}

EncoderConfig desk_encoder_config(std::size_t vocab_size) {
    EncoderConfig ec;
    ec.vocab_size = vocab_size;
    return ec;
}

void check_threads_env() {
    const char* t = std::getenv("GRAD2TASK_THREADS");
    if (!t) return;
    char* end = nullptr;
    long v = std::strtol(t, &end, 10);
    if (end == t || *end != '\0' || v < 1) {
        throw UsageError(std::string("GRAD2TASK_THREADS must be a positive integer, got '") + t + "'");
    }
    // All computation is single-threaded; the cap is honored trivially.
}

// ---- verbs ------------------------------------------------------------------------

int cmd_gen_data(const std::string& out_dir, std::uint64_t seed) {
    fs::path data_dir = fs::path(out_dir) / "data";
    fs::create_directories(data_dir);

    Vocab vocab;
    Rng rng = Rng(seed).child(0xDA7A);
    SyntheticSpec spec = SyntheticSpec::default_suite();
    auto suite = make_synthetic_suite(rng, spec, vocab);

    Manifest man;
    man.verb = "gen-data";
    man.seed = seed;
    man.config["families"] = std::to_string(spec.families.size());
    man.config["seq_len"] = std::to_string(spec.seq_len);
    man.config["train_per_class"] = std::to_string(spec.train_per_class);

    vocab.save((data_dir / "vocab.txt").string());
    man.outputs.push_back("data/vocab.txt");

    // Last two families are held out for meta-test.
    std::vector<RegistryManifestEntry> entries;
    for (std::size_t i = 0; i < suite.size(); ++i) {
        const auto& ds = suite[i];
        RegistryManifestEntry e;
        e.role = i + 2 >= suite.size() ? Role::meta_test : Role::meta_train;
        e.name = ds.name;
        e.train_path = ds.name + ".train.jsonl";
        e.val_path = ds.name + ".val.jsonl";
        e.test_path = ds.name + ".test.jsonl";
        save_jsonl(ds.train, ds.class_names, vocab, (data_dir / e.train_path).string());
        save_jsonl(ds.val, ds.class_names, vocab, (data_dir / e.val_path).string());
        save_jsonl(ds.test, ds.class_names, vocab, (data_dir / e.test_path).string());
        man.outputs.push_back("data/" + e.train_path);
        man.outputs.push_back("data/" + e.val_path);
        man.outputs.push_back("data/" + e.test_path);
        entries.push_back(std::move(e));
    }
    save_registry_manifest((data_dir / "registry.txt").string(), entries);
    man.outputs.push_back("data/registry.txt");
    man.write(out_dir);
    std::cerr << "gen-data: wrote " << suite.size() << " tasks to " << data_dir << "\n";
    return 0;
}

int cmd_pretrain(const std::string& out_dir, const std::string& data_dir, std::uint64_t seed,
                 std::size_t steps, double lr) {
    fs::create_directories(out_dir);
    std::string vocab_path = (fs::path(data_dir) / "vocab.txt").string();
    std::string registry_path = (fs::path(data_dir) / "registry.txt").string();
    require_file(vocab_path, "vocabulary");
    require_file(registry_path, "registry");

    Vocab vocab = Vocab::load(vocab_path);
    TaskRegistry registry = load_registry(registry_path, vocab);

    EncoderConfig ec = desk_encoder_config(vocab.size());
    Rng model_rng = Rng(seed).child(0xB0DE);
    BaseModel model(ec, model_rng);

    std::vector<std::vector<int>> corpus;
    for (const auto* ds : registry.by_role(Role::meta_train)) {
        for (const auto& ex : ds->train) corpus.push_back(ex.tokens);
    }
    Rng train_rng = Rng(seed).child(0x9D);
    PretrainResult res = pretrain_encoder(model, corpus, steps, lr, train_rng);
    std::cerr << "pretrain: " << steps << " steps, masked accuracy " << res.masked_accuracy << "\n";

    std::string ckpt = (fs::path(out_dir) / "pretrained.ckpt").string();
    save_checkpoint(ckpt, model.params(), nullptr, encoder_extras(ec));

    Manifest man;
    man.verb = "pretrain";
    man.seed = seed;
    man.config["steps"] = std::to_string(steps);
    man.config["lr"] = std::to_string(lr);
    man.inputs[vocab_path] = fnv1a_file(vocab_path);
    man.inputs[registry_path] = fnv1a_file(registry_path);
    man.outputs.push_back("pretrained.ckpt");
    man.write(out_dir);
    return 0;
}

int cmd_train_base(const std::string& out_dir, const std::string& data_dir,
                   const std::string& init_ckpt, TrainConfig cfg) {
    fs::create_directories(out_dir);
    std::string vocab_path = (fs::path(data_dir) / "vocab.txt").string();
    std::string registry_path = (fs::path(data_dir) / "registry.txt").string();
    require_file(vocab_path, "vocabulary");
    require_file(registry_path, "registry");

    Vocab vocab = Vocab::load(vocab_path);
    TaskRegistry registry = load_registry(registry_path, vocab);

    EncoderConfig ec = desk_encoder_config(vocab.size());
    Rng model_rng = Rng(cfg.seed).child(0xB0DE);
    std::optional<BaseModel> model;
    if (!init_ckpt.empty()) {
        model.emplace(load_base_model(init_ckpt, cfg.seed));
    } else {
        model.emplace(ec, model_rng);
    }

    cfg.stage = 1;
    cfg.checkpoint_path = (fs::path(out_dir) / "stage1.ckpt").string();
    cfg.metrics_path = (fs::path(out_dir) / "stage1_metrics.csv").string();
    cfg.checkpoint_extras = encoder_extras(model->config());

    TrainResult res = train_stage1(*model, registry, cfg);
    std::cerr << "train-base: " << res.steps << " steps, best val accuracy "
              << res.best_val_accuracy << "\n";

    Manifest man;
    man.verb = "train-base";
    man.seed = cfg.seed;
    man.config = config_to_map(cfg);
    man.inputs[vocab_path] = fnv1a_file(vocab_path);
    man.inputs[registry_path] = fnv1a_file(registry_path);
    if (!init_ckpt.empty()) man.inputs[init_ckpt] = fnv1a_file(init_ckpt);
    man.outputs.push_back("stage1.ckpt");
    man.outputs.push_back("stage1_metrics.csv");
    man.write(out_dir);
    return 0;
}

int cmd_train_adapt(const std::string& out_dir, const std::string& data_dir,
                    const std::string& base_ckpt, const std::string& variant_name_in,
                    TrainConfig cfg) {
    fs::create_directories(out_dir);
    std::string vocab_path = (fs::path(data_dir) / "vocab.txt").string();
    std::string registry_path = (fs::path(data_dir) / "registry.txt").string();
    require_file(vocab_path, "vocabulary");
    require_file(registry_path, "registry");

    Variant v = Variant::grad2task;
    if (!variant_name_in.empty()) {
        try {
            v = parse_variant(variant_name_in);
        } catch (const std::invalid_argument& e) {
            throw UsageError(e.what());
        }
    }
    if (v == Variant::pn || v == Variant::pn_longer) {
        throw UsageError("train-adapt trains stage-2 variants; use train-base for '" +
                         variant_name(v) + "'");
    }

    Vocab vocab = Vocab::load(vocab_path);
    TaskRegistry registry = load_registry(registry_path, vocab);
    BaseModel model = load_base_model(base_ckpt, cfg.seed);
    const EncoderConfig& ec = model.config();

    cfg.stage = 2;
    cfg.checkpoint_path = (fs::path(out_dir) / "stage2.ckpt").string();
    cfg.metrics_path = (fs::path(out_dir) / "stage2_metrics.csv").string();
    cfg.checkpoint_extras = encoder_extras(ec);
    cfg.checkpoint_extras["net.variant"] = double(static_cast<int>(v));
    cfg.checkpoint_extras["net.embed_size"] = double(cfg.task_embed_size);
    cfg.checkpoint_extras["net.hidden_size"] = double(cfg.task_embed_hidden);
    cfg.checkpoint_extras["net.linear_only"] = cfg.linear_adapt_net ? 1.0 : 0.0;

    Rng init_rng = Rng(cfg.seed).child(0xAD);
    TaskEmbedConfig tec{ec.adapter_param_count(), cfg.task_embed_hidden, cfg.task_embed_size, 2};
    AdaptNetConfig anc;
    anc.model_dim = ec.model_dim;
    anc.adapter_dim = ec.adapter_dim;
    anc.num_adapters = ec.num_adapters();
    anc.linear_only = cfg.linear_adapt_net;

    TrainResult res;
    if (v == Variant::grad2task || v == Variant::adapt_all) {
        TaskEmbedNet task_net(tec, init_rng);
        anc.embed_size = cfg.task_embed_size;
        AdaptNet adapt_net(anc, init_rng);
        res = train_stage2(model, task_net, adapt_net, registry, cfg, v == Variant::adapt_all);
    } else if (v == Variant::hypernet) {
        TaskEmbedNet task_net(tec, init_rng);
        HyperNet hyper_net(cfg.task_embed_size, ec.adapter_param_count(), ec.num_adapters(),
                           init_rng);
        res = train_stage2_hypernet(model, task_net, hyper_net, registry, cfg);
    } else {
        anc.embed_size = v == Variant::x ? ec.head_out_dim : 2 * ec.head_out_dim;
        AdaptNet adapt_net(anc, init_rng);
        res = train_stage2_fixed(model, adapt_net,
                                 v == Variant::x ? FixedRepKind::input_mean
                                                 : FixedRepKind::input_label,
                                 vocab, registry, cfg);
    }
    std::cerr << "train-adapt (" << variant_name(v) << "): " << res.steps
              << " steps, best val accuracy " << res.best_val_accuracy << "\n";

    Manifest man;
    man.verb = "train-adapt";
    man.seed = cfg.seed;
    man.config = config_to_map(cfg);
    man.config["variant"] = variant_name(v);
    man.inputs[vocab_path] = fnv1a_file(vocab_path);
    man.inputs[registry_path] = fnv1a_file(registry_path);
    man.inputs[base_ckpt] = fnv1a_file(base_ckpt);
    man.outputs.push_back("stage2.ckpt");
    man.outputs.push_back("stage2_metrics.csv");
    man.write(out_dir);
    return 0;
}

/// Rebuilds a stage-2 checkpoint's networks from its stored geometry.
struct AdaptBundle {
    Variant variant = Variant::grad2task;
    std::optional<TaskEmbedNet> task_net;
    std::optional<AdaptNet> adapt_net;
    std::optional<HyperNet> hyper_net;
};

AdaptBundle load_adapt_bundle(const std::string& ckpt, const EncoderConfig& ec,
                              std::uint64_t seed) {
    require_file(ckpt, "adaptation checkpoint");
    auto extras = peek_extras(ckpt);
    auto get = [&](const char* k) {
        auto it = extras.find(k);
        if (it == extras.end()) {
            throw std::runtime_error("checkpoint " + ckpt + " lacks entry '" + k + "'");
        }
        return it->second;
    };
    AdaptBundle b;
    b.variant = static_cast<Variant>(int(get("net.variant")));
    std::size_t embed = std::size_t(get("net.embed_size"));
    std::size_t hidden = std::size_t(get("net.hidden_size"));
    bool linear = get("net.linear_only") != 0.0;

    Rng init_rng = Rng(seed).child(0xAD);
    TaskEmbedConfig tec{ec.adapter_param_count(), hidden, embed, 2};
    AdaptNetConfig anc;
    anc.model_dim = ec.model_dim;
    anc.adapter_dim = ec.adapter_dim;
    anc.num_adapters = ec.num_adapters();
    anc.linear_only = linear;

    ParamStore merged;
    if (b.variant == Variant::grad2task || b.variant == Variant::adapt_all) {
        b.task_net.emplace(tec, init_rng);
        anc.embed_size = embed;
        b.adapt_net.emplace(anc, init_rng);
        for (auto& e : b.task_net->params().entries()) merged.create(e.name, e.tensor);
        for (auto& e : b.adapt_net->params().entries()) merged.create(e.name, e.tensor);
    } else if (b.variant == Variant::hypernet) {
        b.task_net.emplace(tec, init_rng);
        b.hyper_net.emplace(embed, ec.adapter_param_count(), ec.num_adapters(), init_rng);
        for (auto& e : b.task_net->params().entries()) merged.create(e.name, e.tensor);
        for (auto& e : b.hyper_net->params().entries()) merged.create(e.name, e.tensor);
    } else if (b.variant == Variant::x || b.variant == Variant::x_and_y) {
        anc.embed_size = b.variant == Variant::x ? ec.head_out_dim : 2 * ec.head_out_dim;
        b.adapt_net.emplace(anc, init_rng);
        for (auto& e : b.adapt_net->params().entries()) merged.create(e.name, e.tensor);
    } else {
        throw std::runtime_error("checkpoint " + ckpt + " stores an unexpected variant");
    }
    load_checkpoint(ckpt, merged);
    return b;
}

int cmd_eval(const std::string& out_dir, const std::string& data_dir, const std::string& base_ckpt,
             const std::string& adapt_ckpt, const std::string& variant_flag, std::size_t k,
             std::size_t runs, bool allow_overlap, std::uint64_t seed) {
    fs::create_directories(out_dir);
    std::string vocab_path = (fs::path(data_dir) / "vocab.txt").string();
    std::string registry_path = (fs::path(data_dir) / "registry.txt").string();
    require_file(vocab_path, "vocabulary");
    require_file(registry_path, "registry");

    Vocab vocab = Vocab::load(vocab_path);
    TaskRegistry registry = load_registry(registry_path, vocab);
    BaseModel model = load_base_model(base_ckpt, seed);

    VariantModel vm;
    vm.model = &model;
    vm.vocab = &vocab;
    vm.registry = &registry;

    std::optional<AdaptBundle> bundle;
    if (!adapt_ckpt.empty()) {
        bundle = load_adapt_bundle(adapt_ckpt, model.config(), seed);
        vm.variant = bundle->variant;
        vm.task_net = bundle->task_net ? &*bundle->task_net : nullptr;
        vm.adapt_net = bundle->adapt_net ? &*bundle->adapt_net : nullptr;
        vm.hyper_net = bundle->hyper_net ? &*bundle->hyper_net : nullptr;
    }
    if (!variant_flag.empty()) {
        Variant v;
        try {
            v = parse_variant(variant_flag);
        } catch (const std::invalid_argument& e) {
            throw UsageError(e.what());
        }
        if (bundle && v != bundle->variant && v != Variant::pn && v != Variant::pn_longer) {
            throw UsageError("--variant " + variant_flag + " does not match the checkpoint's '" +
                             variant_name(bundle->variant) + "'");
        }
        vm.variant = v;
    }
    if (vm.variant != Variant::pn && vm.variant != Variant::pn_longer && !bundle) {
        throw UsageError("variant '" + variant_name(vm.variant) +
                         "' needs --adapt <stage2 checkpoint>");
    }

    Rng rng = Rng(seed).child(0xE7A1);
    EvalReport report = evaluate_kshot(vm, registry, k, runs, rng, allow_overlap);

    std::string csv_name = "eval_" + variant_name(vm.variant) + "_k" + std::to_string(k) + ".csv";
    write_report_csv(report, (fs::path(out_dir) / csv_name).string());
    std::cout << format_report_table(report);

    Manifest man;
    man.verb = "eval";
    man.seed = seed;
    man.config["variant"] = variant_name(vm.variant);
    man.config["k"] = std::to_string(k);
    man.config["runs"] = std::to_string(runs);
    man.config["allow_overlap"] = allow_overlap ? "true" : "false";
    man.inputs[vocab_path] = fnv1a_file(vocab_path);
    man.inputs[registry_path] = fnv1a_file(registry_path);
    man.inputs[base_ckpt] = fnv1a_file(base_ckpt);
    if (!adapt_ckpt.empty()) man.inputs[adapt_ckpt] = fnv1a_file(adapt_ckpt);
    man.outputs.push_back(csv_name);
    man.write(out_dir);
    return 0;
}

int cmd_samediff(const std::string& out_dir, const std::string& data_dir,
                 const std::string& base_ckpt, std::vector<std::size_t> ks,
                 std::size_t train_pairs, std::size_t test_pairs, std::uint64_t seed) {
    fs::create_directories(out_dir);
    std::string vocab_path = (fs::path(data_dir) / "vocab.txt").string();
    std::string registry_path = (fs::path(data_dir) / "registry.txt").string();
    require_file(vocab_path, "vocabulary");
    require_file(registry_path, "registry");

    Vocab vocab = Vocab::load(vocab_path);
    TaskRegistry registry = load_registry(registry_path, vocab);
    BaseModel model = load_base_model(base_ckpt, seed);

    if (ks.empty()) ks = {4, 16};
    FimOptions fim;

    std::string csv_path = (fs::path(out_dir) / "samediff.csv").string();
    std::ofstream os(csv_path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + csv_path);
    os << "k,auc,train_pairs,test_pairs\n";
    for (std::size_t ki = 0; ki < ks.size(); ++ki) {
        std::size_t k = ks[ki];
        Rng rng = Rng(seed).child(0x5D00 + ki);
        Rng train_rng = rng.child(1), test_rng = rng.child(2);
        auto train = build_samediff_pairs(model, registry, Role::meta_train, k, train_pairs, fim,
                                          train_rng);
        auto test = build_samediff_pairs(model, registry, Role::meta_test, k, test_pairs, fim,
                                         test_rng);
        SameDiffConfig sd;
        sd.seed = seed + ki;
        SameDiffModel sdm = samediff_train(train, sd);
        double auc = samediff_eval(sdm, test);
        os << k << "," << auc << "," << 2 * train_pairs << "," << 2 * test_pairs << "\n";
        std::cout << "same/diff AUC at k=" << k << ": " << auc << "\n";
    }
    os.close();

    Manifest man;
    man.verb = "samediff";
    man.seed = seed;
    man.config["train_pairs"] = std::to_string(train_pairs);
    man.config["test_pairs"] = std::to_string(test_pairs);
    man.inputs[vocab_path] = fnv1a_file(vocab_path);
    man.inputs[registry_path] = fnv1a_file(registry_path);
    man.inputs[base_ckpt] = fnv1a_file(base_ckpt);
    man.outputs.push_back("samediff.csv");
    man.write(out_dir);
    return 0;
}

int cmd_ablate(const std::string& out_dir, const std::string& data_dir,
               const std::string& base_ckpt, const std::string& only_variant, TrainConfig cfg,
               std::vector<std::size_t> ks, std::size_t runs) {
    fs::create_directories(out_dir);
    std::string vocab_path = (fs::path(data_dir) / "vocab.txt").string();
    std::string registry_path = (fs::path(data_dir) / "registry.txt").string();
    require_file(vocab_path, "vocabulary");
    require_file(registry_path, "registry");

    Vocab vocab = Vocab::load(vocab_path);
    TaskRegistry registry = load_registry(registry_path, vocab);

    std::vector<Variant> variants = {Variant::grad2task, Variant::pn_longer, Variant::x,
                                     Variant::x_and_y,   Variant::adapt_all, Variant::hypernet};
    if (!only_variant.empty()) {
        try {
            variants = {parse_variant(only_variant)};
        } catch (const std::invalid_argument& e) {
            throw UsageError(e.what());
        }
    }

    AblationConfig ac;
    ac.train = cfg;
    ac.train.checkpoint_path.clear();
    ac.train.metrics_path.clear();
    ac.ks = ks.empty() ? std::vector<std::size_t>{4, 16} : ks;
    ac.runs = runs;
    ac.task_embed_hidden = cfg.task_embed_hidden;
    ac.task_embed_size = cfg.task_embed_size;
    ac.seed = cfg.seed;

    EvalReport all;
    for (Variant v : variants) {
        // Every variant starts from the same stage-1 weights.
        BaseModel model = load_base_model(base_ckpt, cfg.seed);
        EvalReport part = run_ablation(v, model, registry, vocab, ac);
        all.rows.insert(all.rows.end(), part.rows.begin(), part.rows.end());
        std::cerr << "ablate: finished " << variant_name(v) << "\n";
    }
    write_report_csv(all, (fs::path(out_dir) / "ablation.csv").string());
    std::cout << format_report_table(all);

    Manifest man;
    man.verb = "ablate";
    man.seed = cfg.seed;
    man.config = config_to_map(cfg);
    man.config["runs"] = std::to_string(runs);
    man.inputs[vocab_path] = fnv1a_file(vocab_path);
    man.inputs[registry_path] = fnv1a_file(registry_path);
    man.inputs[base_ckpt] = fnv1a_file(base_ckpt);
    man.outputs.push_back("ablation.csv");
    man.write(out_dir);
    return 0;
}

int cmd_embed_tasks(const std::string& out_dir, const std::string& data_dir,
                    const std::string& base_ckpt, const std::string& adapt_ckpt,
                    std::size_t episodes, std::size_t k, std::uint64_t seed) {
    fs::create_directories(out_dir);
    std::string vocab_path = (fs::path(data_dir) / "vocab.txt").string();
    std::string registry_path = (fs::path(data_dir) / "registry.txt").string();
    require_file(vocab_path, "vocabulary");
    require_file(registry_path, "registry");

    Vocab vocab = Vocab::load(vocab_path);
    TaskRegistry registry = load_registry(registry_path, vocab);
    BaseModel model = load_base_model(base_ckpt, seed);

    std::optional<AdaptBundle> bundle;
    std::optional<TaskEmbedNet> fresh_net;
    TaskEmbedNet* task_net = nullptr;
    if (!adapt_ckpt.empty()) {
        bundle = load_adapt_bundle(adapt_ckpt, model.config(), seed);
        if (!bundle->task_net) {
            throw UsageError("checkpoint variant '" + variant_name(bundle->variant) +
                             "' has no task-embedding net");
        }
        task_net = &*bundle->task_net;
    } else {
        Rng init_rng = Rng(seed).child(0xAD);
        TaskEmbedConfig tec{model.config().adapter_param_count(), 32, 16, 2};
        fresh_net.emplace(tec, init_rng);
        task_net = &*fresh_net;
    }

    FimOptions fim;
    Rng rng = Rng(seed).child(0xE3BD);
    auto names = registry.train_names();
    for (const auto* ds : registry.by_role(Role::meta_test)) names.push_back(ds->name);

    std::vector<EpisodeEmbeddings> batch;
    for (std::size_t i = 0; i < episodes; ++i) {
        const auto& name = names[i % names.size()];
        Rng erng = rng.child(i + 1);
        Episode ep = sample_episode(registry.dataset(name), k, k, erng);
        Rng frng = erng.child(0xF1);
        GradFeatures feats = fim_diag_features(model, ep, fim, frng);
        EpisodeEmbeddings ee;
        ee.episode_id = i;
        ee.task_name = name;
        for (auto& e : task_net->embed_layers(feats)) ee.layers.push_back(e.detach());
        batch.push_back(std::move(ee));
    }
    std::string csv = (fs::path(out_dir) / "task_embeddings.csv").string();
    export_embeddings(batch, csv);
    std::cerr << "embed-tasks: wrote " << batch.size() << " episodes to " << csv << "\n";

    Manifest man;
    man.verb = "embed-tasks";
    man.seed = seed;
    man.config["episodes"] = std::to_string(episodes);
    man.config["k"] = std::to_string(k);
    man.inputs[vocab_path] = fnv1a_file(vocab_path);
    man.inputs[registry_path] = fnv1a_file(registry_path);
    man.inputs[base_ckpt] = fnv1a_file(base_ckpt);
    if (!adapt_ckpt.empty()) man.inputs[adapt_ckpt] = fnv1a_file(adapt_ckpt);
    man.outputs.push_back("task_embeddings.csv");
    man.write(out_dir);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Gradient-conditioned few-shot text classification pipeline"};
    app.require_subcommand(1);

    std::string out_dir = "out";
    std::string data_dir;
    std::string config_path;
    std::vector<std::string> overrides;
    std::uint64_t seed = 0;
    bool deterministic = false;

    app.add_option("--out-dir", out_dir, "Output directory")->capture_default_str();
    app.add_option("--seed", seed, "Root random seed")->capture_default_str();
    app.add_flag("--deterministic", deterministic,
                 "Force fixed-order reductions (always on in this build)");

    auto* gen = app.add_subcommand("gen-data", "Generate the synthetic task suite");

    auto* pre = app.add_subcommand("pretrain", "Masked-token warmup of the transformer weights");
    std::size_t pre_steps = 300;
    double pre_lr = 1e-3;
    pre->add_option("--data", data_dir, "Data directory (from gen-data)")->required();
    pre->add_option("--steps", pre_steps, "Warmup steps")->capture_default_str();
    pre->add_option("--lr", pre_lr, "Warmup learning rate")->capture_default_str();

    auto* tb = app.add_subcommand("train-base", "Stage 1: episodic prototypical training");
    std::string init_ckpt;
    tb->add_option("--data", data_dir, "Data directory")->required();
    tb->add_option("--init", init_ckpt, "Optional pretrained checkpoint to start from");
    tb->add_option("--config", config_path, "key=value config file");
    tb->add_option("--set", overrides, "Config overrides (key=value), win over --config");

    auto* ta = app.add_subcommand("train-adapt", "Stage 2: task-conditioned adaptation training");
    std::string base_ckpt, variant_flag;
    ta->add_option("--data", data_dir, "Data directory")->required();
    ta->add_option("--base", base_ckpt, "Stage-1 checkpoint")->required();
    ta->add_option("--variant", variant_flag, "Stage-2 variant (default grad2task)");
    ta->add_option("--config", config_path, "key=value config file");
    ta->add_option("--set", overrides, "Config overrides (key=value)");

    auto* ev = app.add_subcommand("eval", "k-shot evaluation on meta-test tasks");
    std::string adapt_ckpt;
    std::size_t k = 4, runs = 10;
    bool allow_overlap = false;
    ev->add_option("--data", data_dir, "Data directory")->required();
    ev->add_option("--base", base_ckpt, "Stage-1 checkpoint")->required();
    ev->add_option("--adapt", adapt_ckpt, "Stage-2 checkpoint (for adapted variants)");
    ev->add_option("--variant", variant_flag, "Variant to evaluate");
    ev->add_option("--k", k, "Shots per class")->capture_default_str();
    ev->add_option("--runs", runs, "Support resamples per task")->capture_default_str();
    ev->add_flag("--allow-overlap", allow_overlap, "Permit evaluating meta-train tasks");

    auto* sd = app.add_subcommand("samediff", "Same-task vs different-task probe on gradient features");
    std::vector<std::size_t> sd_ks;
    std::size_t train_pairs = 40, test_pairs = 25;
    sd->add_option("--data", data_dir, "Data directory")->required();
    sd->add_option("--base", base_ckpt, "Stage-1 checkpoint")->required();
    sd->add_option("--k", sd_ks, "Shot counts (repeatable; default 4 16)");
    sd->add_option("--train-pairs", train_pairs, "Pairs per kind for training")->capture_default_str();
    sd->add_option("--test-pairs", test_pairs, "Pairs per kind for evaluation")->capture_default_str();

    auto* ab = app.add_subcommand("ablate", "Train and evaluate all variants from one stage-1 checkpoint");
    std::vector<std::size_t> ab_ks;
    std::size_t ab_runs = 10;
    ab->add_option("--data", data_dir, "Data directory")->required();
    ab->add_option("--base", base_ckpt, "Shared stage-1 checkpoint")->required();
    ab->add_option("--variant", variant_flag, "Restrict to a single variant");
    ab->add_option("--config", config_path, "key=value config file for the variant training");
    ab->add_option("--set", overrides, "Config overrides (key=value)");
    ab->add_option("--k", ab_ks, "Shot counts (repeatable; default 4 16)");
    ab->add_option("--runs", ab_runs, "Support resamples per task")->capture_default_str();

    auto* et = app.add_subcommand("embed-tasks", "Export per-layer task embeddings for episodes");
    std::size_t et_episodes = 16, et_k = 4;
    et->add_option("--data", data_dir, "Data directory")->required();
    et->add_option("--base", base_ckpt, "Stage-1 checkpoint")->required();
    et->add_option("--adapt", adapt_ckpt, "Stage-2 checkpoint providing the embedding net");
    et->add_option("--episodes", et_episodes, "Episode count")->capture_default_str();
    et->add_option("--k", et_k, "Shots per class")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        check_threads_env();
        if (gen->parsed()) return cmd_gen_data(out_dir, seed);
        if (pre->parsed()) return cmd_pretrain(out_dir, data_dir, seed, pre_steps, pre_lr);
        if (tb->parsed()) {
            return cmd_train_base(out_dir, data_dir, init_ckpt,
                                  resolve_train_config(config_path, overrides, seed));
        }
        if (ta->parsed()) {
            return cmd_train_adapt(out_dir, data_dir, base_ckpt, variant_flag,
                                   resolve_train_config(config_path, overrides, seed));
        }
        if (ev->parsed()) {
            return cmd_eval(out_dir, data_dir, base_ckpt, adapt_ckpt, variant_flag, k, runs,
                            allow_overlap, seed);
        }
        if (sd->parsed()) {
            return cmd_samediff(out_dir, data_dir, base_ckpt, sd_ks, train_pairs, test_pairs, seed);
        }
        if (ab->parsed()) {
            return cmd_ablate(out_dir, data_dir, base_ckpt, variant_flag,
                              resolve_train_config(config_path, overrides, seed), ab_ks, ab_runs);
        }
        if (et->parsed()) {
            return cmd_embed_tasks(out_dir, data_dir, base_ckpt, adapt_ckpt, et_episodes, et_k,
                                   seed);
        }
        std::cerr << "no subcommand given\n";
        return 1;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
