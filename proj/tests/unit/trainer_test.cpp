#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "grad2task/adaptation.hpp"
#include "grad2task/encoder.hpp"
#include "grad2task/episodes.hpp"
#include "grad2task/rng.hpp"
#include "grad2task/task_embedding.hpp"
#include "grad2task/trainer.hpp"

using namespace g2t;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("g2t_tr_" + std::to_string(::getpid()));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

struct Fixture {
    Vocab vocab;
    TaskRegistry registry;
    EncoderConfig enc;

    Fixture() {
        SyntheticSpec spec;
        spec.families = {
            {FamilyKind::keyword_presence, "kwa", 2},
            {FamilyKind::keyword_parity, "kwp", 2},
            {FamilyKind::keyword_presence, "kwb", 2},
        };
        spec.seq_len = 8;
        spec.train_per_class = 64;
        spec.val_per_class = 8;
        spec.min_test_examples = 16;
        Rng rng(101);
        auto suite = make_synthetic_suite(rng, spec, vocab);
        registry.add(suite[0], Role::meta_train);
        registry.add(suite[1], Role::meta_train);
        registry.add(suite[2], Role::meta_test);

        enc.vocab_size = vocab.size();
        enc.max_seq_len = 8;
        enc.model_dim = 6;
        enc.num_layers = 1;
        enc.num_heads = 1;
        enc.ffn_dim = 8;
        enc.adapter_dim = 2;
        enc.head_out_dim = 4;
        enc.dropout_rate = 0.1;
    }

    TrainConfig fast_config() const {
        TrainConfig cfg;
        cfg.episodes_per_step = 1;
        cfg.shots = 2;
        cfg.query_shots = 2;
        cfg.steps_per_epoch = 2;
        cfg.max_epochs = 3;
        cfg.patience = 100;
        cfg.val_episodes = 2;
        cfg.restore_best = false;
        cfg.seed = 7;
        return cfg;
    }
};

std::vector<std::pair<std::string, std::vector<double>>> snapshot(const ParamStore& store) {
    std::vector<std::pair<std::string, std::vector<double>>> out;
    for (const auto& e : store.entries()) {
        out.emplace_back(e.name,
                         std::vector<double>(e.tensor.values().begin(), e.tensor.values().end()));
    }
    return out;
}

bool tensors_equal(const ParamStore& a, const ParamStore& b) {
    if (a.size() != b.size()) return false;
    for (const auto& e : a.entries()) {
        const Tensor& other = b.get(e.name);
        for (std::size_t i = 0; i < e.tensor.size(); ++i) {
            if (e.tensor.value_at(i) != other.value_at(i)) return false;
        }
    }
    return true;
}

} // namespace

TEST_CASE("config files parse key=value lines with comments") {
    TempDir tmp;
    {
        std::ofstream os(tmp.file("a.cfg"));
        os << "# comment line\n\n  lr = 0.01  \nshots=8\nrestore_best = false\n";
    }
    auto kv = parse_config_file(tmp.file("a.cfg"));
    TrainConfig cfg;
    apply_config(cfg, kv);
    CHECK(cfg.lr == 0.01);
    CHECK(cfg.shots == 8);
    CHECK_FALSE(cfg.restore_best);

    CHECK_THROWS_WITH_AS(apply_config(cfg, {{"no_such_key", "1"}}),
                         doctest::Contains("unknown key"), std::invalid_argument);
    CHECK_THROWS_AS(apply_config(cfg, {{"lr", "fast"}}), std::invalid_argument);
    CHECK_THROWS_AS(apply_config(cfg, {{"restore_best", "maybe"}}), std::invalid_argument);
    {
        std::ofstream os(tmp.file("bad.cfg"));
        os << "just words\n";
    }
    CHECK_THROWS_AS(parse_config_file(tmp.file("bad.cfg")), std::runtime_error);
    CHECK_THROWS_AS(parse_config_file(tmp.file("missing.cfg")), std::runtime_error);
}

TEST_CASE("invalid training configurations are rejected") {
    TrainConfig cfg;
    cfg.stage = 3;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = TrainConfig{};
    cfg.lr = -1.0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = TrainConfig{};
    cfg.shots = 0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("metrics log writes a header and comma-separated rows") {
    TempDir tmp;
    {
        MetricsLog log(tmp.file("m.csv"));
        log.record(3, 1, "train", "kwa", 0.5, 0.75);
        log.record(4, 1, "val", "kwp", 0.25, 1.0);
    }
    std::ifstream is(tmp.file("m.csv"));
    std::string line;
    REQUIRE(std::getline(is, line));
    CHECK(line == "step,epoch,split,task,loss,accuracy");
    REQUIRE(std::getline(is, line));
    CHECK(line == "3,1,train,kwa,0.5,0.75");
    REQUIRE(std::getline(is, line));
    CHECK(line == "4,1,val,kwp,0.25,1");
    CHECK_FALSE(std::getline(is, line));
}

TEST_CASE("derived steps per epoch cover the meta-train pool") {
    Fixture fx;
    TrainConfig cfg;
    cfg.shots = 4;
    cfg.query_shots = 4;
    cfg.episodes_per_step = 2;
    // Two tasks of 128 train examples, episodes of 2*(4+4)=16 examples:
    // 256/16 = 16 episodes, /2 accumulation = 8 steps.
    CHECK(derive_steps_per_epoch(fx.registry, cfg) == 8);
}

TEST_CASE("zero learning rate leaves every parameter untouched") {
    Fixture fx;
    Rng mrng(102);
    BaseModel model(fx.enc, mrng);
    auto before = snapshot(model.params());
    TrainConfig cfg = fx.fast_config();
    cfg.lr = 0.0;
    cfg.max_steps = 2;
    train_stage1(model, fx.registry, cfg);
    for (const auto& [name, vals] : before) {
        const Tensor& now = model.params().get(name);
        for (std::size_t i = 0; i < vals.size(); ++i) CHECK(now.value_at(i) == vals[i]);
    }
}

TEST_CASE("stage 1 trains adapters, norms and head but not the trunk") {
    Fixture fx;
    Rng mrng(103);
    BaseModel model(fx.enc, mrng);
    auto before = snapshot(model.params());
    TrainConfig cfg = fx.fast_config();
    cfg.max_steps = 4;
    TrainResult res = train_stage1(model, fx.registry, cfg);
    CHECK(res.steps == 4);
    bool any_nontheta_changed = false;
    for (const auto& [name, vals] : before) {
        const Tensor& now = model.params().get(name);
        bool changed = false;
        for (std::size_t i = 0; i < vals.size(); ++i) changed |= now.value_at(i) != vals[i];
        if (BaseModel::is_theta(name)) {
            CHECK_FALSE(changed);
        } else {
            any_nontheta_changed |= changed;
        }
    }
    CHECK(any_nontheta_changed);
}

TEST_CASE("stage 2 trains only the task-embedding and adaptation nets") {
    Fixture fx;
    Rng mrng(104);
    BaseModel model(fx.enc, mrng);
    Rng nrng(105);
    TaskEmbedConfig tcfg;
    tcfg.input_size = fx.enc.adapter_param_count();
    tcfg.hidden_size = 4;
    tcfg.embed_size = 3;
    TaskEmbedNet task_net(tcfg, nrng);
    AdaptNetConfig acfg;
    acfg.embed_size = 3;
    acfg.model_dim = fx.enc.model_dim;
    acfg.adapter_dim = fx.enc.adapter_dim;
    acfg.num_adapters = fx.enc.num_adapters();
    AdaptNet adapt_net(acfg, nrng);

    auto model_before = snapshot(model.params());
    auto phi_before = snapshot(task_net.params());
    auto psi_before = snapshot(adapt_net.params());

    TrainConfig cfg = fx.fast_config();
    cfg.stage = 2;
    cfg.max_steps = 2;
    TrainResult res = train_stage2(model, task_net, adapt_net, fx.registry, cfg);
    CHECK(res.steps == 2);

    for (const auto& [name, vals] : model_before) {
        const Tensor& now = model.params().get(name);
        for (std::size_t i = 0; i < vals.size(); ++i) CHECK(now.value_at(i) == vals[i]);
        CHECK(now.requires_grad()); // tracking flags restored afterwards
    }
    auto count_changed = [](const ParamStore& store,
                            const std::vector<std::pair<std::string, std::vector<double>>>& before) {
        std::size_t n = 0;
        for (const auto& [name, vals] : before) {
            const Tensor& now = store.get(name);
            for (std::size_t i = 0; i < vals.size(); ++i) {
                if (now.value_at(i) != vals[i]) {
                    ++n;
                    break;
                }
            }
        }
        return n;
    };
    CHECK(count_changed(task_net.params(), phi_before) > 0);
    CHECK(count_changed(adapt_net.params(), psi_before) > 0);
}

TEST_CASE("an interrupted run resumed from its checkpoint matches an uninterrupted one") {
    Fixture fx;
    TempDir tmp;

    Rng r1(106);
    BaseModel straight(fx.enc, r1);
    TrainConfig cfg = fx.fast_config();
    cfg.max_steps = 6;
    cfg.checkpoint_path = tmp.file("straight.ckpt");
    TrainResult res_a = train_stage1(straight, fx.registry, cfg);
    CHECK(res_a.steps == 6);

    Rng r2(106);
    BaseModel resumed(fx.enc, r2);
    TrainConfig half = cfg;
    half.max_steps = 3;
    half.checkpoint_path = tmp.file("resumed.ckpt");
    train_stage1(resumed, fx.registry, half);
    TrainConfig second = cfg;
    second.checkpoint_path = tmp.file("resumed.ckpt");
    second.start_step = 3;
    TrainResult res_b = train_stage1(resumed, fx.registry, second);
    CHECK(res_b.steps == 6);

    CHECK(tensors_equal(straight.params(), resumed.params()));

    TrainConfig broken = cfg;
    broken.start_step = 3;
    broken.checkpoint_path = tmp.file("nowhere.ckpt");
    BaseModel other(fx.enc, r2);
    CHECK_THROWS_AS(train_stage1(other, fx.registry, broken), std::runtime_error);
}

TEST_CASE("training metrics land in the requested CSV") {
    Fixture fx;
    TempDir tmp;
    Rng mrng(107);
    BaseModel model(fx.enc, mrng);
    TrainConfig cfg = fx.fast_config();
    cfg.max_steps = 2;
    cfg.metrics_path = tmp.file("metrics.csv");
    train_stage1(model, fx.registry, cfg);

    std::ifstream is(tmp.file("metrics.csv"));
    std::string line;
    REQUIRE(std::getline(is, line));
    CHECK(line == "step,epoch,split,task,loss,accuracy");
    std::size_t train_rows = 0, val_rows = 0;
    while (std::getline(is, line)) {
        if (line.find(",train,") != std::string::npos) ++train_rows;
        if (line.find(",val,") != std::string::npos) ++val_rows;
    }
    CHECK(train_rows == 2);
    CHECK(val_rows == 2);
}
