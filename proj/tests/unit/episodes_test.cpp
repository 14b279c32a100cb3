#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <unistd.h>
#include <vector>

#include "grad2task/episodes.hpp"
#include "grad2task/rng.hpp"
#include "grad2task/vocab.hpp"

using namespace g2t;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("g2t_ep_" + std::to_string(::getpid()));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

void write_file(const std::string& path, const std::string& content) {
    std::ofstream os(path, std::ios::trunc);
    os << content;
}

bool starts_with(const std::string& s, const std::string& prefix) {
    return s.rfind(prefix, 0) == 0;
}

// Re-derives a synthetic example's label by counting signal tokens, using
// only token spellings.
int oracle_label(const LabeledDataset& ds, const Vocab& vocab, const TextExample& ex,
                 FamilyKind kind) {
    std::map<std::string, int> counts;
    for (std::size_t i = 1; i < ex.tokens.size(); ++i) ++counts[vocab.token(ex.tokens[i])];
    switch (kind) {
        case FamilyKind::keyword_presence: {
            return counts[ds.name + "_key"] > 0 ? 1 : 0;
        }
        case FamilyKind::keyword_parity: {
            return counts[ds.name + "_key"] % 2;
        }
        case FamilyKind::dominant_topic: {
            int best = -1, best_count = -1;
            for (std::size_t c = 0; c < ds.num_classes(); ++c) {
                int n = 0;
                for (const auto& [tok, cnt] : counts) {
                    if (starts_with(tok, ds.name + "_t" + std::to_string(c) + "_")) n += cnt;
                }
                if (n > best_count) {
                    best_count = n;
                    best = static_cast<int>(c);
                }
            }
            return best;
        }
        case FamilyKind::lexicon_sentiment: {
            int pos = 0, neg = 0;
            for (const auto& [tok, cnt] : counts) {
                if (starts_with(tok, ds.name + "_pos")) pos += cnt;
                if (starts_with(tok, ds.name + "_neg")) neg += cnt;
            }
            return pos > neg ? 1 : 0;
        }
    }
    return -1;
}

} // namespace

TEST_CASE("vocabulary round trips through its file format") {
    TempDir tmp;
    Vocab v;
    v.add("alpha");
    v.add("beta");
    v.add("alpha"); // idempotent
    v.save(tmp.file("vocab.txt"));
    Vocab loaded = Vocab::load(tmp.file("vocab.txt"));
    CHECK(loaded.size() == v.size());
    CHECK(loaded.id("alpha") == v.id("alpha"));
    CHECK(loaded.id("beta") == v.id("beta"));
    CHECK(loaded.id("missing") == Vocab::kUnk);
    CHECK(loaded.token(Vocab::kCls) == "[CLS]");
    auto ids = loaded.encode_text("alpha beta alpha");
    CHECK(ids.size() == 4);
    CHECK(ids[0] == Vocab::kCls);
    CHECK(ids[1] == loaded.id("alpha"));
}

TEST_CASE("jsonl labels get dense ids in first-occurrence order") {
    TempDir tmp;
    Vocab v;
    v.add("hello");
    v.add("bye");
    write_file(tmp.file("a.jsonl"),
               "{\"text\": \"hello\", \"label\": \"pos\"}\n"
               "{\"text\": \"bye\", \"label\": \"neg\"}\n"
               "{\"text\": \"hello hello\", \"label\": \"pos\"}\n");
    LabeledDataset ds = load_jsonl(tmp.file("a.jsonl"), v, "tiny");
    REQUIRE(ds.class_names.size() == 2);
    CHECK(ds.class_names[0] == "pos");
    CHECK(ds.class_names[1] == "neg");
    REQUIRE(ds.train.size() == 3);
    CHECK(ds.train[0].label == 0);
    CHECK(ds.train[1].label == 1);
    CHECK(ds.train[2].label == 0);
    CHECK(ds.train[0].tokens[0] == Vocab::kCls);
}

TEST_CASE("jsonl errors carry the line number") {
    TempDir tmp;
    Vocab v;
    write_file(tmp.file("bad.jsonl"),
               "{\"text\": \"x\", \"label\": \"a\"}\n"
               "not json at all\n");
    CHECK_THROWS_WITH_AS(load_jsonl(tmp.file("bad.jsonl"), v), doctest::Contains(":2"),
                         std::runtime_error);
    write_file(tmp.file("nofield.jsonl"), "{\"text\": \"x\"}\n");
    CHECK_THROWS_WITH_AS(load_jsonl(tmp.file("nofield.jsonl"), v), doctest::Contains(":1"),
                         std::runtime_error);
    CHECK_THROWS_AS(load_jsonl(tmp.file("absent.jsonl"), v), std::runtime_error);
}

TEST_CASE("val and test files may not introduce new labels") {
    TempDir tmp;
    Vocab v;
    write_file(tmp.file("tr.jsonl"), "{\"text\": \"x\", \"label\": \"a\"}\n");
    write_file(tmp.file("va.jsonl"), "{\"text\": \"x\", \"label\": \"b\"}\n");
    CHECK_THROWS_WITH_AS(
        load_dataset("d", tmp.file("tr.jsonl"), tmp.file("va.jsonl"), tmp.file("va.jsonl"), v),
        doctest::Contains("unknown label"), std::runtime_error);
}

TEST_CASE("synthetic labels are recoverable by counting signal tokens") {
    Rng rng(31);
    Vocab vocab;
    SyntheticSpec spec = SyntheticSpec::default_suite();
    auto suite = make_synthetic_suite(rng, spec, vocab);
    REQUIRE(suite.size() == spec.families.size());
    for (std::size_t fi = 0; fi < suite.size(); ++fi) {
        const auto& ds = suite[fi];
        FamilyKind kind = spec.families[fi].kind;
        CHECK(ds.name == spec.families[fi].name);
        for (const auto* pool : {&ds.train, &ds.val, &ds.test}) {
            for (const auto& ex : *pool) {
                CHECK(ex.tokens.size() == spec.seq_len);
                CHECK(ex.tokens[0] == Vocab::kCls);
                CHECK(oracle_label(ds, vocab, ex, kind) == ex.label);
            }
        }
    }
}

TEST_CASE("families draw from disjoint content vocabularies") {
    Rng rng(32);
    Vocab vocab;
    auto suite = make_synthetic_suite(rng, SyntheticSpec::default_suite(), vocab);
    std::map<int, std::string> owner;
    for (const auto& ds : suite) {
        std::set<int> used;
        for (const auto* pool : {&ds.train, &ds.val, &ds.test}) {
            for (const auto& ex : *pool) {
                for (std::size_t i = 1; i < ex.tokens.size(); ++i) used.insert(ex.tokens[i]);
            }
        }
        for (int id : used) {
            CHECK(owner.find(id) == owner.end());
            owner[id] = ds.name;
        }
    }
}

TEST_CASE("episodes are class-balanced with disjoint support and query") {
    // Unique filler-free sequences so token-level disjointness is testable.
    LabeledDataset ds;
    ds.name = "unique";
    ds.class_names = {"a", "b", "c"};
    int next_tok = 10;
    for (int c = 0; c < 3; ++c) {
        for (int i = 0; i < 20; ++i) {
            ds.train.push_back({{Vocab::kCls, next_tok++}, c});
        }
    }
    Rng rng(33);
    for (int trial = 0; trial < 20; ++trial) {
        Episode ep = sample_episode(ds, 4, 3, rng);
        CHECK(ep.num_classes == 3);
        CHECK(ep.support.size() == 12);
        CHECK(ep.query.size() == 9);
        std::map<int, int> sup_count, qry_count;
        std::set<int> sup_tokens;
        for (const auto& [toks, y] : ep.support) {
            ++sup_count[y];
            sup_tokens.insert(toks[1]);
        }
        for (const auto& [toks, y] : ep.query) {
            ++qry_count[y];
            CHECK(sup_tokens.count(toks[1]) == 0);
        }
        for (int c = 0; c < 3; ++c) {
            CHECK(sup_count[c] == 4);
            CHECK(qry_count[c] == 3);
        }
    }
    CHECK_THROWS_AS(sample_episode(ds, 15, 15, rng), std::runtime_error);
    CHECK_THROWS_AS(sample_episode(ds, 0, 3, rng), std::invalid_argument);
}

TEST_CASE("train weights follow sqrt of pool size") {
    auto tiny = [](const std::string& name, std::size_t n) {
        LabeledDataset ds;
        ds.name = name;
        ds.class_names = {"x", "y"};
        for (std::size_t i = 0; i < n; ++i) ds.train.push_back({{Vocab::kCls, 5}, int(i % 2)});
        return ds;
    };
    TaskRegistry reg;
    reg.add(tiny("p", 16), Role::meta_train);
    reg.add(tiny("q", 64), Role::meta_train);
    reg.add(tiny("r", 100), Role::meta_test);
    auto w = reg.train_weights();
    REQUIRE(w.size() == 2);
    CHECK(w[0] == doctest::Approx(4.0 / 12.0).epsilon(1e-12));
    CHECK(w[1] == doctest::Approx(8.0 / 12.0).epsilon(1e-12));
    CHECK(reg.train_names() == std::vector<std::string>{"p", "q"});
}

TEST_CASE("support subsampling yields disjoint prototype and probe sets") {
    LabeledDataset ds;
    ds.name = "u2";
    ds.class_names = {"a", "b"};
    int next_tok = 10;
    for (int c = 0; c < 2; ++c) {
        for (int i = 0; i < 16; ++i) ds.train.push_back({{Vocab::kCls, next_tok++}, c});
    }
    Rng rng(34);
    Episode ep = sample_episode(ds, 6, 2, rng);
    auto [protos, probe] = subsample_support(ep, 2, 4, rng);
    CHECK(protos.size() == 4);
    CHECK(probe.size() == 4);
    std::map<int, int> proto_count;
    std::set<int> proto_tokens;
    for (const auto& [toks, y] : protos) {
        ++proto_count[y];
        proto_tokens.insert(toks[1]);
    }
    CHECK(proto_count[0] == 2);
    CHECK(proto_count[1] == 2);
    for (const auto& [toks, y] : probe) CHECK(proto_tokens.count(toks[1]) == 0);
    CHECK_THROWS_AS(subsample_support(ep, 6, 4, rng), std::invalid_argument);
}

TEST_CASE("registry manifests round trip and resolve relative paths") {
    TempDir tmp;
    Vocab v;
    v.add("tok");
    write_file(tmp.file("t.jsonl"),
               "{\"text\": \"tok\", \"label\": \"a\"}\n{\"text\": \"tok\", \"label\": \"b\"}\n");
    std::vector<RegistryManifestEntry> entries = {
        {Role::meta_train, "task1", "t.jsonl", "t.jsonl", "t.jsonl"},
        {Role::meta_test, "task2", "t.jsonl", "t.jsonl", "t.jsonl"},
    };
    save_registry_manifest(tmp.file("registry.txt"), entries);
    auto back = load_registry_manifest(tmp.file("registry.txt"));
    REQUIRE(back.size() == 2);
    CHECK(back[0].role == Role::meta_train);
    CHECK(back[1].role == Role::meta_test);
    CHECK(back[1].name == "task2");

    TaskRegistry reg = load_registry(tmp.file("registry.txt"), v);
    CHECK(reg.size() == 2);
    CHECK(reg.role("task2") == Role::meta_test);
    CHECK(reg.dataset("task1").train.size() == 2);
}
