#include "grad2task/episodes.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include <json.hpp>

namespace g2t {

using nlohmann::json;

// ---- LabeledDataset -----------------------------------------------------------

void LabeledDataset::validate() const {
    std::set<std::string> names(class_names.begin(), class_names.end());
    if (names.size() != class_names.size()) {
        throw std::runtime_error("dataset '" + name + "': duplicate class names");
    }
    auto check_pool = [&](const std::vector<TextExample>& pool, const char* which) {
        for (const auto& ex : pool) {
            if (ex.label < 0 || static_cast<std::size_t>(ex.label) >= class_names.size()) {
                throw std::runtime_error("dataset '" + name + "': class id " +
                                         std::to_string(ex.label) + " out of range in " + which);
            }
        }
    };
    check_pool(train, "train");
    check_pool(val, "val");
    check_pool(test, "test");
}

// ---- TaskRegistry ---------------------------------------------------------------

void TaskRegistry::add(LabeledDataset ds, Role role) {
    ds.validate();
    if (has(ds.name)) throw std::invalid_argument("TaskRegistry: duplicate task '" + ds.name + "'");
    datasets_.push_back({std::move(ds), role});
}

bool TaskRegistry::has(const std::string& name) const {
    for (const auto& it : datasets_)
        if (it.ds.name == name) return true;
    return false;
}

const LabeledDataset& TaskRegistry::dataset(const std::string& name) const {
    for (const auto& it : datasets_)
        if (it.ds.name == name) return it.ds;
    throw std::out_of_range("TaskRegistry: no task '" + name + "'");
}

Role TaskRegistry::role(const std::string& name) const {
    for (const auto& it : datasets_)
        if (it.ds.name == name) return it.role;
    throw std::out_of_range("TaskRegistry: no task '" + name + "'");
}

std::vector<const LabeledDataset*> TaskRegistry::by_role(Role role) const {
    std::vector<const LabeledDataset*> out;
    for (const auto& it : datasets_)
        if (it.role == role) out.push_back(&it.ds);
    return out;
}

std::vector<double> TaskRegistry::train_weights() const {
    std::vector<double> w;
    double total = 0.0;
    for (const auto& it : datasets_) {
        if (it.role != Role::meta_train) continue;
        double s = std::sqrt(static_cast<double>(it.ds.train.size()));
        w.push_back(s);
        total += s;
    }
    if (w.empty()) throw std::runtime_error("TaskRegistry: no meta-train tasks");
    for (auto& x : w) x /= total;
    return w;
}

std::vector<std::string> TaskRegistry::train_names() const {
    std::vector<std::string> names;
    for (const auto& it : datasets_)
        if (it.role == Role::meta_train) names.push_back(it.ds.name);
    return names;
}

const std::string& TaskRegistry::sample_task(Rng& rng) const {
    auto w = train_weights();
    std::size_t pick = rng.categorical(w);
    std::size_t i = 0;
    for (const auto& it : datasets_) {
        if (it.role != Role::meta_train) continue;
        if (i == pick) return it.ds.name;
        ++i;
    }
    throw std::logic_error("TaskRegistry::sample_task: unreachable");
}

// ---- JSONL ingestion --------------------------------------------------------------

namespace {

std::vector<TextExample> parse_jsonl(const std::string& path, const Vocab& vocab,
                                     std::vector<std::string>& class_names,
                                     std::unordered_map<std::string, int>& label_ids,
                                     bool allow_new_labels) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("load_jsonl: cannot open " + path);
    std::vector<TextExample> pool;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        json obj;
        try {
            obj = json::parse(line);
        } catch (const json::exception& e) {
            throw std::runtime_error("load_jsonl: " + path + ":" + std::to_string(lineno) +
                                     ": malformed JSON: " + e.what());
        }
        if (!obj.is_object() || !obj.contains("text") || !obj["text"].is_string() ||
            !obj.contains("label") || !obj["label"].is_string()) {
            throw std::runtime_error("load_jsonl: " + path + ":" + std::to_string(lineno) +
                                     ": expected object with string fields 'text' and 'label'");
        }
        std::string label = obj["label"].get<std::string>();
        auto it = label_ids.find(label);
        int id;
        if (it != label_ids.end()) {
            id = it->second;
        } else if (allow_new_labels) {
            id = static_cast<int>(class_names.size());
            class_names.push_back(label);
            label_ids[label] = id;
        } else {
            throw std::runtime_error("load_jsonl: " + path + ":" + std::to_string(lineno) +
                                     ": unknown label '" + label + "' (not seen in train file)");
        }
        pool.push_back({vocab.encode_text(obj["text"].get<std::string>()), id});
    }
    if (lineno == 0) throw std::runtime_error("load_jsonl: empty file " + path);
    return pool;
}

} // namespace

LabeledDataset load_jsonl(const std::string& path, const Vocab& vocab, const std::string& name) {
    LabeledDataset ds;
    ds.name = name.empty() ? path : name;
    std::unordered_map<std::string, int> label_ids;
    ds.train = parse_jsonl(path, vocab, ds.class_names, label_ids, true);
    ds.validate();
    return ds;
}

LabeledDataset load_dataset(const std::string& name, const std::string& train_path,
                            const std::string& val_path, const std::string& test_path,
                            const Vocab& vocab) {
    LabeledDataset ds;
    ds.name = name;
    std::unordered_map<std::string, int> label_ids;
    ds.train = parse_jsonl(train_path, vocab, ds.class_names, label_ids, true);
    ds.val = parse_jsonl(val_path, vocab, ds.class_names, label_ids, false);
    ds.test = parse_jsonl(test_path, vocab, ds.class_names, label_ids, false);
    ds.validate();
    return ds;
}

void save_jsonl(const std::vector<TextExample>& pool, const std::vector<std::string>& class_names,
                const Vocab& vocab, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("save_jsonl: cannot write " + path);
    for (const auto& ex : pool) {
        std::string text;
        for (std::size_t i = 0; i < ex.tokens.size(); ++i) {
            if (ex.tokens[i] == Vocab::kCls && i == 0) continue;
            if (!text.empty()) text += ' ';
            text += vocab.token(ex.tokens[i]);
        }
        json obj{{"text", text}, {"label", class_names.at(static_cast<std::size_t>(ex.label))}};
        os << obj.dump() << "\n";
    }
}

void save_registry_manifest(const std::string& path,
                            const std::vector<RegistryManifestEntry>& entries) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write manifest " + path);
    for (const auto& e : entries) {
        os << (e.role == Role::meta_train ? "meta-train" : "meta-test") << ' ' << e.name << ' '
           << e.train_path << ' ' << e.val_path << ' ' << e.test_path << "\n";
    }
}

std::vector<RegistryManifestEntry> load_registry_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open manifest " + path);
    std::vector<RegistryManifestEntry> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string role_str;
        RegistryManifestEntry e;
        if (!(ls >> role_str >> e.name >> e.train_path >> e.val_path >> e.test_path)) {
            throw std::runtime_error("manifest " + path + ":" + std::to_string(lineno) +
                                     ": expected '<role> <name> <train> <val> <test>'");
        }
        if (role_str == "meta-train") {
            e.role = Role::meta_train;
        } else if (role_str == "meta-test") {
            e.role = Role::meta_test;
        } else {
            throw std::runtime_error("manifest " + path + ":" + std::to_string(lineno) +
                                     ": unknown role '" + role_str + "'");
        }
        out.push_back(std::move(e));
    }
    return out;
}

TaskRegistry load_registry(const std::string& manifest_path, const Vocab& vocab) {
    // Relative dataset paths resolve against the manifest's own directory.
    std::filesystem::path base = std::filesystem::path(manifest_path).parent_path();
    auto resolve = [&base](const std::string& p) {
        std::filesystem::path fp(p);
        return fp.is_absolute() ? fp.string() : (base / fp).string();
    };
    TaskRegistry reg;
    for (const auto& e : load_registry_manifest(manifest_path)) {
        reg.add(load_dataset(e.name, resolve(e.train_path), resolve(e.val_path),
                             resolve(e.test_path), vocab),
                e.role);
    }
    return reg;
}

// ---- synthetic suite ----------------------------------------------------------------

SyntheticSpec SyntheticSpec::default_suite() {
    SyntheticSpec spec;
    spec.families = {
        {FamilyKind::keyword_presence, "kwpresence_a", 2},
        {FamilyKind::keyword_parity, "kwparity", 2},
        {FamilyKind::dominant_topic, "topic3", 3},
        {FamilyKind::lexicon_sentiment, "sentiment", 2},
        {FamilyKind::keyword_presence, "kwpresence_b", 2},
        {FamilyKind::dominant_topic, "topic5", 5},
    };
    return spec;
}

namespace {

struct FamilyTokens {
    std::vector<int> fillers;
    std::vector<int> triggers;              // presence/parity
    std::vector<std::vector<int>> topics;   // dominant_topic
    std::vector<int> pos, neg;              // sentiment
};

FamilyTokens build_family_tokens(const FamilySpec& fam, const SyntheticSpec& spec, Vocab& vocab) {
    FamilyTokens ft;
    std::size_t needed = spec.filler_tokens_per_family;
    switch (fam.kind) {
        case FamilyKind::keyword_presence:
        case FamilyKind::keyword_parity: needed += 1; break;
        case FamilyKind::dominant_topic: needed += fam.num_classes * 4; break;
        case FamilyKind::lexicon_sentiment: needed += 10; break;
    }
    if (spec.max_vocab_size && vocab.size() + needed > spec.max_vocab_size) {
        throw std::runtime_error("make_synthetic_suite: vocab too small for family '" + fam.name +
                                 "' (need " + std::to_string(vocab.size() + needed) +
                                 " tokens, cap " + std::to_string(spec.max_vocab_size) + ")");
    }
    for (std::size_t i = 0; i < spec.filler_tokens_per_family; ++i) {
        ft.fillers.push_back(vocab.add(fam.name + "_w" + std::to_string(i)));
    }
    switch (fam.kind) {
        case FamilyKind::keyword_presence:
        case FamilyKind::keyword_parity:
            ft.triggers.push_back(vocab.add(fam.name + "_key"));
            break;
        case FamilyKind::dominant_topic:
            for (std::size_t c = 0; c < fam.num_classes; ++c) {
                std::vector<int> topic;
                for (std::size_t i = 0; i < 4; ++i) {
                    topic.push_back(vocab.add(fam.name + "_t" + std::to_string(c) + "_" +
                                              std::to_string(i)));
                }
                ft.topics.push_back(std::move(topic));
            }
            break;
        case FamilyKind::lexicon_sentiment:
            for (std::size_t i = 0; i < 5; ++i)
                ft.pos.push_back(vocab.add(fam.name + "_pos" + std::to_string(i)));
            for (std::size_t i = 0; i < 5; ++i)
                ft.neg.push_back(vocab.add(fam.name + "_neg" + std::to_string(i)));
            break;
    }
    return ft;
}

int pick_of(const std::vector<int>& v, Rng& rng) { return v[rng.uniform_int(v.size())]; }

TextExample gen_example(const FamilySpec& fam, const FamilyTokens& ft, std::size_t body_len,
                        int forced_label, Rng& rng) {
    std::vector<int> body;
    int label = forced_label;
    switch (fam.kind) {
        case FamilyKind::keyword_presence: {
            std::size_t n_trig = (label == 1) ? 1 + rng.uniform_int(3) : 0;
            for (std::size_t i = 0; i < n_trig; ++i) body.push_back(ft.triggers[0]);
            break;
        }
        case FamilyKind::keyword_parity: {
            // even -> 2 or 4 occurrences, odd -> 1 or 3
            std::size_t n = (label == 0) ? 2 + 2 * rng.uniform_int(2) : 1 + 2 * rng.uniform_int(2);
            for (std::size_t i = 0; i < n; ++i) body.push_back(ft.triggers[0]);
            break;
        }
        case FamilyKind::dominant_topic: {
            std::size_t dominant = static_cast<std::size_t>(label);
            std::size_t nd = 2 + rng.uniform_int(2); // 2..3 dominant tokens
            for (std::size_t i = 0; i < nd; ++i) body.push_back(pick_of(ft.topics[dominant], rng));
            for (std::size_t c = 0; c < ft.topics.size(); ++c) {
                if (c == dominant) continue;
                std::size_t nc = rng.uniform_int(nd); // strictly fewer than dominant
                for (std::size_t i = 0; i < nc; ++i) body.push_back(pick_of(ft.topics[c], rng));
            }
            break;
        }
        case FamilyKind::lexicon_sentiment: {
            // label 1: more positive words; label 0: more negative words
            std::size_t hi = 1 + rng.uniform_int(3);       // 1..3
            std::size_t lo = rng.uniform_int(hi);          // strictly fewer
            std::size_t np = (label == 1) ? hi : lo;
            std::size_t nn = (label == 1) ? lo : hi;
            for (std::size_t i = 0; i < np; ++i) body.push_back(pick_of(ft.pos, rng));
            for (std::size_t i = 0; i < nn; ++i) body.push_back(pick_of(ft.neg, rng));
            break;
        }
    }
    if (body.size() > body_len) {
        throw std::runtime_error("make_synthetic_suite: sequence length " +
                                 std::to_string(body_len + 1) + " too small for family '" +
                                 fam.name + "'");
    }
    while (body.size() < body_len) body.push_back(pick_of(ft.fillers, rng));
    rng.shuffle(body);
    TextExample ex;
    ex.tokens.push_back(Vocab::kCls);
    ex.tokens.insert(ex.tokens.end(), body.begin(), body.end());
    ex.label = label;
    return ex;
}

std::vector<std::string> family_class_names(const FamilySpec& fam) {
    switch (fam.kind) {
        case FamilyKind::keyword_presence: return {"absent", "present"};
        case FamilyKind::keyword_parity: return {"even", "odd"};
        case FamilyKind::lexicon_sentiment: return {"negative", "positive"};
        case FamilyKind::dominant_topic: {
            std::vector<std::string> names;
            for (std::size_t c = 0; c < fam.num_classes; ++c)
                names.push_back("topic" + std::to_string(c));
            return names;
        }
    }
    throw std::logic_error("unknown family kind");
}

} // namespace

std::vector<LabeledDataset> make_synthetic_suite(Rng& rng, const SyntheticSpec& spec,
                                                 Vocab& vocab) {
    if (spec.families.empty()) throw std::invalid_argument("make_synthetic_suite: no families");
    if (spec.seq_len < 8) throw std::invalid_argument("make_synthetic_suite: seq_len too small");
    std::vector<LabeledDataset> out;
    std::size_t body_len = spec.seq_len - 1;
    for (std::size_t fi = 0; fi < spec.families.size(); ++fi) {
        const FamilySpec& fam = spec.families[fi];
        if (fam.kind == FamilyKind::dominant_topic &&
            fam.num_classes != 3 && fam.num_classes != 5 && fam.num_classes != 7) {
            throw std::invalid_argument("make_synthetic_suite: dominant_topic supports 3/5/7 classes");
        }
        FamilyTokens ft = build_family_tokens(fam, spec, vocab);
        LabeledDataset ds;
        ds.name = fam.name;
        ds.class_names = family_class_names(fam);
        // Class names become vocabulary tokens so label text can be encoded;
        // they never appear inside generated sequences.
        for (const auto& cn : ds.class_names) vocab.add(cn);
        std::size_t C = ds.class_names.size();
        Rng fam_rng = rng.child(fi);
        std::size_t test_per_class = (spec.min_test_examples + C - 1) / C;
        auto fill = [&](std::vector<TextExample>& pool, std::size_t per_class) {
            for (std::size_t c = 0; c < C; ++c) {
                for (std::size_t i = 0; i < per_class; ++i) {
                    TextExample ex = gen_example(fam, ft, body_len, static_cast<int>(c), fam_rng);
                    if (spec.label_noise > 0.0 && fam_rng.uniform() < spec.label_noise) {
                        ex.label = static_cast<int>(fam_rng.uniform_int(C));
                    }
                    pool.push_back(std::move(ex));
                }
            }
            fam_rng.shuffle(pool);
        };
        std::size_t train_per_class = std::max<std::size_t>(spec.train_per_class, 64);
        fill(ds.train, train_per_class);
        fill(ds.val, spec.val_per_class);
        fill(ds.test, test_per_class);
        ds.validate();
        out.push_back(std::move(ds));
    }
    return out;
}

// ---- episodic sampling -----------------------------------------------------------------

Episode sample_episode(const LabeledDataset& ds, std::size_t k, std::size_t query_k, Rng& rng) {
    return sample_episode_from(ds, ds.train, k, query_k, rng);
}

Episode sample_episode_from(const LabeledDataset& ds, const std::vector<TextExample>& pool,
                            std::size_t k, std::size_t query_k, Rng& rng) {
    if (k == 0) throw std::invalid_argument("sample_episode: k must be >= 1");
    if (query_k == 0) query_k = k;
    std::size_t C = ds.num_classes();
    if (C < 2) throw std::invalid_argument("sample_episode: dataset '" + ds.name +
                                           "' has fewer than 2 classes");
    std::vector<std::vector<std::size_t>> by_class(C);
    for (std::size_t i = 0; i < pool.size(); ++i) {
        by_class[static_cast<std::size_t>(pool[i].label)].push_back(i);
    }
    Episode ep;
    ep.task = ds.name;
    ep.num_classes = C;
    ep.shots = k;
    for (std::size_t c = 0; c < C; ++c) {
        if (by_class[c].size() < k + query_k) {
            throw std::runtime_error("sample_episode: class '" + ds.class_names[c] + "' of task '" +
                                     ds.name + "' has " + std::to_string(by_class[c].size()) +
                                     " examples, need " + std::to_string(k + query_k));
        }
        auto idx = rng.sample_without_replacement(by_class[c].size(), k + query_k);
        for (std::size_t i = 0; i < k; ++i) {
            ep.support.emplace_back(pool[by_class[c][idx[i]]].tokens, static_cast<int>(c));
        }
        for (std::size_t i = k; i < k + query_k; ++i) {
            ep.query.emplace_back(pool[by_class[c][idx[i]]].tokens, static_cast<int>(c));
        }
    }
    return ep;
}

std::pair<std::vector<std::pair<std::vector<int>, int>>,
          std::vector<std::pair<std::vector<int>, int>>>
subsample_support(const Episode& episode, std::size_t proto_per_class, std::size_t probe_size,
                  Rng& rng) {
    std::size_t C = episode.num_classes;
    if (proto_per_class < 1) throw std::invalid_argument("subsample_support: m must be >= 1");
    if (probe_size < 1) throw std::invalid_argument("subsample_support: probe_size must be >= 1");
    if (proto_per_class * C + probe_size > episode.support.size()) {
        throw std::invalid_argument("subsample_support: infeasible sizes (m*C + probe = " +
                                    std::to_string(proto_per_class * C + probe_size) +
                                    " > |S| = " + std::to_string(episode.support.size()) + ")");
    }
    std::vector<std::vector<std::size_t>> by_class(C);
    for (std::size_t i = 0; i < episode.support.size(); ++i) {
        by_class[static_cast<std::size_t>(episode.support[i].second)].push_back(i);
    }
    std::vector<std::pair<std::vector<int>, int>> protos;
    std::vector<std::size_t> remaining;
    for (std::size_t c = 0; c < C; ++c) {
        if (by_class[c].size() < proto_per_class) {
            throw std::invalid_argument("subsample_support: class " + std::to_string(c) +
                                        " has fewer than m support examples");
        }
        auto idx = rng.sample_without_replacement(by_class[c].size(), by_class[c].size());
        for (std::size_t i = 0; i < idx.size(); ++i) {
            if (i < proto_per_class) {
                protos.push_back(episode.support[by_class[c][idx[i]]]);
            } else {
                remaining.push_back(by_class[c][idx[i]]);
            }
        }
    }
    auto probe_idx = rng.sample_without_replacement(remaining.size(), probe_size);
    std::vector<std::pair<std::vector<int>, int>> probe;
    for (auto i : probe_idx) probe.push_back(episode.support[remaining[i]]);
    return {std::move(protos), std::move(probe)};
}

} // namespace g2t
