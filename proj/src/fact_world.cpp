#include "editlab/fact_world.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <stdexcept>

#include "editlab/rng.hpp"

namespace editlab {

namespace {

void validate_spec(const WorldSpec& s) {
    if (s.n_subjects < 1 || s.n_relations < 1 || s.n_objects < 1 || s.n_facts < 1)
        throw std::invalid_argument("world spec: all counts must be >= 1");
    if (s.n_facts > s.n_subjects * s.n_relations)
        throw std::invalid_argument("world spec: n_facts exceeds the " +
                                    std::to_string(s.n_subjects * s.n_relations) +
                                    " available subject-relation pairs");
    VocabLayout v{s.n_subjects, s.n_relations, s.n_objects, s.vocab_size};
    if (v.used_tokens() > s.vocab_size)
        throw std::invalid_argument("world spec: vocab overflow, needs " +
                                    std::to_string(v.used_tokens()) + " tokens but only " +
                                    std::to_string(s.vocab_size) + " available");
}

template <class T>
void shuffle_vec(std::vector<T>& v, Rng& rng) {
    for (size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.index(i)]);
}

void check_world(const FactWorld& w) {
    std::set<std::pair<int, int>> keys;
    for (const auto& f : w.facts)
        if (!keys.insert({f.subject, f.relation}).second)
            throw std::runtime_error("world: duplicate (subject, relation) pair");

    std::vector<char> seen(w.facts.size(), 0);
    for (const auto* split : {&w.train_split, &w.edit_split, &w.locality_split}) {
        for (int i : *split) {
            if (i < 0 || i >= static_cast<int>(w.facts.size()))
                throw std::runtime_error("world: split index out of range");
            if (seen[i]++) throw std::runtime_error("world: splits overlap at fact " +
                                                    std::to_string(i));
        }
    }
    for (char s : seen)
        if (!s) throw std::runtime_error("world: splits do not cover every fact");
}

}  // namespace

FactWorld build_world(const WorldSpec& spec) {
    validate_spec(spec);

    FactWorld w;
    w.spec = spec;
    w.vocab = {spec.n_subjects, spec.n_relations, spec.n_objects, spec.vocab_size};

    std::vector<std::pair<int, int>> pairs;
    pairs.reserve(static_cast<size_t>(spec.n_subjects) * spec.n_relations);
    for (int s = 0; s < spec.n_subjects; ++s)
        for (int r = 0; r < spec.n_relations; ++r) pairs.push_back({s, r});

    Rng rng(derive_seed(spec.seed, 0x776f726c64ull));  // "world"
    shuffle_vec(pairs, rng);

    w.facts.reserve(spec.n_facts);
    for (int i = 0; i < spec.n_facts; ++i) {
        const auto [s, r] = pairs[i];
        FactTriple f;
        f.subject = w.vocab.subject_token(s);
        f.relation = w.vocab.relation_token(r);
        f.paraphrase = w.vocab.paraphrase_token(r);
        f.object = w.vocab.object_token(static_cast<int>(rng.index(spec.n_objects)));
        w.facts.push_back(f);
    }

    // Facts are already in random order; carve fixed-fraction splits.
    const int n_edit = spec.n_facts / 10;
    const int n_loc = spec.n_facts * 3 / 20;
    const int n_train = spec.n_facts - n_edit - n_loc;
    for (int i = 0; i < n_train; ++i) w.train_split.push_back(i);
    for (int i = n_train; i < n_train + n_edit; ++i) w.edit_split.push_back(i);
    for (int i = n_train + n_edit; i < spec.n_facts; ++i) w.locality_split.push_back(i);

    check_world(w);
    return w;
}

std::vector<int> fact_prompt(const FactTriple& f) { return {0, f.subject, f.relation}; }

std::vector<int> paraphrase_prompt(const FactTriple& f) { return {0, f.subject, f.paraphrase}; }

nlohmann::json world_to_json(const FactWorld& w) {
    nlohmann::json facts = nlohmann::json::array();
    for (const auto& f : w.facts)
        facts.push_back({f.subject, f.relation, f.object, f.paraphrase});
    return {{"spec",
             {{"n_subjects", w.spec.n_subjects},
              {"n_relations", w.spec.n_relations},
              {"n_objects", w.spec.n_objects},
              {"n_facts", w.spec.n_facts},
              {"vocab_size", w.spec.vocab_size},
              {"seed", w.spec.seed}}},
            {"facts", facts},
            {"splits",
             {{"train", w.train_split},
              {"edit", w.edit_split},
              {"locality", w.locality_split}}}};
}

FactWorld world_from_json(const nlohmann::json& j) {
    FactWorld w;
    try {
        const auto& s = j.at("spec");
        w.spec.n_subjects = s.at("n_subjects").get<int>();
        w.spec.n_relations = s.at("n_relations").get<int>();
        w.spec.n_objects = s.at("n_objects").get<int>();
        w.spec.n_facts = s.at("n_facts").get<int>();
        w.spec.vocab_size = s.at("vocab_size").get<int>();
        w.spec.seed = s.at("seed").get<uint64_t>();
        w.vocab = {w.spec.n_subjects, w.spec.n_relations, w.spec.n_objects, w.spec.vocab_size};
        for (const auto& f : j.at("facts")) {
            if (f.size() != 4) throw std::runtime_error("fact entry must have 4 token ids");
            w.facts.push_back({f[0].get<int>(), f[1].get<int>(), f[2].get<int>(),
                               f[3].get<int>()});
        }
        w.train_split = j.at("splits").at("train").get<std::vector<int>>();
        w.edit_split = j.at("splits").at("edit").get<std::vector<int>>();
        w.locality_split = j.at("splits").at("locality").get<std::vector<int>>();
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(std::string("world json: ") + e.what());
    }
    validate_spec(w.spec);
    check_world(w);
    return w;
}

void save_world(const std::string& path, const FactWorld& w) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    out << world_to_json(w).dump(2) << "\n";
    if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

FactWorld load_world(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open world file '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("world file '" + path + "': " + e.what());
    }
    return world_from_json(j);
}

std::vector<CounterfactEdit> sample_counterfacts(const FactWorld& w, int t_edits, uint64_t seed) {
    if (t_edits < 1) throw std::invalid_argument("sample_counterfacts: t_edits must be >= 1");
    if (t_edits > static_cast<int>(w.edit_split.size()))
        throw std::invalid_argument("sample_counterfacts: only " +
                                    std::to_string(w.edit_split.size()) +
                                    " edit candidates available");
    if (w.vocab.n_objects < 2)
        throw std::invalid_argument("sample_counterfacts: needs at least 2 objects");

    Rng rng(derive_seed(seed, 0x6366ull));  // "cf"
    std::vector<int> order = w.edit_split;
    shuffle_vec(order, rng);

    std::vector<CounterfactEdit> edits;
    for (int i = 0; i < t_edits; ++i) {
        CounterfactEdit e;
        e.fact_index = order[i];
        do {
            e.new_object = w.vocab.object_token(static_cast<int>(rng.index(w.vocab.n_objects)));
        } while (e.new_object == w.facts[e.fact_index].object);
        edits.push_back(e);
    }
    return edits;
}

std::vector<TrainItem> supervised_items(const FactWorld& w) {
    std::vector<TrainItem> items;
    for (const auto& f : w.facts) items.push_back({fact_prompt(f), f.object});
    for (const auto* split : {&w.train_split, &w.locality_split})
        for (int i : *split)
            items.push_back({paraphrase_prompt(w.facts[i]), w.facts[i].object});
    return items;
}

std::vector<TrainItem> split_primary_items(const FactWorld& w, const std::vector<int>& split) {
    std::vector<TrainItem> items;
    for (int i : split) items.push_back({fact_prompt(w.facts[i]), w.facts[i].object});
    return items;
}

}  // namespace editlab
