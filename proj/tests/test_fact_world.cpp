#include <cstdio>
#include <set>
#include <stdexcept>

#include <doctest.h>

#include "editlab/fact_world.hpp"

using namespace editlab;

namespace {

WorldSpec mini_spec() {
    WorldSpec s;
    s.n_subjects = 10;
    s.n_relations = 2;
    s.n_objects = 20;
    s.n_facts = 20;
    s.vocab_size = 64;
    s.seed = 3;
    return s;
}

}  // namespace

TEST_CASE("build_world is seed-deterministic") {
    const FactWorld a = build_world(mini_spec());
    const FactWorld b = build_world(mini_spec());
    CHECK(a.facts == b.facts);
    CHECK(a.train_split == b.train_split);

    WorldSpec other = mini_spec();
    other.seed = 4;
    CHECK(build_world(other).facts != a.facts);
}

TEST_CASE("facts have unique pairs and valid token ranges") {
    const FactWorld w = build_world(mini_spec());
    std::set<std::pair<int, int>> pairs;
    for (const auto& f : w.facts) {
        CHECK(pairs.insert({f.subject, f.relation}).second);
        CHECK(f.subject >= 1);
        CHECK(f.subject <= w.vocab.n_subjects);
        CHECK(f.paraphrase == f.relation + w.vocab.n_relations);
        CHECK(w.vocab.is_object(f.object));
    }
}

TEST_CASE("exhausting every pair works and over-asking throws") {
    WorldSpec s = mini_spec();
    s.n_facts = s.n_subjects * s.n_relations;
    const FactWorld w = build_world(s);
    CHECK(static_cast<int>(w.facts.size()) == 20);

    s.n_facts = 21;
    CHECK_THROWS_AS(build_world(s), std::invalid_argument);
}

TEST_CASE("vocab overflow is rejected") {
    WorldSpec s = mini_spec();
    s.vocab_size = 30;  // needs 1 + 10 + 4 + 20 = 35
    CHECK_THROWS_WITH_AS(build_world(s), doctest::Contains("vocab overflow"),
                         std::invalid_argument);
}

TEST_CASE("default spec yields the 300/40/60 split") {
    const FactWorld w = build_world(WorldSpec{});
    CHECK(w.facts.size() == 400);
    CHECK(w.train_split.size() == 300);
    CHECK(w.edit_split.size() == 40);
    CHECK(w.locality_split.size() == 60);

    std::set<int> all;
    for (const auto* sp : {&w.train_split, &w.edit_split, &w.locality_split})
        for (int i : *sp) CHECK(all.insert(i).second);
    CHECK(all.size() == 400);
}

TEST_CASE("prompts place BOS, subject and relation in fixed positions") {
    const FactWorld w = build_world(mini_spec());
    const FactTriple& f = w.facts[0];
    const auto p = fact_prompt(f);
    CHECK(p == std::vector<int>{0, f.subject, f.relation});
    CHECK(p[kSubjectPos] == f.subject);
    CHECK(paraphrase_prompt(f) == std::vector<int>{0, f.subject, f.paraphrase});
}

TEST_CASE("world json round-trips through disk") {
    const FactWorld w = build_world(mini_spec());
    const std::string path = "world_test.json";
    save_world(path, w);
    const FactWorld r = load_world(path);
    CHECK(r.spec == w.spec);
    CHECK(r.facts == w.facts);
    CHECK(r.train_split == w.train_split);
    CHECK(r.edit_split == w.edit_split);
    CHECK(r.locality_split == w.locality_split);
    std::remove(path.c_str());

    CHECK_THROWS_AS(load_world("does_not_exist.json"), std::runtime_error);
}

TEST_CASE("world json rejects corrupted splits") {
    const FactWorld w = build_world(mini_spec());
    nlohmann::json j = world_to_json(w);
    j["splits"]["train"].push_back(w.edit_split[0]);  // overlap
    CHECK_THROWS_WITH_AS(world_from_json(j), doctest::Contains("overlap"), std::runtime_error);
}

TEST_CASE("counterfacts come from the edit split with changed objects") {
    const FactWorld w = build_world(mini_spec());
    const int t = static_cast<int>(w.edit_split.size());
    const auto edits = sample_counterfacts(w, t, 9);
    REQUIRE(static_cast<int>(edits.size()) == t);

    const std::set<int> edit_set(w.edit_split.begin(), w.edit_split.end());
    std::set<int> used;
    for (const auto& e : edits) {
        CHECK(edit_set.count(e.fact_index) == 1);
        CHECK(used.insert(e.fact_index).second);
        CHECK(e.new_object != w.facts[e.fact_index].object);
        CHECK(w.vocab.is_object(e.new_object));
    }

    const auto again = sample_counterfacts(w, t, 9);
    CHECK(again.size() == edits.size());
    for (size_t i = 0; i < edits.size(); ++i) {
        CHECK(again[i].fact_index == edits[i].fact_index);
        CHECK(again[i].new_object == edits[i].new_object);
    }

    CHECK_THROWS_AS(sample_counterfacts(w, t + 1, 9), std::invalid_argument);
}

TEST_CASE("supervised items exclude edit-candidate paraphrases") {
    const FactWorld w = build_world(mini_spec());
    const auto items = supervised_items(w);
    CHECK(items.size() ==
          w.facts.size() + w.train_split.size() + w.locality_split.size());

    std::set<std::vector<int>> prompts;
    for (const auto& it : items) prompts.insert(it.prompt);
    for (int i : w.edit_split) {
        CHECK(prompts.count(fact_prompt(w.facts[i])) == 1);
        CHECK(prompts.count(paraphrase_prompt(w.facts[i])) == 0);
    }
    for (int i : w.train_split) CHECK(prompts.count(paraphrase_prompt(w.facts[i])) == 1);
}
