#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace editlab {

// Synthetic (subject, relation, object) universe. Every surface form is a
// single token; a prompt is [BOS, s, r] and the supervised answer is the
// object token. Each relation also has one paraphrase token with the same
// meaning, used to measure generalization of edits.

struct WorldSpec {
    int n_subjects = 100;
    int n_relations = 8;
    int n_objects = 100;
    int n_facts = 400;  // 300 train + 40 edit candidates + 60 locality holdout
    int vocab_size = 256;
    uint64_t seed = 0;

    bool operator==(const WorldSpec&) const = default;
};

// Token id layout: [BOS][subjects][relations][paraphrases][objects][unused].
struct VocabLayout {
    int n_subjects = 0;
    int n_relations = 0;
    int n_objects = 0;
    int vocab_size = 0;

    int bos() const { return 0; }
    int subject_token(int i) const { return 1 + i; }
    int relation_token(int j) const { return 1 + n_subjects + j; }
    int paraphrase_token(int j) const { return 1 + n_subjects + n_relations + j; }
    int object_token(int k) const { return 1 + n_subjects + 2 * n_relations + k; }
    int used_tokens() const { return 1 + n_subjects + 2 * n_relations + n_objects; }
    bool is_object(int tok) const {
        return tok >= object_token(0) && tok < object_token(n_objects);
    }

    bool operator==(const VocabLayout&) const = default;
};

// All fields are token ids.
struct FactTriple {
    int subject = 0;
    int relation = 0;
    int object = 0;
    int paraphrase = 0;  // alternate surface token for the same relation

    bool operator==(const FactTriple&) const = default;
};

struct FactWorld {
    WorldSpec spec;
    VocabLayout vocab;
    std::vector<FactTriple> facts;
    // Disjoint index lists into facts, together covering every fact.
    std::vector<int> train_split, edit_split, locality_split;
};

FactWorld build_world(const WorldSpec& spec);

// Prompts share a fixed shape: BOS, subject at kSubjectPos, relation last.
inline constexpr int kSubjectPos = 1;
std::vector<int> fact_prompt(const FactTriple& f);
std::vector<int> paraphrase_prompt(const FactTriple& f);

nlohmann::json world_to_json(const FactWorld& w);
FactWorld world_from_json(const nlohmann::json& j);
void save_world(const std::string& path, const FactWorld& w);
FactWorld load_world(const std::string& path);

// A batch edit: rewrite the object of an edit-candidate fact.
struct CounterfactEdit {
    int fact_index = 0;  // into world.facts; always a member of edit_split
    int new_object = 0;  // token id, never the current object
};

std::vector<CounterfactEdit> sample_counterfacts(const FactWorld& w, int t_edits, uint64_t seed);

struct TrainItem {
    std::vector<int> prompt;
    int target = 0;
};

// Primary prompts for every fact; paraphrase prompts only for train and
// locality facts, so paraphrases of edit candidates are never memorized.
std::vector<TrainItem> supervised_items(const FactWorld& w);
std::vector<TrainItem> split_primary_items(const FactWorld& w, const std::vector<int>& split);

}  // namespace editlab
