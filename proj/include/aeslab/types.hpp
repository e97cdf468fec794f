#pragma once
// Core domain types: prompts, traits, score vectors, essay records.

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace aeslab {

// Traits are identified by their canonical lowercase token name
// ("over", "cont", "org", "wc", "sf", "conv", "pa", "lang", "nar",
// "style", "voice"). Custom schemas may introduce arbitrary names.
using TraitId = std::string;

// A score is either an integer or unset (the "nan" marker).
using TraitScore = std::optional<int>;

struct ScoreRange {
    int lo = 0;
    int hi = 0;

    int span() const { return hi - lo + 1; }
    bool contains(int v) const { return v >= lo && v <= hi; }
};

enum class EssayType { Argumentative, SourceDependent, Narrative };

const char* essay_type_name(EssayType t);

// One prompt's trait set and score ranges. nominal_count is the per-prompt
// essay count of the reference corpus; the trait prediction order is
// derived from it.
struct PromptSpec {
    int prompt_id = 0;
    EssayType essay_type = EssayType::Argumentative;
    std::vector<TraitId> traits;               // includes "over"
    std::map<TraitId, ScoreRange> trait_range; // one entry per trait
    ScoreRange overall_range;
    int nominal_count = 0;

    const ScoreRange& range_of(const TraitId& t) const;
    bool has_trait(const TraitId& t) const;
    // Smallest range covering every trait of this prompt.
    ScoreRange pooled_range() const;
};

struct Schema {
    std::vector<PromptSpec> prompts;

    const PromptSpec& prompt(int prompt_id) const;
    // All traits, in order of first appearance across prompts.
    std::vector<TraitId> trait_universe() const;
    // Widest range over every prompt/trait pair.
    ScoreRange pooled_range() const;
    void validate() const;
};

// Ordered trait -> score map over a schema's trait universe. Traits the
// prompt does not evaluate stay unset; external data may also leave a
// prompt trait unset when the annotation is missing.
class TraitScoreVector {
public:
    TraitScoreVector() = default;
    explicit TraitScoreVector(const std::vector<TraitId>& universe);

    void set(const TraitId& trait, TraitScore score);
    TraitScore get(const TraitId& trait) const;
    bool has(const TraitId& trait) const;

    const std::vector<std::pair<TraitId, TraitScore>>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }
    bool operator==(const TraitScoreVector& other) const;

private:
    std::vector<std::pair<TraitId, TraitScore>> entries_;
};

struct EssayRecord {
    std::int64_t essay_id = 0;
    int prompt_id = 0;
    std::vector<int> tokens;      // scoring prefix + essay body, as vocab ids
    TraitScoreVector gold;
    double latent_quality = 0.0;  // generator-internal, kept for diagnostics
    int fold = -1;                // assigned by make_folds
};

// The built-in eight-prompt schema.
Schema load_prompt_schema();

// Traits ordered by ascending total essay count of the prompts evaluating
// them (nominal_count sums). Ties break lexicographically; "over" is
// always placed last.
std::vector<TraitId> trait_prediction_order(const Schema& schema);

} // namespace aeslab
