#include "aeslab/types.hpp"

#include <algorithm>
#include <set>

namespace aeslab {

const char* essay_type_name(EssayType t) {
    switch (t) {
        case EssayType::Argumentative: return "argumentative";
        case EssayType::SourceDependent: return "source_dependent";
        case EssayType::Narrative: return "narrative";
    }
    return "unknown";
}

const ScoreRange& PromptSpec::range_of(const TraitId& t) const {
    auto it = trait_range.find(t);
    if (it == trait_range.end())
        throw std::out_of_range("prompt " + std::to_string(prompt_id) + " has no trait " + t);
    return it->second;
}

bool PromptSpec::has_trait(const TraitId& t) const { return trait_range.count(t) != 0; }

ScoreRange PromptSpec::pooled_range() const {
    if (trait_range.empty()) throw std::logic_error("prompt without traits");
    ScoreRange pooled = trait_range.begin()->second;
    for (const auto& [_, r] : trait_range) {
        pooled.lo = std::min(pooled.lo, r.lo);
        pooled.hi = std::max(pooled.hi, r.hi);
    }
    return pooled;
}

const PromptSpec& Schema::prompt(int prompt_id) const {
    for (const auto& p : prompts)
        if (p.prompt_id == prompt_id) return p;
    throw std::out_of_range("unknown prompt id " + std::to_string(prompt_id));
}

std::vector<TraitId> Schema::trait_universe() const {
    std::vector<TraitId> out;
    for (const auto& p : prompts)
        for (const auto& t : p.traits)
            if (std::find(out.begin(), out.end(), t) == out.end()) out.push_back(t);
    return out;
}

ScoreRange Schema::pooled_range() const {
    if (prompts.empty()) throw std::logic_error("empty schema");
    ScoreRange pooled = prompts.front().pooled_range();
    for (const auto& p : prompts) {
        ScoreRange r = p.pooled_range();
        pooled.lo = std::min(pooled.lo, r.lo);
        pooled.hi = std::max(pooled.hi, r.hi);
    }
    return pooled;
}

void Schema::validate() const {
    if (prompts.empty()) throw std::invalid_argument("schema has no prompts");
    std::set<int> seen;
    for (const auto& p : prompts) {
        if (!seen.insert(p.prompt_id).second)
            throw std::invalid_argument("duplicate prompt id " + std::to_string(p.prompt_id));
        if (p.traits.empty())
            throw std::invalid_argument("prompt " + std::to_string(p.prompt_id) + " has no traits");
        if (std::find(p.traits.begin(), p.traits.end(), TraitId("over")) == p.traits.end())
            throw std::invalid_argument("prompt " + std::to_string(p.prompt_id) + " lacks 'over'");
        if (p.nominal_count <= 0)
            throw std::invalid_argument("prompt " + std::to_string(p.prompt_id) +
                                        " nominal_count must be positive");
        std::set<TraitId> uniq(p.traits.begin(), p.traits.end());
        if (uniq.size() != p.traits.size())
            throw std::invalid_argument("prompt " + std::to_string(p.prompt_id) +
                                        " lists a trait twice");
        for (const auto& t : p.traits) {
            auto it = p.trait_range.find(t);
            if (it == p.trait_range.end())
                throw std::invalid_argument("prompt " + std::to_string(p.prompt_id) +
                                            " trait " + t + " has no range");
            if (it->second.lo > it->second.hi)
                throw std::invalid_argument("prompt " + std::to_string(p.prompt_id) +
                                            " trait " + t + " has an empty range");
        }
        if (p.trait_range.size() != p.traits.size())
            throw std::invalid_argument("prompt " + std::to_string(p.prompt_id) +
                                        " has ranges for unlisted traits");
        if (p.range_of("over").lo != p.overall_range.lo ||
            p.range_of("over").hi != p.overall_range.hi)
            throw std::invalid_argument("prompt " + std::to_string(p.prompt_id) +
                                        " overall_range disagrees with trait_range[over]");
    }
}

TraitScoreVector::TraitScoreVector(const std::vector<TraitId>& universe) {
    entries_.reserve(universe.size());
    for (const auto& t : universe) entries_.emplace_back(t, std::nullopt);
}

void TraitScoreVector::set(const TraitId& trait, TraitScore score) {
    for (auto& [t, s] : entries_) {
        if (t == trait) {
            s = score;
            return;
        }
    }
    throw std::out_of_range("trait not in universe: " + trait);
}

TraitScore TraitScoreVector::get(const TraitId& trait) const {
    for (const auto& [t, s] : entries_)
        if (t == trait) return s;
    throw std::out_of_range("trait not in universe: " + trait);
}

bool TraitScoreVector::has(const TraitId& trait) const {
    for (const auto& [t, _] : entries_)
        if (t == trait) return true;
    return false;
}

bool TraitScoreVector::operator==(const TraitScoreVector& other) const {
    return entries_ == other.entries_;
}

namespace {

PromptSpec make_prompt(int id, EssayType type, ScoreRange overall, ScoreRange trait,
                       std::vector<TraitId> traits, int count) {
    PromptSpec p;
    p.prompt_id = id;
    p.essay_type = type;
    p.traits = std::move(traits);
    p.overall_range = overall;
    p.nominal_count = count;
    for (const auto& t : p.traits) p.trait_range[t] = (t == "over") ? overall : trait;
    return p;
}

} // namespace

Schema load_prompt_schema() {
    using ET = EssayType;
    const std::vector<TraitId> arg_traits = {"over", "cont", "org", "wc", "sf", "conv"};
    const std::vector<TraitId> src_traits = {"over", "cont", "pa", "lang", "nar"};
    const std::vector<TraitId> p7_traits = {"over", "cont", "org", "conv", "style"};
    const std::vector<TraitId> p8_traits = {"over", "cont", "org", "wc", "sf", "conv", "voice"};

    Schema s;
    s.prompts.push_back(make_prompt(1, ET::Argumentative, {2, 12}, {1, 6}, arg_traits, 1783));
    s.prompts.push_back(make_prompt(2, ET::Argumentative, {1, 6}, {1, 6}, arg_traits, 1800));
    s.prompts.push_back(make_prompt(3, ET::SourceDependent, {0, 3}, {0, 3}, src_traits, 1726));
    s.prompts.push_back(make_prompt(4, ET::SourceDependent, {0, 3}, {0, 3}, src_traits, 1772));
    s.prompts.push_back(make_prompt(5, ET::SourceDependent, {0, 4}, {0, 4}, src_traits, 1805));
    s.prompts.push_back(make_prompt(6, ET::SourceDependent, {0, 4}, {0, 4}, src_traits, 1800));
    s.prompts.push_back(make_prompt(7, ET::Narrative, {0, 30}, {0, 6}, p7_traits, 1569));
    s.prompts.push_back(make_prompt(8, ET::Narrative, {0, 60}, {2, 12}, p8_traits, 723));
    s.validate();
    return s;
}

std::vector<TraitId> trait_prediction_order(const Schema& schema) {
    // Rarer traits (by total essay count of the prompts that evaluate them)
    // are emitted first, so every trait conditions on all rarer ones.
    // "over" always goes last.
    std::vector<std::pair<long long, TraitId>> keyed;
    for (const auto& t : schema.trait_universe()) {
        if (t == "over") continue;
        long long count = 0;
        for (const auto& p : schema.prompts)
            if (p.has_trait(t)) count += p.nominal_count;
        keyed.emplace_back(count, t);
    }
    std::sort(keyed.begin(), keyed.end());
    std::vector<TraitId> order;
    order.reserve(keyed.size() + 1);
    for (const auto& [_, t] : keyed) order.push_back(t);
    order.push_back("over");
    return order;
}

} // namespace aeslab
