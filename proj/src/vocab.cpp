#include "aeslab/vocab.hpp"

#include <stdexcept>

#include "aeslab/util.hpp"

namespace aeslab {

namespace {

// Closed body vocabulary. The first word is the quality marker; the rest
// are fillers. External words are folded onto this set by hash. None of
// these may collide with trait names, prefix words, or "nan".
const std::vector<std::string>& body_words() {
    static const std::vector<std::string> words = {
        "vivid",  // marker
        "and",   "a",     "to",    "in",    "it",    "is",    "was",   "for",
        "on",    "that",  "with",  "as",    "at",    "by",    "he",    "she",
        "they",  "we",    "you",   "but",   "or",    "so",    "if",    "then",
        "when",  "while", "one",   "two",   "few",   "many",  "most",  "some",
        "any",   "same",  "other", "new",   "old",   "good",  "bad",   "big",
        "small", "long",  "short", "first", "last",  "next",  "day",   "time",
        "year",  "told",  "idea",  "point", "plan",  "fact",  "word",  "page",
        "note",  "task",  "goal",  "step",  "turn",  "place", "thing", "way",
        "sense",
    };
    return words;
}

const std::vector<std::string>& prefix_words() {
    static const std::vector<std::string> words = {"score", "the", "essay",
                                                   "of",    "prompt", ":"};
    return words;
}

} // namespace

int Vocabulary::add(const std::string& token) {
    auto it = token_to_id_.find(token);
    if (it != token_to_id_.end()) return it->second;
    int id = static_cast<int>(id_to_token_.size());
    id_to_token_.push_back(token);
    token_to_id_.emplace(token, id);
    return id;
}

const std::string& Vocabulary::token(int id) const {
    if (id < 0 || id >= size()) throw std::out_of_range("token id out of range");
    return id_to_token_[static_cast<std::size_t>(id)];
}

int Vocabulary::id(const std::string& token) const {
    auto it = token_to_id_.find(token);
    if (it == token_to_id_.end()) throw std::out_of_range("unknown token: " + token);
    return it->second;
}

int Vocabulary::try_id(const std::string& token) const {
    auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? -1 : it->second;
}

bool Vocabulary::is_score_token(int id) const {
    return id >= score_base_ && id < score_base_ + score_range_.span();
}

int Vocabulary::score_value(int id) const {
    if (!is_score_token(id)) throw std::invalid_argument("not a score token");
    return score_range_.lo + (id - score_base_);
}

int Vocabulary::score_id(int value) const {
    if (!score_range_.contains(value))
        throw std::out_of_range("score outside vocabulary range: " + std::to_string(value));
    return score_base_ + (value - score_range_.lo);
}

bool Vocabulary::is_trait_token(int id) const {
    if (id < 0 || id >= size()) return false;
    return trait_tokens_.count(id_to_token_[static_cast<std::size_t>(id)]) != 0;
}

int Vocabulary::trait_id_token(const TraitId& trait) const {
    auto it = trait_tokens_.find(trait);
    if (it == trait_tokens_.end()) throw std::out_of_range("unknown trait: " + trait);
    return it->second;
}

int Vocabulary::prompt_token(int prompt_id) const {
    auto it = prompt_tokens_.find(prompt_id);
    if (it == prompt_tokens_.end())
        throw std::out_of_range("no prompt token for id " + std::to_string(prompt_id));
    return it->second;
}

int Vocabulary::body_word_id(const std::string& word) const {
    auto it = token_to_id_.find(word);
    if (it != token_to_id_.end() && it->second >= marker_id_) return it->second;
    std::uint64_t h = fnv1a64(word);
    return filler_ids_[static_cast<std::size_t>(h % filler_ids_.size())];
}

std::vector<int> Vocabulary::scoring_prefix(int prompt_id) const {
    return {id("score"), id("the"), id("essay"),          id("of"),
            id("the"),   id("prompt"), prompt_token(prompt_id), id(":")};
}

std::uint64_t Vocabulary::content_hash() const {
    std::string joined;
    for (const auto& t : id_to_token_) {
        joined += t;
        joined += '\n';
    }
    return fnv1a64(joined);
}

Vocabulary build_vocab(const Schema& schema) {
    schema.validate();
    Vocabulary v;
    v.pad_id_ = v.add("[pad]");
    v.bos_id_ = v.add("[bos]");
    v.eos_id_ = v.add("[eos]");
    v.nan_id_ = v.add("nan");
    for (const auto& w : prefix_words()) v.add(w);
    for (const auto& p : schema.prompts)
        v.prompt_tokens_[p.prompt_id] = v.add("<p" + std::to_string(p.prompt_id) + ">");
    for (const auto& t : schema.trait_universe()) v.trait_tokens_[t] = v.add(t);
    ScoreRange pooled = schema.pooled_range();
    v.score_range_ = pooled;
    v.score_base_ = v.size();
    for (int s = pooled.lo; s <= pooled.hi; ++s) {
        int id = v.add(std::to_string(s));
        if (id != v.score_base_ + (s - pooled.lo))
            throw std::logic_error("score token collision in vocabulary");
    }
    const auto& body = body_words();
    int before = v.size();
    v.marker_id_ = v.add(body.front());
    for (std::size_t i = 1; i < body.size(); ++i) v.filler_ids_.push_back(v.add(body[i]));
    if (v.size() != before + static_cast<int>(body.size()))
        throw std::logic_error("body word collides with an earlier vocabulary token");
    return v;
}

} // namespace aeslab
