#pragma once
// Token vocabulary shared by the corpus generator and the policy model.
// Layout (fixed given a schema): specials, prefix words, prompt markers,
// trait names, score integers over the pooled schema range, body words.

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "aeslab/types.hpp"

namespace aeslab {

class Vocabulary {
public:
    int pad_id() const { return pad_id_; }
    int bos_id() const { return bos_id_; }
    int eos_id() const { return eos_id_; }
    int nan_id() const { return nan_id_; }

    int size() const { return static_cast<int>(id_to_token_.size()); }
    const std::string& token(int id) const;
    int id(const std::string& token) const;        // throws on unknown
    int try_id(const std::string& token) const;    // -1 on unknown

    bool is_score_token(int id) const;
    int score_value(int id) const;                 // throws unless is_score_token
    int score_id(int value) const;                 // throws if outside pooled range

    bool is_trait_token(int id) const;
    int trait_id_token(const TraitId& trait) const;

    int prompt_token(int prompt_id) const;         // "<p3>" etc.
    int marker_id() const { return marker_id_; }
    const std::vector<int>& filler_ids() const { return filler_ids_; }
    // Maps arbitrary external words onto the closed body vocabulary.
    int body_word_id(const std::string& word) const;

    // Tokens of the scoring instruction that precedes the essay body.
    std::vector<int> scoring_prefix(int prompt_id) const;

    std::uint64_t content_hash() const;

    friend Vocabulary build_vocab(const Schema& schema);

private:
    int add(const std::string& token);

    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, int> token_to_id_;
    int pad_id_ = -1, bos_id_ = -1, eos_id_ = -1, nan_id_ = -1;
    int score_base_ = -1;
    ScoreRange score_range_{0, 0};
    std::unordered_map<std::string, int> trait_tokens_;
    std::unordered_map<int, int> prompt_tokens_;
    int marker_id_ = -1;
    std::vector<int> filler_ids_;
};

Vocabulary build_vocab(const Schema& schema);

} // namespace aeslab
