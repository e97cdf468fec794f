#pragma once
// Synthetic corpus generation, target serialization/parsing, fold splits,
// and TSV ingestion of external data.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "aeslab/types.hpp"
#include "aeslab/util.hpp"
#include "aeslab/vocab.hpp"

namespace aeslab {

struct CorpusConfig {
    std::uint64_t seed = 1;
    int essays_per_prompt = 120;
    int body_len_min = 16;
    int body_len_max = 28;
    // Gold-score jitter, as a fraction of each trait's range width.
    double noise_sigma = 0.05;
    // How many distinct filler words the generator draws from.
    int vocab_size_body = 24;

    void validate() const;
    json to_json() const;
    static CorpusConfig from_json(const json& j);
};

struct Corpus {
    Schema schema;
    std::vector<EssayRecord> essays;
};

// Essays with a shared latent quality q ~ U[0,1] per essay: gold scores are
// q mapped into each trait range plus clamped Gaussian jitter, and the body
// carries round(q * body_len) marker tokens so quality is recoverable from
// the text alone.
Corpus generate_corpus(const Schema& schema, const CorpusConfig& config);

// Decoder target: for every trait in prediction order, the trait token
// followed by its score token ("nan" when unset), then eos.
std::vector<int> serialize_targets(const TraitScoreVector& gold, const PromptSpec& prompt,
                                   const Vocabulary& vocab,
                                   const std::vector<TraitId>& order);

enum class ParseFailureKind { None, WrongTraitToken, MissingScore, OutOfRange, Truncated };

const char* parse_failure_name(ParseFailureKind k);

// Parse failure is a value: `scores` keeps everything parsed before the
// failure point so downstream consumers can still use partial output.
struct ParseResult {
    TraitScoreVector scores;
    bool ok = false;
    ParseFailureKind failure = ParseFailureKind::None;
    std::size_t failure_position = 0; // index into the token sequence
    std::string detail;
};

ParseResult parse_scores(const std::vector<int>& tokens, const PromptSpec& prompt,
                         const Vocabulary& vocab, const std::vector<TraitId>& order);

// Stratified k-fold assignment (per prompt, seeded shuffle). Writes the
// fold field of every essay.
void make_folds(Corpus& corpus, int k, std::uint64_t seed);

// Stable identity of a fold assignment, for leak checks across runs.
std::uint64_t fold_split_hash(const Corpus& corpus);

// Tab-separated ingestion. Header: essay_id, prompt_id, essay, then trait
// names. Empty trait cells become unset scores; out-of-range values are
// rejected. Words outside the generator vocabulary map onto it by hash.
Corpus ingest_external_corpus(const std::filesystem::path& tsv_path, const Schema& schema,
                              const Vocabulary& vocab);

json schema_to_json(const Schema& schema);
Schema schema_from_json(const json& j);
std::uint64_t schema_hash(const Schema& schema);

// JSON-lines essays plus a sibling "<stem>.schema.json".
void save_corpus(const Corpus& corpus, const std::filesystem::path& path);
Corpus load_corpus(const std::filesystem::path& path);

} // namespace aeslab
