#include "aeslab/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

namespace aeslab {

void CorpusConfig::validate() const {
    if (essays_per_prompt < 10) throw std::invalid_argument("essays_per_prompt must be >= 10");
    if (body_len_min < 4) throw std::invalid_argument("body_len_min must be >= 4");
    if (body_len_max < body_len_min)
        throw std::invalid_argument("body_len_max must be >= body_len_min");
    if (noise_sigma < 0.0 || !std::isfinite(noise_sigma))
        throw std::invalid_argument("noise_sigma must be finite and >= 0");
    if (vocab_size_body < 2) throw std::invalid_argument("vocab_size_body must be >= 2");
}

json CorpusConfig::to_json() const {
    return json{{"seed", seed},
                {"essays_per_prompt", essays_per_prompt},
                {"body_len_min", body_len_min},
                {"body_len_max", body_len_max},
                {"noise_sigma", noise_sigma},
                {"vocab_size_body", vocab_size_body}};
}

CorpusConfig CorpusConfig::from_json(const json& j) {
    CorpusConfig c;
    c.seed = j.value("seed", c.seed);
    c.essays_per_prompt = j.value("essays_per_prompt", c.essays_per_prompt);
    c.body_len_min = j.value("body_len_min", c.body_len_min);
    c.body_len_max = j.value("body_len_max", c.body_len_max);
    c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
    c.vocab_size_body = j.value("vocab_size_body", c.vocab_size_body);
    c.validate();
    return c;
}

Corpus generate_corpus(const Schema& schema, const CorpusConfig& config) {
    config.validate();
    schema.validate();
    Vocabulary vocab = build_vocab(schema);
    const std::vector<TraitId> universe = trait_prediction_order(schema);

    const std::size_t n_fillers =
        std::min<std::size_t>(static_cast<std::size_t>(config.vocab_size_body),
                              vocab.filler_ids().size());

    Corpus corpus;
    corpus.schema = schema;
    std::int64_t next_id = 1;
    for (const auto& prompt : schema.prompts) {
        std::mt19937_64 rng(derive_seed(config.seed, "gen/p" + std::to_string(prompt.prompt_id)));
        std::uniform_real_distribution<double> q_dist(0.0, 1.0);
        std::normal_distribution<double> unit_noise(0.0, 1.0);
        std::uniform_int_distribution<int> len_dist(config.body_len_min, config.body_len_max);
        std::uniform_int_distribution<std::size_t> filler_dist(0, n_fillers - 1);

        for (int i = 0; i < config.essays_per_prompt; ++i) {
            EssayRecord rec;
            rec.essay_id = next_id++;
            rec.prompt_id = prompt.prompt_id;
            rec.latent_quality = q_dist(rng);

            rec.gold = TraitScoreVector(universe);
            for (const auto& t : prompt.traits) {
                const ScoreRange& r = prompt.range_of(t);
                double width = static_cast<double>(r.hi - r.lo);
                double raw = r.lo + rec.latent_quality * width +
                             unit_noise(rng) * config.noise_sigma * width;
                int s = static_cast<int>(std::lround(raw));
                rec.gold.set(t, std::clamp(s, r.lo, r.hi));
            }

            int body_len = len_dist(rng);
            // The marker count is the one statistic the model can read the
            // quality off of: exactly round(q * body_len) markers.
            int markers = static_cast<int>(std::lround(rec.latent_quality * body_len));
            std::vector<int> body(static_cast<std::size_t>(body_len));
            for (auto& tok : body) tok = vocab.filler_ids()[filler_dist(rng)];
            std::vector<int> pos(static_cast<std::size_t>(body_len));
            for (int p = 0; p < body_len; ++p) pos[static_cast<std::size_t>(p)] = p;
            std::shuffle(pos.begin(), pos.end(), rng);
            for (int m = 0; m < markers; ++m)
                body[static_cast<std::size_t>(pos[static_cast<std::size_t>(m)])] =
                    vocab.marker_id();

            rec.tokens = vocab.scoring_prefix(prompt.prompt_id);
            rec.tokens.insert(rec.tokens.end(), body.begin(), body.end());
            corpus.essays.push_back(std::move(rec));
        }
    }
    return corpus;
}

std::vector<int> serialize_targets(const TraitScoreVector& gold, const PromptSpec& prompt,
                                   const Vocabulary& vocab,
                                   const std::vector<TraitId>& order) {
    for (const auto& [t, s] : gold.entries())
        if (s.has_value() && std::find(order.begin(), order.end(), t) == order.end())
            throw std::logic_error("scored trait '" + t + "' missing from prediction order");
    std::vector<int> out;
    out.reserve(order.size() * 2 + 1);
    for (const auto& t : order) {
        out.push_back(vocab.trait_id_token(t));
        TraitScore s = gold.get(t);
        if (s.has_value()) {
            if (!prompt.has_trait(t))
                throw std::invalid_argument("score present for trait '" + t +
                                            "' which prompt " +
                                            std::to_string(prompt.prompt_id) +
                                            " does not evaluate");
            out.push_back(vocab.score_id(*s));
        } else {
            out.push_back(vocab.nan_id());
        }
    }
    out.push_back(vocab.eos_id());
    return out;
}

const char* parse_failure_name(ParseFailureKind k) {
    switch (k) {
        case ParseFailureKind::None: return "none";
        case ParseFailureKind::WrongTraitToken: return "wrong_trait_token";
        case ParseFailureKind::MissingScore: return "missing_score";
        case ParseFailureKind::OutOfRange: return "out_of_range";
        case ParseFailureKind::Truncated: return "truncated";
    }
    return "unknown";
}

ParseResult parse_scores(const std::vector<int>& tokens, const PromptSpec& prompt,
                         const Vocabulary& vocab, const std::vector<TraitId>& order) {
    ParseResult res;
    res.scores = TraitScoreVector(order);

    auto fail = [&](ParseFailureKind kind, std::size_t pos, std::string detail) {
        res.ok = false;
        res.failure = kind;
        res.failure_position = pos;
        res.detail = std::move(detail);
        return res;
    };

    std::size_t pos = 0;
    for (const auto& t : order) {
        if (pos >= tokens.size())
            return fail(ParseFailureKind::Truncated, pos, "ended before trait '" + t + "'");
        if (tokens[pos] != vocab.trait_id_token(t))
            return fail(ParseFailureKind::WrongTraitToken, pos,
                        "expected trait '" + t + "', got '" + vocab.token(tokens[pos]) + "'");
        ++pos;
        if (pos >= tokens.size())
            return fail(ParseFailureKind::Truncated, pos, "ended before score of '" + t + "'");
        int tok = tokens[pos];
        if (tok == vocab.nan_id()) {
            res.scores.set(t, std::nullopt);
        } else if (vocab.is_score_token(tok)) {
            int v = vocab.score_value(tok);
            if (!prompt.has_trait(t))
                return fail(ParseFailureKind::OutOfRange, pos,
                            "numeric score for trait '" + t + "' which prompt " +
                                std::to_string(prompt.prompt_id) + " does not evaluate");
            if (!prompt.range_of(t).contains(v))
                return fail(ParseFailureKind::OutOfRange, pos,
                            "score " + std::to_string(v) + " outside range of '" + t + "'");
            res.scores.set(t, v);
        } else {
            return fail(ParseFailureKind::MissingScore, pos,
                        "expected score or nan for '" + t + "', got '" + vocab.token(tok) + "'");
        }
        ++pos;
    }
    if (pos >= tokens.size() || tokens[pos] != vocab.eos_id())
        return fail(ParseFailureKind::Truncated, pos, "missing terminator");
    res.ok = true;
    return res;
}

void make_folds(Corpus& corpus, int k, std::uint64_t seed) {
    if (k < 2) throw std::invalid_argument("fold count must be >= 2");
    // Per-prompt round-robin over a seeded shuffle keeps every fold's
    // prompt mix balanced.
    for (const auto& prompt : corpus.schema.prompts) {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < corpus.essays.size(); ++i)
            if (corpus.essays[i].prompt_id == prompt.prompt_id) idx.push_back(i);
        std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
            return corpus.essays[a].essay_id < corpus.essays[b].essay_id;
        });
        std::mt19937_64 rng(derive_seed(seed, "fold/p" + std::to_string(prompt.prompt_id)));
        std::shuffle(idx.begin(), idx.end(), rng);
        for (std::size_t j = 0; j < idx.size(); ++j)
            corpus.essays[idx[j]].fold = static_cast<int>(j % static_cast<std::size_t>(k));
    }
}

std::uint64_t fold_split_hash(const Corpus& corpus) {
    std::vector<std::pair<std::int64_t, int>> rows;
    rows.reserve(corpus.essays.size());
    for (const auto& e : corpus.essays) rows.emplace_back(e.essay_id, e.fold);
    std::sort(rows.begin(), rows.end());
    std::string buf;
    for (const auto& [id, fold] : rows) {
        buf += std::to_string(id);
        buf += ':';
        buf += std::to_string(fold);
        buf += '\n';
    }
    return fnv1a64(buf);
}

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> cells;
    std::string cur;
    for (char c : line) {
        if (c == '\t') {
            cells.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    cells.push_back(cur);
    return cells;
}

} // namespace

Corpus ingest_external_corpus(const std::filesystem::path& tsv_path, const Schema& schema,
                              const Vocabulary& vocab) {
    std::ifstream in(tsv_path);
    if (!in) throw std::runtime_error("cannot open corpus file: " + tsv_path.string());
    const std::vector<TraitId> universe = trait_prediction_order(schema);

    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("empty corpus file");
    std::vector<std::string> header = split_tabs(line);
    if (header.size() < 3 || header[0] != "essay_id" || header[1] != "prompt_id" ||
        header[2] != "essay")
        throw std::runtime_error("header must start with essay_id, prompt_id, essay");
    for (std::size_t c = 3; c < header.size(); ++c)
        if (std::find(universe.begin(), universe.end(), header[c]) == universe.end())
            throw std::runtime_error("unknown trait column: " + header[c]);

    Corpus corpus;
    corpus.schema = schema;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string> cells = split_tabs(line);
        if (cells.size() != header.size())
            throw std::runtime_error("line " + std::to_string(line_no) + ": expected " +
                                     std::to_string(header.size()) + " cells, got " +
                                     std::to_string(cells.size()));
        EssayRecord rec;
        rec.essay_id = std::stoll(cells[0]);
        rec.prompt_id = std::stoi(cells[1]);
        const PromptSpec& prompt = schema.prompt(rec.prompt_id);

        rec.tokens = vocab.scoring_prefix(rec.prompt_id);
        std::istringstream words(cells[2]);
        std::string w;
        while (words >> w) rec.tokens.push_back(vocab.body_word_id(w));

        rec.gold = TraitScoreVector(universe);
        for (std::size_t c = 3; c < header.size(); ++c) {
            if (cells[c].empty()) continue;
            const TraitId& t = header[c];
            int v = std::stoi(cells[c]);
            if (!prompt.has_trait(t))
                throw std::runtime_error("line " + std::to_string(line_no) + ": trait '" + t +
                                         "' is not evaluated by prompt " +
                                         std::to_string(rec.prompt_id));
            if (!prompt.range_of(t).contains(v))
                throw std::runtime_error("line " + std::to_string(line_no) + ": score " +
                                         std::to_string(v) + " out of range for trait '" + t +
                                         "'");
            rec.gold.set(t, v);
        }
        corpus.essays.push_back(std::move(rec));
    }
    return corpus;
}

json schema_to_json(const Schema& schema) {
    json prompts = json::array();
    for (const auto& p : schema.prompts) {
        json traits = json::array();
        for (const auto& t : p.traits) {
            const ScoreRange& r = p.range_of(t);
            traits.push_back({{"name", t}, {"lo", r.lo}, {"hi", r.hi}});
        }
        prompts.push_back({{"prompt_id", p.prompt_id},
                           {"essay_type", essay_type_name(p.essay_type)},
                           {"overall", {p.overall_range.lo, p.overall_range.hi}},
                           {"nominal_count", p.nominal_count},
                           {"traits", traits}});
    }
    return json{{"prompts", prompts}};
}

Schema schema_from_json(const json& j) {
    Schema s;
    for (const auto& pj : j.at("prompts")) {
        PromptSpec p;
        p.prompt_id = pj.at("prompt_id").get<int>();
        std::string et = pj.at("essay_type").get<std::string>();
        if (et == "argumentative")
            p.essay_type = EssayType::Argumentative;
        else if (et == "source_dependent")
            p.essay_type = EssayType::SourceDependent;
        else if (et == "narrative")
            p.essay_type = EssayType::Narrative;
        else
            throw std::runtime_error("unknown essay type: " + et);
        p.overall_range = {pj.at("overall").at(0).get<int>(), pj.at("overall").at(1).get<int>()};
        p.nominal_count = pj.at("nominal_count").get<int>();
        for (const auto& tj : pj.at("traits")) {
            TraitId t = tj.at("name").get<std::string>();
            p.traits.push_back(t);
            p.trait_range[t] = {tj.at("lo").get<int>(), tj.at("hi").get<int>()};
        }
        s.prompts.push_back(std::move(p));
    }
    s.validate();
    return s;
}

std::uint64_t schema_hash(const Schema& schema) { return json_hash(schema_to_json(schema)); }

namespace {

std::filesystem::path schema_sibling(const std::filesystem::path& path) {
    std::filesystem::path p = path;
    p.replace_extension(".schema.json");
    return p;
}

} // namespace

void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
    std::vector<json> rows;
    rows.reserve(corpus.essays.size());
    for (const auto& e : corpus.essays) {
        json gold = json::object();
        for (const auto& [t, s] : e.gold.entries()) {
            if (s.has_value())
                gold[t] = *s;
            else
                gold[t] = nullptr;
        }
        rows.push_back({{"essay_id", e.essay_id},
                        {"prompt_id", e.prompt_id},
                        {"fold", e.fold},
                        {"latent_quality", e.latent_quality},
                        {"tokens", e.tokens},
                        {"gold", gold}});
    }
    write_jsonl(path, rows);
    atomic_write_file(schema_sibling(path), schema_to_json(corpus.schema).dump(2) + "\n");
}

Corpus load_corpus(const std::filesystem::path& path) {
    Corpus corpus;
    corpus.schema = schema_from_json(json::parse(read_file(schema_sibling(path))));
    const std::vector<TraitId> universe = trait_prediction_order(corpus.schema);
    for (const auto& row : read_jsonl(path)) {
        EssayRecord e;
        e.essay_id = row.at("essay_id").get<std::int64_t>();
        e.prompt_id = row.at("prompt_id").get<int>();
        e.fold = row.at("fold").get<int>();
        e.latent_quality = row.at("latent_quality").get<double>();
        e.tokens = row.at("tokens").get<std::vector<int>>();
        e.gold = TraitScoreVector(universe);
        for (const auto& [t, v] : row.at("gold").items())
            if (!v.is_null()) e.gold.set(t, v.get<int>());
        corpus.essays.push_back(std::move(e));
    }
    return corpus;
}

} // namespace aeslab
