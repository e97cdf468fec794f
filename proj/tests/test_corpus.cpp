#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "aeslab/corpus.hpp"

using namespace aeslab;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
    fs::path p = fs::temp_directory_path() / "aeslab_corpus_test";
    fs::create_directories(p);
    return p;
}

} // namespace

TEST_CASE("built-in schema matches the eight-prompt layout") {
    Schema s = load_prompt_schema();
    CHECK(s.prompts.size() == 8);
    const PromptSpec& p5 = s.prompt(5);
    CHECK(p5.traits == std::vector<TraitId>{"over", "cont", "pa", "lang", "nar"});
    for (const auto& t : p5.traits) {
        CHECK(p5.range_of(t).lo == 0);
        CHECK(p5.range_of(t).hi == 4);
    }
    CHECK(s.prompt(8).overall_range.lo == 0);
    CHECK(s.prompt(8).overall_range.hi == 60);
    CHECK(s.prompt(8).range_of("cont").lo == 2);
    CHECK(s.prompt(8).range_of("cont").hi == 12);
    CHECK(s.prompt(1).overall_range.lo == 2);
    CHECK(s.prompt(1).overall_range.hi == 12);
    CHECK(s.prompt(1).range_of("org").lo == 1);
    CHECK(s.prompt(1).range_of("org").hi == 6);
    for (int pid = 1; pid <= 8; ++pid) {
        bool has_style = s.prompt(pid).has_trait("style");
        CHECK(has_style == (pid == 7));
    }
    CHECK(s.prompt(8).has_trait("voice"));
    CHECK(s.pooled_range().lo == 0);
    CHECK(s.pooled_range().hi == 60);
    CHECK_NOTHROW(s.validate());
}

TEST_CASE("trait prediction order ascends by essay count") {
    Schema s = load_prompt_schema();
    std::vector<TraitId> expect{"voice", "style", "sf",  "wc",   "conv", "org",
                                "lang",  "nar",   "pa",  "cont", "over"};
    CHECK(trait_prediction_order(s) == expect);

    // Equal-count ties break by name; "over" stays last regardless.
    Schema tiny;
    PromptSpec p;
    p.prompt_id = 1;
    p.essay_type = EssayType::Narrative;
    p.traits = {"over", "b", "a"};
    p.trait_range["over"] = {0, 4};
    p.trait_range["b"] = {0, 4};
    p.trait_range["a"] = {0, 4};
    p.overall_range = {0, 4};
    p.nominal_count = 10;
    tiny.prompts.push_back(p);
    CHECK(trait_prediction_order(tiny) == std::vector<TraitId>{"a", "b", "over"});
}

TEST_CASE("vocabulary layout and lookups") {
    Schema s = load_prompt_schema();
    Vocabulary v = build_vocab(s);
    CHECK(v.try_id("voice") >= 0);
    CHECK(v.try_id("nan") == v.nan_id());
    CHECK(v.try_id("60") >= 0);
    CHECK(v.try_id("61") == -1);
    for (int id = 0; id < v.size(); ++id) CHECK(v.id(v.token(id)) == id);
    for (int val = 0; val <= 60; ++val) CHECK(v.score_value(v.score_id(val)) == val);
    CHECK_THROWS_AS(v.score_id(61), std::out_of_range);
    CHECK_THROWS_AS((void)v.id("no-such-token"), std::out_of_range);

    Vocabulary v2 = build_vocab(s);
    CHECK(v.size() == v2.size());
    CHECK(v.content_hash() == v2.content_hash());

    std::vector<int> prefix = v.scoring_prefix(3);
    CHECK(prefix.size() == 8);
    CHECK(v.token(prefix[0]) == "score");
    CHECK(v.token(prefix[6]) == "<p3>");
    CHECK(v.token(prefix[7]) == ":");

    // trait and score token classification
    CHECK(v.is_trait_token(v.trait_id_token("over")));
    CHECK_FALSE(v.is_trait_token(v.score_id(2)));
    CHECK(v.is_score_token(v.score_id(0)));
    CHECK_FALSE(v.is_score_token(v.eos_id()));

    // body-word folding stays inside the body region
    int wid = v.body_word_id("electrophoresis");
    CHECK(wid >= v.marker_id());
    CHECK(v.body_word_id("vivid") == v.marker_id());
}

TEST_CASE("generator honors the latent-quality construction") {
    Schema s = load_prompt_schema();
    CorpusConfig cfg;
    cfg.seed = 11;
    cfg.essays_per_prompt = 30;
    cfg.noise_sigma = 0.0;
    Corpus c = generate_corpus(s, cfg);
    CHECK(c.essays.size() == 8u * 30u);

    Vocabulary v = build_vocab(s);
    for (const auto& e : c.essays) {
        const PromptSpec& prompt = s.prompt(e.prompt_id);
        // noiseless scores are the rounded affine map of q
        for (const auto& t : prompt.traits) {
            const ScoreRange& r = prompt.range_of(t);
            int expect = static_cast<int>(
                std::lround(r.lo + e.latent_quality * (r.hi - r.lo)));
            expect = std::clamp(expect, r.lo, r.hi);
            CHECK(e.gold.get(t) == expect);
        }
        for (const auto& [t, sc] : e.gold.entries())
            if (!prompt.has_trait(t)) CHECK_FALSE(sc.has_value());
        // body starts with the scoring prefix
        std::vector<int> prefix = v.scoring_prefix(e.prompt_id);
        REQUIRE(e.tokens.size() > prefix.size());
        CHECK(std::equal(prefix.begin(), prefix.end(), e.tokens.begin()));
        // marker count equals round(q * body_len)
        auto body_begin = e.tokens.begin() + static_cast<std::ptrdiff_t>(prefix.size());
        long body_len = e.tokens.end() - body_begin;
        CHECK(body_len >= cfg.body_len_min);
        CHECK(body_len <= cfg.body_len_max);
        long markers = std::count(body_begin, e.tokens.end(), v.marker_id());
        CHECK(markers == std::lround(e.latent_quality * static_cast<double>(body_len)));
    }

    // Noiseless gold scores never rank-invert against latent quality:
    // sorting by q makes every trait's score sequence non-decreasing.
    for (const auto& prompt : s.prompts) {
        std::vector<const EssayRecord*> slice;
        for (const auto& e : c.essays)
            if (e.prompt_id == prompt.prompt_id) slice.push_back(&e);
        std::sort(slice.begin(), slice.end(), [](const auto* a, const auto* b) {
            return a->latent_quality < b->latent_quality;
        });
        for (const auto& t : prompt.traits)
            for (std::size_t i = 1; i < slice.size(); ++i)
                CHECK(*slice[i - 1]->gold.get(t) <= *slice[i]->gold.get(t));
    }
}

TEST_CASE("generator determinism and noise clamping") {
    Schema s = load_prompt_schema();
    CorpusConfig cfg;
    cfg.seed = 4;
    cfg.essays_per_prompt = 12;
    cfg.noise_sigma = 3.0; // extreme noise must still clamp into range
    Corpus a = generate_corpus(s, cfg);
    Corpus b = generate_corpus(s, cfg);
    REQUIRE(a.essays.size() == b.essays.size());
    for (std::size_t i = 0; i < a.essays.size(); ++i) {
        CHECK(a.essays[i].tokens == b.essays[i].tokens);
        CHECK(a.essays[i].gold == b.essays[i].gold);
        CHECK(a.essays[i].latent_quality == b.essays[i].latent_quality);
    }
    for (const auto& e : a.essays) {
        const PromptSpec& prompt = s.prompt(e.prompt_id);
        for (const auto& t : prompt.traits) {
            int sc = *e.gold.get(t);
            CHECK(prompt.range_of(t).contains(sc));
        }
    }
    cfg.seed = 5;
    Corpus d = generate_corpus(s, cfg);
    bool any_diff = false;
    for (std::size_t i = 0; i < a.essays.size(); ++i)
        if (a.essays[i].tokens != d.essays[i].tokens) any_diff = true;
    CHECK(any_diff);

    CorpusConfig bad = cfg;
    bad.essays_per_prompt = 5;
    CHECK_THROWS_AS(generate_corpus(s, bad), std::invalid_argument);
    bad = cfg;
    bad.body_len_min = 2;
    CHECK_THROWS_AS(generate_corpus(s, bad), std::invalid_argument);
    bad = cfg;
    bad.noise_sigma = -0.1;
    CHECK_THROWS_AS(generate_corpus(s, bad), std::invalid_argument);
}

TEST_CASE("target serialization layout") {
    Schema s = load_prompt_schema();
    Vocabulary v = build_vocab(s);
    auto order = trait_prediction_order(s);
    TraitScoreVector gold(order);
    gold.set("over", 2);
    gold.set("cont", 1);
    gold.set("pa", 2);
    gold.set("lang", 3);
    gold.set("nar", 2);
    std::vector<int> seq = serialize_targets(gold, s.prompt(3), v, order);
    std::vector<std::string> words;
    for (int id : seq) words.push_back(v.token(id));
    std::vector<std::string> expect{"voice", "nan", "style", "nan",  "sf",  "nan", "wc",  "nan",
                                    "conv",  "nan", "org",   "nan",  "lang", "3",  "nar", "2",
                                    "pa",    "2",   "cont",  "1",    "over", "2",  "[eos]"};
    CHECK(words == expect);

    // empty order degenerates to just the terminator
    TraitScoreVector none(std::vector<TraitId>{});
    std::vector<int> eos_only = serialize_targets(none, s.prompt(3), v, {});
    CHECK(eos_only == std::vector<int>{v.eos_id()});

    // a scored trait missing from the order is an internal error
    TraitScoreVector rogue(std::vector<TraitId>{"cont"});
    rogue.set("cont", 1);
    CHECK_THROWS_AS(serialize_targets(rogue, s.prompt(3), v, {}), std::logic_error);
}

TEST_CASE("serialize/parse round trip over random vectors") {
    Schema s = load_prompt_schema();
    Vocabulary v = build_vocab(s);
    auto order = trait_prediction_order(s);
    std::mt19937_64 rng(101);
    for (int iter = 0; iter < 300; ++iter) {
        int pid = 1 + static_cast<int>(rng() % 8);
        const PromptSpec& prompt = s.prompt(pid);
        TraitScoreVector gold(order);
        for (const auto& t : prompt.traits) {
            if (rng() % 10 == 0) continue; // occasionally unset (missing cell)
            const ScoreRange& r = prompt.range_of(t);
            std::uniform_int_distribution<int> val(r.lo, r.hi);
            gold.set(t, val(rng));
        }
        std::vector<int> seq = serialize_targets(gold, prompt, v, order);
        ParseResult res = parse_scores(seq, prompt, v, order);
        REQUIRE(res.ok);
        CHECK(res.failure == ParseFailureKind::None);
        CHECK(res.scores == gold);
    }
}

TEST_CASE("parser flags every single-token corruption") {
    Schema s = load_prompt_schema();
    Vocabulary v = build_vocab(s);
    auto order = trait_prediction_order(s);
    const PromptSpec& prompt = s.prompt(5);
    TraitScoreVector gold(order);
    for (const auto& t : prompt.traits) gold.set(t, 2);
    std::vector<int> seq = serialize_targets(gold, prompt, v, order);

    // score 7 for a 0-4 trait
    std::vector<int> bad = seq;
    for (std::size_t i = 0; i < bad.size(); ++i) {
        if (v.token(bad[i]) == "pa") {
            bad[i + 1] = v.score_id(7);
            break;
        }
    }
    ParseResult out_of_range = parse_scores(bad, prompt, v, order);
    CHECK_FALSE(out_of_range.ok);
    CHECK(out_of_range.failure == ParseFailureKind::OutOfRange);

    // truncation before the final trait: everything before it still parsed
    std::vector<int> cut(seq.begin(), seq.end() - 3); // drops "over 2 [eos]"
    ParseResult trunc = parse_scores(cut, prompt, v, order);
    CHECK_FALSE(trunc.ok);
    CHECK(trunc.failure == ParseFailureKind::Truncated);
    CHECK(trunc.scores.get("cont") == 2);
    CHECK_FALSE(trunc.scores.get("over").has_value());

    // Exhaustive single-token corruptions: every substitution that breaks
    // the format must be flagged at its position. Replacing a score with
    // another in-range score or with nan yields a different but still
    // valid sequence, so those are skipped.
    std::vector<int> substitutes = {v.trait_id_token("cont"), v.score_id(0), v.score_id(60),
                                    v.eos_id(), v.nan_id(), v.marker_id()};
    auto keeps_sequence_valid = [&](std::size_t pos, int sub) {
        if (pos == seq.size() - 1) return sub == v.eos_id();
        if (pos % 2 == 0) return sub == seq[pos]; // trait slot
        const TraitId& t = order[pos / 2];
        if (sub == v.nan_id()) return true;
        return v.is_score_token(sub) && prompt.has_trait(t) &&
               prompt.range_of(t).contains(v.score_value(sub));
    };
    for (std::size_t pos = 0; pos < seq.size(); ++pos) {
        for (int sub : substitutes) {
            if (seq[pos] == sub) continue;
            if (keeps_sequence_valid(pos, sub)) {
                std::vector<int> mut = seq;
                mut[pos] = sub;
                CHECK(parse_scores(mut, prompt, v, order).ok);
                continue;
            }
            std::vector<int> mut = seq;
            mut[pos] = sub;
            ParseResult res = parse_scores(mut, prompt, v, order);
            CHECK_FALSE(res.ok);
            CHECK(res.failure != ParseFailureKind::None);
            CHECK(res.failure_position == pos);
        }
    }

    // wrong trait at the very first position leaves nothing parsed
    std::vector<int> head = seq;
    head[0] = v.trait_id_token("over");
    ParseResult wrong = parse_scores(head, prompt, v, order);
    CHECK(wrong.failure == ParseFailureKind::WrongTraitToken);
    CHECK(wrong.failure_position == 0);
    for (const auto& [_, sc] : wrong.scores.entries()) CHECK_FALSE(sc.has_value());

    // numeric score for a trait this prompt does not evaluate
    std::vector<int> rogue = seq;
    rogue[1] = v.score_id(3); // "voice" slot, prompt 5 has no voice
    ParseResult nonprompt = parse_scores(rogue, prompt, v, order);
    CHECK_FALSE(nonprompt.ok);
    CHECK(nonprompt.failure == ParseFailureKind::OutOfRange);

    // missing-score kind: trait token where a score belongs
    std::vector<int> noscore = seq;
    noscore[1] = v.trait_id_token("style");
    ParseResult missing = parse_scores(noscore, prompt, v, order);
    CHECK(missing.failure == ParseFailureKind::MissingScore);
}

TEST_CASE("fold assignment is a stratified partition") {
    Schema s = load_prompt_schema();
    CorpusConfig cfg;
    cfg.seed = 2;
    cfg.essays_per_prompt = 100;
    Corpus c = generate_corpus(s, cfg);
    make_folds(c, 5, 99);
    std::map<int, std::map<int, int>> per_prompt_fold;
    for (const auto& e : c.essays) {
        REQUIRE(e.fold >= 0);
        REQUIRE(e.fold < 5);
        per_prompt_fold[e.prompt_id][e.fold]++;
    }
    for (const auto& [pid, folds] : per_prompt_fold) {
        CHECK(folds.size() == 5);
        for (const auto& [_, n] : folds) CHECK(n == 20);
    }

    Corpus c2 = generate_corpus(s, cfg);
    make_folds(c2, 5, 99);
    for (std::size_t i = 0; i < c.essays.size(); ++i)
        CHECK(c.essays[i].fold == c2.essays[i].fold);
    CHECK(fold_split_hash(c) == fold_split_hash(c2));

    make_folds(c2, 5, 100);
    CHECK(fold_split_hash(c) != fold_split_hash(c2));

    // uneven division: sizes differ by at most one inside each prompt
    CorpusConfig odd = cfg;
    odd.essays_per_prompt = 53;
    Corpus c3 = generate_corpus(s, odd);
    make_folds(c3, 5, 7);
    std::map<int, std::map<int, int>> sizes;
    for (const auto& e : c3.essays) sizes[e.prompt_id][e.fold]++;
    for (const auto& [_, folds] : sizes) {
        int lo = 1 << 30, hi = 0;
        for (const auto& [__, n] : folds) {
            lo = std::min(lo, n);
            hi = std::max(hi, n);
        }
        CHECK(hi - lo <= 1);
    }
    CHECK_THROWS_AS(make_folds(c3, 1, 7), std::invalid_argument);
}

TEST_CASE("corpus save/load round trip") {
    Schema s = load_prompt_schema();
    CorpusConfig cfg;
    cfg.seed = 21;
    cfg.essays_per_prompt = 10;
    Corpus c = generate_corpus(s, cfg);
    make_folds(c, 5, 3);
    fs::path path = temp_dir() / "roundtrip.jsonl";
    save_corpus(c, path);
    Corpus back = load_corpus(path);
    REQUIRE(back.essays.size() == c.essays.size());
    for (std::size_t i = 0; i < c.essays.size(); ++i) {
        CHECK(back.essays[i].essay_id == c.essays[i].essay_id);
        CHECK(back.essays[i].prompt_id == c.essays[i].prompt_id);
        CHECK(back.essays[i].fold == c.essays[i].fold);
        CHECK(back.essays[i].tokens == c.essays[i].tokens);
        CHECK(back.essays[i].gold == c.essays[i].gold);
    }
    CHECK(schema_hash(back.schema) == schema_hash(c.schema));

    // idempotent re-save produces identical bytes
    std::string first = read_file(path);
    save_corpus(back, path);
    CHECK(read_file(path) == first);
}

TEST_CASE("tsv ingestion maps rows and rejects bad scores") {
    Schema s = load_prompt_schema();
    Vocabulary v = build_vocab(s);
    fs::path dir = temp_dir();

    fs::path good = dir / "good.tsv";
    {
        std::ofstream out(good);
        out << "essay_id\tprompt_id\tessay\tover\tcont\tpa\tlang\tnar\n";
        out << "11\t3\tthe quick brown fox\t2\t1\t2\t3\t2\n";
        out << "12\t3\tanother essay entirely\t1\t\t0\t1\t1\n";
    }
    Corpus c = ingest_external_corpus(good, s, v);
    REQUIRE(c.essays.size() == 2);
    CHECK(c.essays[0].essay_id == 11);
    CHECK(c.essays[0].gold.get("pa") == 2);
    CHECK_FALSE(c.essays[1].gold.get("cont").has_value()); // empty cell -> unset
    CHECK_FALSE(c.essays[0].gold.get("style").has_value());
    std::vector<int> prefix = v.scoring_prefix(3);
    CHECK(std::equal(prefix.begin(), prefix.end(), c.essays[0].tokens.begin()));
    CHECK(c.essays[0].tokens.size() == prefix.size() + 4);

    // prompt-7 file without a style column: style simply stays unset
    fs::path p7 = dir / "p7.tsv";
    {
        std::ofstream out(p7);
        out << "essay_id\tprompt_id\tessay\tover\tcont\torg\tconv\n";
        out << "21\t7\tshort tale\t15\t3\t3\t2\n";
    }
    Corpus c7 = ingest_external_corpus(p7, s, v);
    CHECK_FALSE(c7.essays[0].gold.get("style").has_value());
    CHECK(c7.essays[0].gold.get("over") == 15);

    fs::path bad_range = dir / "bad_range.tsv";
    {
        std::ofstream out(bad_range);
        out << "essay_id\tprompt_id\tessay\tpa\n";
        out << "31\t3\twords here\t9\n";
    }
    CHECK_THROWS_WITH_AS(ingest_external_corpus(bad_range, s, v),
                         doctest::Contains("line 2"), std::runtime_error);

    fs::path bad_cells = dir / "bad_cells.tsv";
    {
        std::ofstream out(bad_cells);
        out << "essay_id\tprompt_id\tessay\tpa\n";
        out << "41\t3\twords\t1\textra\n";
    }
    CHECK_THROWS_WITH_AS(ingest_external_corpus(bad_cells, s, v),
                         doctest::Contains("line 2"), std::runtime_error);

    fs::path bad_header = dir / "bad_header.tsv";
    {
        std::ofstream out(bad_header);
        out << "id\tprompt\tbody\n";
    }
    CHECK_THROWS_AS(ingest_external_corpus(bad_header, s, v), std::runtime_error);
}
