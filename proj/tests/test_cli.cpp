#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "aeslab/cli.hpp"

using namespace aeslab;
namespace fs = std::filesystem;

namespace {

struct ScopedDir {
    fs::path path;
    explicit ScopedDir(const std::string& tag) {
        path = fs::temp_directory_path() /
               ("aeslab_cli_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~ScopedDir() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
};

// Desk-scale flags shared by every command test.
std::vector<std::string> tiny_flags(const std::string& out) {
    return {"--out", out,
            "--folds", "2",
            "--corpus.essays_per_prompt", "10",
            "--corpus.body_len_min", "4",
            "--corpus.body_len_max", "8",
            "--pretrain.epochs", "2",
            "--pretrain.model.d_model", "16",
            "--pretrain.model.n_heads", "2",
            "--pretrain.model.n_enc_layers", "1",
            "--pretrain.model.n_dec_layers", "1",
            "--pretrain.model.d_ff", "24",
            "--pretrain.model.max_enc_len", "0",
            "--pretrain.model.max_dec_len", "24",
            "--trainer.updates", "1",
            "--trainer.batch_size", "2",
            "--trainer.ppo_epochs", "1"};
}

int run(std::vector<std::string> args, const std::vector<std::string>& tail) {
    args.insert(args.end(), tail.begin(), tail.end());
    return run_cli(args);
}

json read_json(const fs::path& p) { return json::parse(read_file(p)); }

} // namespace

TEST_CASE("gen-corpus writes a loadable corpus, folds, and a manifest") {
    ScopedDir dir("gen");
    REQUIRE(run(tiny_flags(dir.str()), {"--seed", "7", "gen-corpus"}) == 0);

    Corpus corpus = load_corpus(dir.path / "corpus.jsonl");
    CHECK(corpus.essays.size() == 80);
    for (const EssayRecord& e : corpus.essays) CHECK((e.fold == 0 || e.fold == 1));

    json m = read_json(dir.path / "manifest.gen-corpus.json");
    CHECK(m.at("command") == "gen-corpus");
    CHECK(m.at("ok") == true);
    CHECK(m.at("seed") == 7);
    for (const auto& a : m.at("artifacts")) CHECK(fs::exists(a.get<std::string>()));

    // Same seed, run again: artifact bytes identical, manifests fingerprint
    // identically even though their timestamps may differ.
    std::string corpus_bytes = read_file(dir.path / "corpus.jsonl");
    REQUIRE(run(tiny_flags(dir.str()), {"--seed", "7", "gen-corpus"}) == 0);
    CHECK(read_file(dir.path / "corpus.jsonl") == corpus_bytes);
    json m2 = read_json(dir.path / "manifest.gen-corpus.json");
    CHECK(manifest_fingerprint(m) == manifest_fingerprint(m2));
}

TEST_CASE("config files configure sections and the command line overrides them") {
    ScopedDir dir("cfg");
    fs::path ini = dir.path / "cfg.ini";
    atomic_write_file(ini, "folds=2\n# comment\n[corpus]\nessays_per_prompt=10\n"
                           "body_len_min=4\nbody_len_max=8\n");

    REQUIRE(run_cli({"--config", ini.string(), "--out", dir.str(), "gen-corpus"}) == 0);
    CHECK(load_corpus(dir.path / "corpus.jsonl").essays.size() == 80);
    json m = read_json(dir.path / "manifest.gen-corpus.json");
    CHECK(m.at("config_path") == ini.string());
    CHECK(m.at("config_hash") == hash_hex(fnv1a64(read_file(ini))));

    // A flag given alongside the file wins.
    REQUIRE(run_cli({"--config", ini.string(), "--corpus.essays_per_prompt", "12", "--out",
                     dir.str(), "gen-corpus"}) == 0);
    CHECK(load_corpus(dir.path / "corpus.jsonl").essays.size() == 96);

    CHECK(run_cli({"--config", (dir.path / "missing.ini").string(), "gen-corpus"}) != 0);
    atomic_write_file(dir.path / "bad.ini", "no_such_key=1\n");
    CHECK(run_cli({"--config", (dir.path / "bad.ini").string(), "gen-corpus"}) != 0);
    atomic_write_file(dir.path / "broken.ini", "just a line\n");
    CHECK(run_cli({"--config", (dir.path / "broken.ini").string(), "gen-corpus"}) != 0);
}

TEST_CASE("pretrain produces a checkpoint the other commands can consume") {
    ScopedDir dir("pre");
    REQUIRE(run(tiny_flags(dir.str()), {"gen-corpus"}) == 0);
    REQUIRE(run(tiny_flags(dir.str()), {"pretrain", "--fold", "0"}) == 0);

    fs::path ckpt = dir.path / "pretrain.fold0.ckpt.json";
    REQUIRE(fs::exists(ckpt));
    Corpus corpus = load_corpus(dir.path / "corpus.jsonl");
    Vocabulary vocab = build_vocab(corpus.schema);
    CheckpointMeta meta;
    Model m = load_checkpoint(ckpt.string(), schema_hash(corpus.schema), vocab.content_hash(),
                              &meta);
    CHECK(m.cfg.d_model == 16);
    CHECK(meta.hyperparams.at("fold") == 0);

    std::vector<json> curve = read_jsonl(dir.path / "pretrain.fold0.curve.jsonl");
    CHECK(curve.size() >= 2); // step-0 evaluation plus at least the final one
    for (const json& row : curve) CHECK(row.contains("dev_ce"));

    json man = read_json(dir.path / "manifest.pretrain.json");
    CHECK(man.at("ok") == true);
    CHECK(man.at("extra").at("best_dev_ce").get<double>() > 0.0);
}

TEST_CASE("train honors variant selection and flag overrides") {
    ScopedDir dir("trn");
    REQUIRE(run(tiny_flags(dir.str()), {"gen-corpus"}) == 0);
    REQUIRE(run(tiny_flags(dir.str()), {"pretrain", "--fold", "0"}) == 0);

    REQUIRE(run(tiny_flags(dir.str()),
                {"train", "--fold", "0", "--variant", "sasrl-m", "--beta", "0.03",
                 "--updates", "2", "--seed", "77"}) == 0);

    fs::path ckpt = dir.path / "train.sasrl-m.fold0.ckpt.json";
    fs::path log = dir.path / "train.sasrl-m.fold0.log.jsonl";
    REQUIRE(fs::exists(ckpt));
    REQUIRE(fs::exists(log));

    json cj = read_json(ckpt);
    CHECK(cj.at("hyperparams").at("variant") == "sasrl-m");
    CHECK(cj.at("hyperparams").at("trainer").at("beta").get<double>() == 0.03);
    CHECK(cj.at("hyperparams").at("trainer").at("updates") == 2);
    CHECK(cj.at("hyperparams").at("trainer").at("seed") == 77);

    // Kappa channel disabled: its loss contributes nothing, weights pinned.
    std::vector<json> rows = read_jsonl(log);
    REQUIRE(rows.size() == 2);
    for (const json& row : rows) {
        CHECK(row.at("loss_q").get<double>() == 0.0);
        CHECK(row.at("w_q").get<double>() == 0.0);
        CHECK(row.at("w_m").get<double>() == 1.0);
    }

    CHECK(run(tiny_flags(dir.str()), {"train", "--variant", "baseline"}) != 0);
    CHECK(run(tiny_flags(dir.str()), {"train", "--variant", "nonsense"}) != 0);
}

TEST_CASE("eval reports kappa, self-tests the gold targets, and refuses mismatched schemas") {
    ScopedDir dir("evl");
    REQUIRE(run(tiny_flags(dir.str()), {"gen-corpus"}) == 0);
    REQUIRE(run(tiny_flags(dir.str()), {"pretrain", "--fold", "0"}) == 0);

    REQUIRE(run(tiny_flags(dir.str()), {"eval", "--fold", "0"}) == 0);
    json rep = read_json(dir.path / "eval.fold0.report.json");
    CHECK(rep.at("sample_count") == 40);
    CHECK(fs::exists(dir.path / "eval.fold0.traits.csv"));
    CHECK(fs::exists(dir.path / "eval.fold0.prompts.csv"));

    REQUIRE(run(tiny_flags(dir.str()), {"eval", "--fold", "-1", "--gold-self-test"}) == 0);
    json gold = read_json(dir.path / "eval.gold.all.report.json");
    CHECK(gold.at("sample_count") == 80);
    CHECK(gold.at("average_qwk").get<double>() == 1.0);
    CHECK(gold.at("parse_failure_rate").get<double>() == 0.0);
    for (const json& row : gold.at("traits"))
        CHECK(row.at("avg").get<double>() == 1.0);

    // A checkpoint whose schema stamp disagrees with the corpus is refused.
    fs::path ckpt = dir.path / "pretrain.fold0.ckpt.json";
    json cj = read_json(ckpt);
    cj["schema_hash"] = hash_hex(0xdeadbeefULL);
    atomic_write_file(ckpt, cj.dump());
    CHECK(run(tiny_flags(dir.str()), {"eval", "--fold", "0"}) != 0);
}

TEST_CASE("repeated commands reproduce artifacts byte for byte") {
    ScopedDir dir("det");
    REQUIRE(run(tiny_flags(dir.str()), {"gen-corpus"}) == 0);
    REQUIRE(run(tiny_flags(dir.str()), {"pretrain", "--fold", "0"}) == 0);
    std::string ckpt_bytes = read_file(dir.path / "pretrain.fold0.ckpt.json");

    REQUIRE(run(tiny_flags(dir.str()), {"train", "--fold", "0"}) == 0);
    std::string rl_ckpt = read_file(dir.path / "train.samrl-biq.fold0.ckpt.json");
    std::string rl_log = read_file(dir.path / "train.samrl-biq.fold0.log.jsonl");

    REQUIRE(run(tiny_flags(dir.str()), {"eval", "--fold", "0", "--checkpoint",
                                        (dir.path / "train.samrl-biq.fold0.ckpt.json").string()}) ==
            0);
    std::string eval_rep = read_file(dir.path / "eval.fold0.report.json");

    // Re-run the whole chain: every artifact byte-identical.
    REQUIRE(run(tiny_flags(dir.str()), {"pretrain", "--fold", "0"}) == 0);
    CHECK(read_file(dir.path / "pretrain.fold0.ckpt.json") == ckpt_bytes);
    REQUIRE(run(tiny_flags(dir.str()), {"train", "--fold", "0"}) == 0);
    CHECK(read_file(dir.path / "train.samrl-biq.fold0.ckpt.json") == rl_ckpt);
    CHECK(read_file(dir.path / "train.samrl-biq.fold0.log.jsonl") == rl_log);
    REQUIRE(run(tiny_flags(dir.str()), {"eval", "--fold", "0", "--checkpoint",
                                        (dir.path / "train.samrl-biq.fold0.ckpt.json").string()}) ==
            0);
    CHECK(read_file(dir.path / "eval.fold0.report.json") == eval_rep);
}

TEST_CASE("ablate renders the full grid with the primary variant marked") {
    ScopedDir dir("abl");
    REQUIRE(run(tiny_flags(dir.str()), {"ablate"}) == 0);

    const auto& variants = ablation_variants();
    REQUIRE(variants.size() == 9);
    for (const std::string& v : variants) {
        CHECK(fs::exists(dir.path / "ablate" / (variant_slug(v) + ".report.json")));
        CHECK(fs::exists(dir.path / "ablate" / (variant_slug(v) + ".done")));
    }
    std::string cmp = read_file(dir.path / "ablate" / "comparison.csv");
    CHECK(cmp.find("samrl-biq,yes") != std::string::npos);
    CHECK(cmp.find("baseline,no") != std::string::npos);
    int rows = 0;
    for (char c : cmp)
        if (c == '\n') ++rows;
    CHECK(rows == 10); // header + nine variants

    json man = read_json(dir.path / "manifest.ablate.json");
    CHECK(man.at("ok") == true);
    CHECK(man.at("extra").at("failed").empty());

    // Worker mode must reproduce the sequential bytes exactly.
    ScopedDir dir2("ablw");
    ::setenv("AESLAB_WORKERS", "2", 1);
    int rc = run(tiny_flags(dir2.str()), {"ablate"});
    ::unsetenv("AESLAB_WORKERS");
    REQUIRE(rc == 0);
    for (const std::string& v : variants) {
        std::string name = variant_slug(v) + ".report.json";
        CHECK(read_file(dir2.path / "ablate" / name) ==
              read_file(dir.path / "ablate" / name));
    }
    CHECK(read_file(dir2.path / "ablate" / "comparison.csv") == cmp);
}

TEST_CASE("report re-renders stored aggregates") {
    ScopedDir dir("rpt");
    REQUIRE(run(tiny_flags(dir.str()), {"ablate"}) == 0);

    std::string base = (dir.path / "ablate" / "baseline.report.json").string();
    std::string biq = (dir.path / "ablate" / "samrl-biq.report.json").string();
    REQUIRE(run_cli({"--out", (dir.path / "rendered").string(), "report", base, biq}) == 0);
    CHECK(fs::exists(dir.path / "rendered" / "report.traits.csv"));
    CHECK(fs::exists(dir.path / "rendered" / "report.prompts.csv"));
    CHECK(fs::exists(dir.path / "rendered" / "report.comparison.csv"));

    // Without the baseline among the inputs the comparison table is skipped.
    REQUIRE(run_cli({"--out", (dir.path / "nobase").string(), "report", biq}) == 0);
    CHECK(fs::exists(dir.path / "nobase" / "report.traits.csv"));
    CHECK_FALSE(fs::exists(dir.path / "nobase" / "report.comparison.csv"));

    CHECK(run_cli({"--out", dir.str(), "report",
                   (dir.path / "nowhere.json").string()}) != 0);
}

TEST_CASE("naming helpers are stable") {
    CHECK(variant_slug("fixed:0.5,0.5") == "fixed-0.5_0.5");
    CHECK(variant_slug("samrl-biq") == "samrl-biq");
    std::string ts = utc_timestamp();
    CHECK(ts.size() == 20);
    CHECK(ts.back() == 'Z');

    RunManifest m;
    m.command = "train";
    m.seed = 3;
    m.started_at = "2026-01-01T00:00:00Z";
    m.finished_at = "2026-01-01T00:00:05Z";
    json j1 = m.to_json();
    m.started_at = "2027-07-07T07:07:07Z";
    json j2 = m.to_json();
    CHECK(manifest_fingerprint(j1) == manifest_fingerprint(j2));
    CHECK(j1.dump() != j2.dump());

    RunManifest back = RunManifest::from_json(j1);
    CHECK(back.to_json().dump() == j1.dump());
}
