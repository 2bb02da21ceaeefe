#include "support/pipeline.hpp"

#include "costom/harness.hpp"
#include "costom/util.hpp"

#include <gtest/gtest.h>

#include <fstream>

namespace {

using namespace costom;
namespace fs = std::filesystem;

class TempDir {
public:
    explicit TempDir(const std::string& name) : path_(fs::temp_directory_path() / ("costom_" + name)) {
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    const fs::path& path() const { return path_; }

private:
    fs::path path_;
};

std::string error_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const std::exception& e) {
        return e.what();
    }
    return "";
}

TEST(Config, MissingKeysAreNamed) {
    const Config c = Config::parse("[corpus]\nsize = 10\n");
    EXPECT_THROW(c.integer("run.seed"), ConfigError);
    EXPECT_NE(error_of([&] { c.integer("run.seed"); }).find("run.seed"), std::string::npos);
    EXPECT_EQ(c.integer("run.seed", 7), 7);
    EXPECT_EQ(c.integer("corpus.size"), 10);
}

TEST(Config, MalformedValuesAreNamed) {
    const Config c = Config::parse("[steer]\nlr = fast\nlayers = 1,x\nbatch = 4.5\n");
    EXPECT_NE(error_of([&] { c.real("steer.lr"); }).find("steer.lr"), std::string::npos);
    EXPECT_NE(error_of([&] { c.int_list("steer.layers"); }).find("steer.layers"), std::string::npos);
    EXPECT_THROW(c.integer("steer.batch"), ConfigError);
}

TEST(Config, ParsesListsAndFlags) {
    const Config c = Config::parse("[a]\nl = 0, 2,5\nf = true\ng = 0\n");
    EXPECT_EQ(c.int_list("a.l"), (std::vector<int>{0, 2, 5}));
    EXPECT_TRUE(c.flag("a.f", false));
    EXPECT_FALSE(c.flag("a.g", true));
    EXPECT_TRUE(c.flag("a.h", true));
    EXPECT_EQ(c.echo().at("a.l"), "0, 2,5");
}

TEST(Config, RelativePathsFollowTheRoot) {
    const Config plain = Config::parse("[x]\nf = data/a.jsonl\nabs = /tmp/b\n", "/base");
    EXPECT_EQ(plain.path("x.f"), fs::path("/base/data/a.jsonl"));
    EXPECT_EQ(plain.path("x.abs"), fs::path("/tmp/b"));
    const Config rooted = Config::parse("[paths]\nroot = runs\n[x]\nf = data/a.jsonl\n", "/base");
    EXPECT_EQ(rooted.path("x.f"), fs::path("/base/runs/data/a.jsonl"));
}

TEST(Lock, IsExclusiveAndReleased) {
    TempDir dir("lock");
    {
        DirectoryLock a(dir.path());
        EXPECT_THROW(DirectoryLock b(dir.path()), ContractError);
    }
    EXPECT_NO_THROW(DirectoryLock c(dir.path()));
    EXPECT_FALSE(fs::exists(dir.path() / ".costom.lock"));
}

int run_with(const fs::path& dir, const std::string& command, const std::string& ini) {
    std::ofstream(dir / "c.ini") << ini;
    RunOptions o;
    o.out = dir / "out";
    return run_command(command, dir / "c.ini", o);
}

TEST(Commands, ExitCodesFollowTheErrorKind) {
    TempDir dir("codes");
    EXPECT_EQ(run_with(dir.path(), "gen-corpus", "[corpus]\nsize = 10\n"), 2);          // no seed
    EXPECT_EQ(run_with(dir.path(), "gen-corpus", "[run]\nseed = 1\n[corpus]\nsize = 2\n"), 2);
    EXPECT_EQ(run_with(dir.path(), "trace", "[run]\nseed = 1\n[trace]\ncheckpoint = none.bin\n"), 2);
    EXPECT_EQ(run_with(dir.path(), "dance", "[run]\nseed = 1\n"), 2);
    EXPECT_EQ(run_with(dir.path(), "gen-corpus", "[run]\nseed = 1\n[corpus]\nsize = 10\n"), 0);

    // a model without adapters cannot pick its layer from a steered report
    EXPECT_EQ(run_with(dir.path(), "pretrain",
                       "[run]\nseed = 1\n[model]\nn_layers = 2\nd_model = 16\nn_heads = 2\nd_ff = 32\n"
                       "[pretrain]\ncorpus = out/train.jsonl\nsteps = 1\nbatch = 1\n"),
              0);
    fs::rename(dir.path() / "out", dir.path() / "run1");
    EXPECT_EQ(run_with(dir.path(), "generate",
                       "[run]\nseed = 1\n[model]\nn_layers = 2\nd_model = 16\nn_heads = 2\nd_ff = 32\n"
                       "[generate]\ncheckpoint = run1/model.bin\ncorpus = run1/eval.jsonl\nlayer = auto\n"),
              3);
}

TEST(Commands, LockedOutputIsAContractViolation) {
    TempDir dir("locked");
    DirectoryLock held(dir.path() / "out");
    EXPECT_EQ(run_with(dir.path(), "gen-corpus", "[run]\nseed = 1\n[corpus]\nsize = 10\n"), 3);
}

TEST(Commands, ManifestHashesMatchTheFiles) {
    TempDir dir("manifest");
    ASSERT_EQ(run_with(dir.path(), "gen-corpus", "[run]\nseed = 3\n[corpus]\nsize = 12\n"), 0);
    const auto m = nlohmann::json::parse(std::ifstream(dir.path() / "out" / "gen-corpus.manifest.json"));
    EXPECT_EQ(m.at("command"), "gen-corpus");
    EXPECT_EQ(m.at("seeds").at("seed"), 3);
    EXPECT_EQ(m.at("config").at("corpus.size"), "12");
    ASSERT_FALSE(m.at("outputs").empty());
    for (const auto& [name, sha] : m.at("outputs").items()) {
        EXPECT_EQ(file_sha256(dir.path() / "out" / name), sha.get<std::string>()) << name;
    }
}

TEST(Commands, SeedFlagOverridesTheConfig) {
    TempDir dir("seed");
    std::ofstream(dir.path() / "c.ini") << "[run]\nseed = 3\n[corpus]\nsize = 12\n";
    RunOptions o;
    o.out = dir.path() / "a";
    o.seed = 4;
    const RunManifest a = cmd_gen_corpus(Config::load(dir.path() / "c.ini"), o);
    o.out = dir.path() / "b";
    o.seed.reset();
    const RunManifest b = cmd_gen_corpus(Config::load(dir.path() / "c.ini"), o);
    EXPECT_EQ(a.seeds.at("seed"), 4);
    EXPECT_TRUE(a.seeds.at("overridden_by_flag").get<bool>());
    EXPECT_NE(a.outputs.at("corpus.jsonl"), b.outputs.at("corpus.jsonl"));
}

TEST(Pipeline, SameSeedSameArtifacts) {
    TempDir a("pipe_a"), b("pipe_b");
    const auto da = support::run_pipeline(a.path(), support::kTinyPipeline);
    const auto db = support::run_pipeline(b.path(), support::kTinyPipeline);
    EXPECT_EQ(da, db);
    for (const char* f : {"corpus/train.jsonl", "pretrain/model.bin", "trace/trace.csv", "steer/adapters.bin",
                          "steer/history.json", "generate/responses.jsonl", "generate/generation_eval.json"}) {
        EXPECT_TRUE(da.contains(f)) << f;
    }
    const auto steer = nlohmann::json::parse(std::ifstream(a.path() / "steer" / "steer.json"));
    EXPECT_EQ(steer.at("decoder_digest_before"), steer.at("decoder_digest_after"));
}

// ---- generation heuristics ------------------------------------------------------------

std::vector<int> words_to_ids(const std::string& text) { return vocab().tokenize(text); }

TEST(Heuristics, GoldResponseScoresFullMarks) {
    for (const DialogueSample& s : gen_negotiation(41, 10)) {
        const int cut = s.cut();
        const TaskInstruction task = make_task(s, cut);
        const GenerationScores g = score_response(s, cut, task.gold_response);
        EXPECT_EQ(g.tom, 1.0);
        EXPECT_EQ(g.strategy, 1.0);
        EXPECT_GT(g.coherence, 0.0);
    }
}

TEST(Heuristics, OfferingTheWrongItemScoresNoToM) {
    const DialogueSample s = gen_negotiation(42, 1)[0];
    const int cut = s.cut();
    const int agent = s.turns[static_cast<std::size_t>(s.opening_turns)].speaker;
    const auto& partner = s.snapshots[static_cast<std::size_t>(cut - 1)][static_cast<std::size_t>(2 - agent)];
    const GenerationScores wrong = score_response(s, cut, words_to_ids("you take " + partner.desire[2] + " ."));
    EXPECT_EQ(wrong.tom, 0.0);
    EXPECT_EQ(wrong.strategy, 0.5);
    const GenerationScores ask = score_response(s, cut, words_to_ids("what do you need most ?"));
    EXPECT_EQ(ask.strategy, 0.25);
}

TEST(Heuristics, UnknownTokensAreIncoherent) {
    const DialogueSample s = gen_negotiation(43, 1)[0];
    const std::vector<int> unk(5, Vocab::kUnk);
    const GenerationScores g = score_response(s, s.cut(), unk);
    EXPECT_EQ(g.coherence, 0.0);
    EXPECT_EQ(g.tom, 0.0);
    EXPECT_EQ(g.strategy, 0.0);
    EXPECT_EQ(score_response(s, s.cut(), {}).coherence, 0.0);
    EXPECT_THROW(score_response(s, 0, unk), ContractError);
}

TEST(Heuristics, PersuasionAnswersTheBelief) {
    for (const DialogueSample& s : gen_persuasion(44, 10)) {
        const int cut = s.cut();
        const auto& snap = s.snapshots[static_cast<std::size_t>(cut - 1)];
        const std::string target = snap[0].desire[0];
        const GenerationScores rebut = score_response(s, cut, words_to_ids(target + " is cheap ."));
        const GenerationScores ask = score_response(s, cut, words_to_ids("will you take " + target + " ?"));
        if (snap[1].belief == "costly") {
            EXPECT_EQ(rebut.tom, 1.0);
            EXPECT_EQ(ask.tom, 0.0);
        } else {
            EXPECT_EQ(ask.tom, 1.0);
            EXPECT_EQ(rebut.tom, 0.0);
        }
    }
}

TEST(Heuristics, ParsesTheTemplateActs) {
    EXPECT_EQ(parse_response_act(Scenario::negotiation, {"you", "take", "water"}), Act::propose);
    EXPECT_EQ(parse_response_act(Scenario::negotiation, {"deal", "."}), Act::accept);
    EXPECT_EQ(parse_response_act(Scenario::negotiation, {"you"}), std::nullopt);
    EXPECT_EQ(parse_response_act(Scenario::persuasion, {"will", "you", "take", "tea"}), Act::propose);
}

}  // namespace
