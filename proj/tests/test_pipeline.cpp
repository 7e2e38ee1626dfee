#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "json.hpp"
#include "wqe/error.hpp"
#include "wqe/jsonl.hpp"
#include "wqe/pipeline.hpp"
#include "wqe/trace_io.hpp"

using namespace wqe;
namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / ("wqe_test_pipeline_" + std::to_string(getpid()));

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(WQE_CLI_PATH) + " " + args + " >/dev/null 2>" + (kRoot / "stderr.txt").string();
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

DeskGenOptions small_corpus(const fs::path& out) {
  DeskGenOptions o;
  o.seed = 5;
  o.segments = 40;
  o.inject_errors = 2;
  o.annotators = 3;
  o.label_noise = 0.05;
  o.languages = {"en-de", "en-it"};
  o.class_probs = true;
  o.out_dir = out;
  return o;
}

class Pipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    fs::remove_all(kRoot);
    fs::create_directories(kRoot);
    cmd_desk_gen(small_corpus(kRoot / "corpus"));
    ScoreRunOptions s;
    s.traces = kRoot / "corpus" / kTracesFile;
    s.out_dir = kRoot / "scores";
    s.flip = {"pred_depth"};
    s.threads = 2;
    cmd_score(s);
  }
  static void TearDownTestSuite() { fs::remove_all(kRoot); }

  static EvaluateOptions eval_options(const fs::path& out) {
    EvaluateOptions e;
    e.annotations = kRoot / "corpus" / kAnnotationsFile;
    e.traces = kRoot / "corpus" / kTracesFile;
    e.scores_dir = kRoot / "scores";
    e.class_probs = kRoot / "corpus" / kClassProbsFile;
    e.trials = 200;
    e.seed = 1;
    e.out_dir = out;
    return e;
  }
};

}  // namespace

TEST(DeskGen, CorpusShape) {
  auto o = small_corpus({});
  o.annotators = 2;
  const auto corpus = desk_corpus(o);
  ASSERT_EQ(corpus.size(), 40u);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& s = corpus[i];
    EXPECT_EQ(s.language, o.languages[i % 2]);
    EXPECT_GE(s.source_ids.size(), o.min_source_length);
    EXPECT_LE(s.source_ids.size(), o.max_source_length);
    EXPECT_GE(s.target_ids.size(), o.min_target_length);
    EXPECT_LE(s.target_ids.size(), o.max_target_length);
    EXPECT_EQ(std::count(s.corrupted.begin(), s.corrupted.end(), 1), 2);
    ASSERT_EQ(s.severity.size(), s.corrupted.size());
    for (std::size_t j = 0; j < s.severity.size(); ++j) {
      if (s.corrupted[j] == 0) {
        EXPECT_EQ(s.severity[j], 0.0);
      }
      EXPECT_GE(s.severity[j], 0.0);
      EXPECT_LT(s.severity[j], 1.0);
    }
  }
  const auto again = desk_corpus(o);
  EXPECT_EQ(again[7].target_ids, corpus[7].target_ids);
  o.seed = 6;
  EXPECT_NE(desk_corpus(o)[7].target_ids, corpus[7].target_ids);
}

TEST(DeskGen, NoiseFreeAnnotatorsMarkExactlyTheCorruptions) {
  auto o = small_corpus({});
  o.label_noise = 0.0;
  o.class_probs = false;
  const auto result = desk_generate(o);
  EXPECT_TRUE(validate_traces(result.traces).empty());
  const auto corpus = desk_corpus(o);
  const auto units = build_units(result.annotations, result.traces);
  ASSERT_EQ(units.size(), 6u);  // 2 languages x 3 annotators
  for (const auto& u : units) {
    LabelVector expected;
    for (const auto& id : u.segment_ids) {
      const auto it = std::find_if(corpus.begin(), corpus.end(), [&](const auto& s) { return s.segment_id == id; });
      EXPECT_EQ(it->language, u.language);
      expected.insert(expected.end(), it->corrupted.begin(), it->corrupted.end());
    }
    EXPECT_EQ(u.labels, expected) << u.language << "/" << u.annotator;
  }
}

TEST(DeskGen, SeverityMissesOnlyDropInjectedErrors) {
  auto o = small_corpus({});
  o.segments = 200;
  o.label_noise = 0.0;
  o.severity_miss = 1.0;
  o.class_probs = false;
  const auto result = desk_generate(o);
  const auto corpus = desk_corpus(o);
  double marked_severity = 0.0, missed_severity = 0.0;
  std::size_t marked = 0, missed = 0;
  for (const auto& u : build_units(result.annotations, result.traces)) {
    std::size_t k = 0;
    for (const auto& id : u.segment_ids) {
      const auto it = std::find_if(corpus.begin(), corpus.end(), [&](const auto& s) { return s.segment_id == id; });
      for (std::size_t j = 0; j < it->corrupted.size(); ++j, ++k) {
        if (it->corrupted[j] == 0) {
          EXPECT_EQ(u.labels[k], 0) << id;
        } else if (u.labels[k] != 0) {
          marked_severity += it->severity[j];
          ++marked;
        } else {
          missed_severity += it->severity[j];
          ++missed;
        }
      }
    }
  }
  ASSERT_GT(marked, 0u);
  ASSERT_GT(missed, 0u);
  EXPECT_GT(marked_severity / static_cast<double>(marked), missed_severity / static_cast<double>(missed) + 0.2);
}

TEST(DeskGen, RejectsExcessiveNoise) {
  auto o = small_corpus({});
  o.label_noise = 0.5;
  o.severity_miss = 0.6;
  EXPECT_THROW(desk_generate(o), InvalidConfig);
  o.severity_miss = -0.1;
  EXPECT_THROW(desk_generate(o), InvalidConfig);
}

TEST(DeskGen, PostEditsCoverCorruptions) {
  auto o = small_corpus({});
  o.label_noise = 0.0;
  o.as_post_edits = true;
  o.class_probs = false;
  const auto result = desk_generate(o);
  for (const auto& r : result.annotations) {
    EXPECT_TRUE(r.annotations.empty());
    EXPECT_EQ(r.post_edits.size(), 3u);
  }
  const auto corpus = desk_corpus(o);
  for (const auto& u : build_units(result.annotations, result.traces)) {
    std::size_t k = 0;
    for (const auto& id : u.segment_ids) {
      const auto it = std::find_if(corpus.begin(), corpus.end(), [&](const auto& s) { return s.segment_id == id; });
      for (auto c : it->corrupted) {
        EXPECT_TRUE(!c || u.labels[k] == 1) << id;
        ++k;
      }
    }
    EXPECT_EQ(k, u.labels.size());
  }
}

TEST_F(Pipeline, ValidateAcceptsGeneratedTraces) {
  EXPECT_TRUE(cmd_validate(kRoot / "corpus" / kTracesFile).empty());
  EXPECT_THROW(cmd_validate(kRoot / "missing.jsonl"), IoError);
}

TEST_F(Pipeline, ScoreFilesPerFamily) {
  const auto table = load_score_dir(kRoot / "scores");
  for (const char* f : kMetricFamilies) {
    const std::string name = std::string(f) == "pred_depth" ? "neg:pred_depth" : f;
    EXPECT_TRUE(fs::exists(kRoot / "scores" / (name + kScoresSuffix))) << name;
  }
  const auto& depth = table.at("neg:pred_depth");
  ASSERT_EQ(depth.size(), 40u);
  EXPECT_EQ(depth[0].metric_id, "neg:pred_depth");
  for (double v : depth[0].values) EXPECT_LE(v, 0.0);
}

TEST_F(Pipeline, ScoringIsThreadCountInvariant) {
  ScoreRunOptions s;
  s.traces = kRoot / "corpus" / kTracesFile;
  s.out_dir = kRoot / "scores1";
  s.flip = {"pred_depth"};
  s.threads = 1;
  cmd_score(s);
  s.out_dir = kRoot / "scores8";
  s.threads = 8;
  cmd_score(s);
  for (const auto& e : fs::directory_iterator(kRoot / "scores")) {
    const auto name = e.path().filename();
    EXPECT_EQ(slurp(kRoot / "scores1" / name), slurp(e.path())) << name;
    EXPECT_EQ(slurp(kRoot / "scores8" / name), slurp(e.path())) << name;
  }
}

TEST_F(Pipeline, ScoreRejectsInvalidTraces) {
  auto traces = load_trace(kRoot / "corpus" / kTracesFile);
  traces.full[3].steps[1].final_dist[0] += 0.5;
  save_trace(traces, kRoot / "bad.wqet.jsonl");
  ScoreRunOptions s;
  s.traces = kRoot / "bad.wqet.jsonl";
  s.out_dir = kRoot / "bad_scores";
  Diagnostics d;
  EXPECT_THROW(cmd_score(s, &d), InvalidInput);
  ASSERT_FALSE(d.empty());
  EXPECT_EQ(d[0].segment_id, traces.full[3].segment_id);
}

TEST_F(Pipeline, EvaluateReport) {
  Diagnostics d;
  const auto report = cmd_evaluate(eval_options(kRoot / "eval"), &d);
  EXPECT_EQ(report.languages, (std::vector<std::string>{"en-de", "en-it"}));
  EXPECT_TRUE(report.excluded_languages.empty());
  auto row = [&](const std::string& m) {
    const auto it = std::find_if(report.rows.begin(), report.rows.end(), [&](const auto& r) { return r.metric == m; });
    EXPECT_NE(it, report.rows.end()) << m;
    return *it;
  };
  const auto random = row("random");
  const auto surprisal = row("surprisal");
  EXPECT_GT(surprisal.average_ap, random.average_ap + 0.15);
  for (const auto& lang : report.languages) {
    EXPECT_EQ(surprisal.units.at(lang).size(), 3u);
    const auto& [ap, f1] = surprisal.per_language.at(lang);
    double mean = 0;
    for (const auto& u : surprisal.units.at(lang)) mean += u.ap / 3.0;
    EXPECT_NEAR(ap, mean, 1e-12);
    EXPECT_GE(f1, 0.0);
  }
  EXPECT_NEAR(surprisal.average_ap,
              (surprisal.per_language.at("en-de").first + surprisal.per_language.at("en-it").first) / 2, 1e-12);
  const auto best = row("ll_kl[best]");
  for (const auto& [lang, units] : best.units) {
    for (const auto& u : units) EXPECT_TRUE(u.layer.has_value());
  }
  row("xcomet_conf");
  row("xcomet_binary");
  EXPECT_EQ(report.human_editors.size(), 2u);
  for (const char* f : {"report.json", "report.tsv", "pr_points.csv"}) EXPECT_TRUE(fs::exists(kRoot / "eval" / f));
  const auto j = nlohmann::json::parse(slurp(kRoot / "eval" / "report.json"));
  EXPECT_TRUE(j.contains("rows"));

  // Same inputs, same bytes.
  cmd_evaluate(eval_options(kRoot / "eval2"));
  for (const char* f : {"report.json", "report.tsv", "pr_points.csv"}) {
    EXPECT_EQ(slurp(kRoot / "eval" / f), slurp(kRoot / "eval2" / f)) << f;
  }
}

TEST_F(Pipeline, CorrelateBands) {
  CorrelateOptions c;
  c.annotations = kRoot / "corpus" / kAnnotationsFile;
  c.traces = kRoot / "corpus" / kTracesFile;
  c.scores_dir = kRoot / "scores";
  c.metrics = {"surprisal", "ll_kl[l=1]"};
  c.out_path = kRoot / "bands.csv";
  const auto bands = cmd_correlate(c);
  ASSERT_EQ(bands.size(), 2u * 2u * 3u);
  EXPECT_EQ(bands[0].metric, "surprisal");
  EXPECT_EQ(bands[2].num_subsets, 1u);
  EXPECT_EQ(bands[1].num_subsets, 3u);
  const auto csv = slurp(c.out_path);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "language,metric,L,median,lower,upper,n_subsets,n_degenerate");

  c.threads = 4;
  c.out_path = kRoot / "bands4.csv";
  cmd_correlate(c);
  EXPECT_EQ(slurp(c.out_path), csv);

  c.metrics = {"nonexistent"};
  EXPECT_THROW(cmd_correlate(c), InvalidConfig);
}

TEST(Correlate, SingleAnnotatorIsRejected) {
  auto o = small_corpus({});
  o.annotators = 1;
  o.segments = 6;
  const auto r = desk_generate(o);
  ScoreRunOptions s;
  s.metrics = {"surprisal"};
  const auto scores = score_traces(r.traces, s);
  EXPECT_THROW(correlate(r.annotations, r.traces, scores, {}), InvalidInput);
}

TEST_F(Pipeline, ReportMergesDatasets) {
  cmd_evaluate(eval_options(kRoot / "eval_a"));
  auto other = eval_options(kRoot / "eval_b");
  other.class_probs.reset();
  cmd_evaluate(other);
  const auto tsv = merge_reports({{"A", kRoot / "eval_a" / "report.json"}, {"B", kRoot / "eval_b" / "report.json"}});
  EXPECT_EQ(tsv.substr(0, tsv.find('\n')), "metric\tA_ap\tA_f1\tB_ap\tB_f1");
  const auto xc = tsv.find("\nxcomet_conf\t");
  ASSERT_NE(xc, std::string::npos);
  const auto line = tsv.substr(xc + 1, tsv.find('\n', xc + 1) - xc - 1);
  EXPECT_EQ(line.substr(line.size() - 4), "\t-\t-");
  EXPECT_THROW(merge_reports({}), InvalidInput);
}

TEST(Evaluate, NoPositivesAnywhere) {
  auto o = small_corpus({});
  o.inject_errors = 0;
  o.label_noise = 0.0;
  o.segments = 6;
  o.class_probs = false;
  const auto r = desk_generate(o);
  ScoreRunOptions s;
  s.metrics = {"surprisal"};
  const auto scores = score_traces(r.traces, s);
  EXPECT_THROW(evaluate(r.annotations, r.traces, scores, nullptr, {}), NoPositives);
}

TEST_F(Pipeline, CliIsDeterministicAndMatchesApi) {
  const auto out1 = kRoot / "cli1", out2 = kRoot / "cli2";
  for (const auto& out : {out1, out2}) {
    ASSERT_EQ(run_cli("desk-gen --out " + out.string() +
                      " --seed 5 --segments 40 --inject-errors 2 --annotators 3 --label-noise 0.05"
                      " --languages en-de,en-it --class-probs"),
              0);
    ASSERT_EQ(run_cli("score --traces " + (out / kTracesFile).string() + " --out " + (out / "scores").string() +
                      " --flip pred_depth --threads 3"),
              0);
    ASSERT_EQ(run_cli("evaluate --annotations " + (out / kAnnotationsFile).string() + " --traces " +
                      (out / kTracesFile).string() + " --scores " + (out / "scores").string() + " --class-probs " +
                      (out / kClassProbsFile).string() + " --trials 200 --seed 1 --out " + (out / "eval").string()),
              0);
  }
  for (const auto& e : fs::recursive_directory_iterator(out1)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), out1);
    EXPECT_EQ(slurp(e.path()), slurp(out2 / rel)) << rel;
  }
  // The library path produced the same corpus and scores.
  for (const char* f : {kTracesFile, kAnnotationsFile, kClassProbsFile}) {
    EXPECT_EQ(slurp(out1 / f), slurp(kRoot / "corpus" / f)) << f;
  }
  EXPECT_EQ(slurp(out1 / "scores" / "surprisal.scores.jsonl"), slurp(kRoot / "scores" / "surprisal.scores.jsonl"));
  cmd_evaluate(eval_options(kRoot / "eval_api"));
  EXPECT_EQ(slurp(out1 / "eval" / "report.json"), slurp(kRoot / "eval_api" / "report.json"));
}

TEST_F(Pipeline, CliExitCodes) {
  const auto traces = (kRoot / "corpus" / kTracesFile).string();
  EXPECT_EQ(run_cli("validate " + traces), 0);
  EXPECT_EQ(run_cli("validate " + (kRoot / "nope.jsonl").string()), 2);

  auto file = load_trace(traces);
  file.full[0].steps[0].final_dist[1] = -0.1;
  save_trace(file, kRoot / "broken.wqet.jsonl");
  EXPECT_EQ(run_cli("--json-diagnostics validate " + (kRoot / "broken.wqet.jsonl").string()), 2);
  const auto diag = nlohmann::json::parse(slurp(kRoot / "stderr.txt").substr(0, slurp(kRoot / "stderr.txt").find('\n')));
  EXPECT_EQ(diag["rule"], "probability_range");
  EXPECT_EQ(diag["segment_id"], file.full[0].segment_id);

  std::ofstream(kRoot / "garbage.jsonl") << "{\"kind\":\n";
  EXPECT_EQ(run_cli("validate " + (kRoot / "garbage.jsonl").string()), 2);

  // No positives anywhere: exit 3.
  const auto clean = kRoot / "clean";
  ASSERT_EQ(run_cli("desk-gen --out " + clean.string() + " --segments 5"), 0);
  ASSERT_EQ(run_cli("score --traces " + (clean / kTracesFile).string() + " --metrics surprisal --out " +
                    (clean / "scores").string()),
            0);
  EXPECT_EQ(run_cli("evaluate --annotations " + (clean / kAnnotationsFile).string() + " --traces " +
                    (clean / kTracesFile).string() + " --scores " + (clean / "scores").string() + " --out " +
                    (clean / "eval").string()),
            3);
  // One annotator cannot be correlated.
  EXPECT_EQ(run_cli("correlate --annotations " + (clean / kAnnotationsFile).string() + " --traces " +
                    (clean / kTracesFile).string() + " --scores " + (clean / "scores").string() + " --out " +
                    (clean / "bands.csv").string()),
            2);
  EXPECT_EQ(run_cli("desk-gen --out " + (kRoot / "badcfg").string() + " --num-heads 3"), 1);
  EXPECT_NE(run_cli("no-such-command"), 0);
}

TEST_F(Pipeline, CliConfigFile) {
  const auto cfg = kRoot / "gen.toml";
  std::ofstream(cfg) << "[desk-gen]\nseed = 5\nsegments = 40\ninject-errors = 2\nannotators = 3\nlabel-noise = 0.05\n"
                        "languages = [\"en-de\", \"en-it\"]\nclass-probs = true\n";
  ASSERT_EQ(run_cli("desk-gen --config " + cfg.string() + " --out " + (kRoot / "cfg").string()), 0);
  EXPECT_EQ(slurp(kRoot / "cfg" / kTracesFile), slurp(kRoot / "corpus" / kTracesFile));
  EXPECT_EQ(slurp(kRoot / "cfg" / kAnnotationsFile), slurp(kRoot / "corpus" / kAnnotationsFile));
}
