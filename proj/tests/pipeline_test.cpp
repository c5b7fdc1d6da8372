#include <gtest/gtest.h>

#include <cstdlib>
#include <set>
#include <sstream>

#include "capalign/config.hpp"
#include "capalign/pipeline.hpp"
#include "test_support.hpp"

namespace capalign::pipeline {
namespace {

using testing::TempDir;

struct Run {
  int code;
  std::string out, err;
};

template <typename F>
Run run(F&& command) {
  std::ostringstream out, err;
  const int code = command(out, err);
  return {code, out.str(), err.str()};
}

PipelineConfig config_in(const TempDir& dir, const std::string& text = "") {
  io::write_file(dir / "pipeline.cfg", text);
  auto cfg = load_config(dir / "pipeline.cfg");
  cfg.paths.output_dir = dir / "out";
  return cfg;
}

TEST(Config, ParsesKeysAndResolvesRelativePaths) {
  const auto cfg = parse_config(
      "# comment\n"
      "paths.spans = data/spans.jsonl\n"
      "paths.vocab = /abs/vocab.txt\n"
      "tokenizer.context_length = 40\n"
      "expand.prompt_template = Say:\\n{caption}\n"
      "train.learning_rate = 1e-3\n"
      "train.batch_size = 8\n"
      "train.t_mult = 2\n"
      "rng_seed = 42\n",
      "/base");
  EXPECT_EQ(cfg.paths.spans, fs::path("/base/data/spans.jsonl"));
  EXPECT_EQ(cfg.paths.vocab, fs::path("/abs/vocab.txt"));
  EXPECT_EQ(cfg.context_length, 40);
  EXPECT_EQ(cfg.expand.prompt_template, "Say:\n{caption}");
  EXPECT_EQ(cfg.train.learning_rate, 1e-3);
  EXPECT_EQ(cfg.train.batch_size, 8u);
  EXPECT_EQ(cfg.train.scheduler.t_mult, 2);
  EXPECT_EQ(cfg.train.rng_seed, 42u);
  EXPECT_EQ(cfg.pairs_path(), fs::path("out/pairs.jsonl"));
}

TEST(Config, Defaults) {
  const auto cfg = parse_config("");
  EXPECT_EQ(cfg.context_length, 77);
  EXPECT_EQ(cfg.expand.max_new_tokens, 512);
  EXPECT_EQ(cfg.train.batch_size, 64u);
  EXPECT_EQ(cfg.train.learning_rate, 1e-5);
  EXPECT_EQ(cfg.train.adam_beta1, 0.9);
  EXPECT_EQ(cfg.train.adam_beta2, 0.999);
  EXPECT_EQ(cfg.train.adam_epsilon, 1e-8);
  EXPECT_EQ(cfg.expand.backend, "mock");
}

TEST(Config, RejectsBadInput) {
  EXPECT_THROW(parse_config("unknown.key = 1\n"), ParseError);
  EXPECT_THROW(parse_config("no equals sign\n"), ParseError);
  EXPECT_THROW(parse_config("train.batch_size = many\n"), ParseError);
  EXPECT_THROW(parse_config("train.learning_rate = 1e-3x\n"), ParseError);
  EXPECT_THROW(parse_config("tokenizer.context_length = 2\n"), ParseError);
  EXPECT_THROW(parse_config("train.caption_source = other\n"), ParseError);
  EXPECT_THROW(load_config("/nonexistent/capalign.cfg"), IoError);
}

TEST(ExtractPairs, TenSentencesGiveTwoPairs) {
  TempDir dir("extract");
  io::write_file(dir / "spans.jsonl", testing::single_font_spans("doc", 10));
  auto cfg = config_in(dir, "paths.spans = spans.jsonl\n");
  cfg.paths.output_dir = dir / "out";
  const auto r = run([&](auto& o, auto& e) { return cmd_extract_pairs(cfg, o, e); });
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(corpus::read_pairs(cfg.pairs_path()).size(), 2u);
  EXPECT_EQ(io::read_file(dir / "out" / "corpus_stats.csv"), "doc_id,pair_count\ndoc,2\nTotal,2\n");
  EXPECT_NE(r.out.find("Total"), std::string::npos);
}

TEST(ExtractPairs, ExitCodes) {
  TempDir dir("extract_codes");
  auto cfg = config_in(dir, "paths.spans = missing.jsonl\n");
  EXPECT_EQ(run([&](auto& o, auto& e) { return cmd_extract_pairs(cfg, o, e); }).code, 1);

  io::write_file(dir / "spans.jsonl", testing::single_font_spans("doc", 10, 5));
  io::write_file(dir / "excl.jsonl", "{\"doc_id\":\"doc\",\"page_ranges\":[[1,2]]}\n");
  cfg = config_in(dir, "paths.spans = spans.jsonl\npaths.exclusions = excl.jsonl\n");
  const auto r = run([&](auto& o, auto& e) { return cmd_extract_pairs(cfg, o, e); });
  EXPECT_EQ(r.code, 2);
  EXPECT_FALSE(r.err.empty());

  io::write_file(dir / "broken.jsonl", "{\"doc_id\": \n");
  cfg = config_in(dir, "paths.spans = broken.jsonl\n");
  EXPECT_EQ(run([&](auto& o, auto& e) { return cmd_extract_pairs(cfg, o, e); }).code, 1);
}

TEST(TokenStats, WritesCsvAndHandlesEdgeCases) {
  TempDir dir("token_stats");
  io::write_file(dir / "vocab.txt", tokenizer::Vocabulary({"red", "plaque"}).to_text());
  io::write_file(dir / "captions.jsonl", "{\"image_id\":\"a\",\"caption\":\"Red plaque.\"}\n");
  auto cfg = config_in(dir, "paths.vocab = vocab.txt\npaths.captions = captions.jsonl\n");
  auto r = run([&](auto& o, auto& e) { return cmd_token_stats(cfg, o, e); });
  ASSERT_EQ(r.code, 0) << r.err;
  const auto csv = io::read_file(dir / "out" / "token_stats.csv");
  EXPECT_NE(csv.find("Mean,5.000"), std::string::npos);
  EXPECT_NE(csv.find("Standard Deviation,0.000"), std::string::npos);

  io::write_file(dir / "captions.jsonl", "");
  EXPECT_EQ(run([&](auto& o, auto& e) { return cmd_token_stats(cfg, o, e); }).code, 2);
}

TEST(TokenStats, EngineeredLengthsPrintQuartiles) {
  TempDir dir("token_quartiles");
  io::write_file(dir / "vocab.txt", tokenizer::Vocabulary({"w"}).to_text());
  std::string captions;
  for (int len : {3, 17, 28, 51, 77}) {
    std::string c;
    for (int k = 0; k < len - 2; ++k) c += "w ";
    captions += "{\"image_id\":\"i" + std::to_string(len) + "\",\"caption\":\"" + c + "\"}\n";
  }
  io::write_file(dir / "captions.jsonl", captions);
  auto cfg = config_in(dir, "paths.vocab = vocab.txt\npaths.captions = captions.jsonl\n");
  const auto r = run([&](auto& o, auto& e) { return cmd_token_stats(cfg, o, e); });
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("Lower Quartile      17.000"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("Median              28.000"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("Upper Quartile      51.000"), std::string::npos) << r.out;
}

TEST(Expand, MockRunThenCachedRerun) {
  TempDir dir("expand");
  const auto data = testing::make_clusters(3, 3);  // 12 captions
  io::write_file(dir / "captions.jsonl", testing::captions_jsonl(data));
  auto cfg = config_in(dir, "paths.captions = captions.jsonl\nexpand.max_new_tokens = 40\n");
  std::size_t requests = 0;
  ASSERT_EQ(run([&](auto& o, auto& e) { return cmd_expand(cfg, o, e, &requests); }).code, 0);
  // identical captions share one cache entry
  const std::set<std::string> distinct(data.captions.begin(), data.captions.end());
  EXPECT_EQ(requests, distinct.size());
  const auto first = io::read_file(cfg.expanded_path());
  const auto records = io::read_jsonl(cfg.expanded_path());
  ASSERT_EQ(records.size(), 12u);
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto original = records[i].at("original").get<std::string>();
    EXPECT_EQ(original, data.captions[i]);
    EXPECT_EQ(records[i].at("expanded").get<std::string>().rfind(original + " ", 0), 0u);
  }
  ASSERT_EQ(run([&](auto& o, auto& e) { return cmd_expand(cfg, o, e, &requests); }).code, 0);
  EXPECT_EQ(requests, 0u);
  EXPECT_EQ(io::read_file(cfg.expanded_path()), first);
}

TEST(Expand, UnreachableBackendExitsThree) {
  TempDir dir("expand_fail");
  io::write_file(dir / "captions.jsonl", "{\"image_id\":\"a\",\"caption\":\"red\"}\n");
  auto cfg = config_in(dir,
                       "paths.captions = captions.jsonl\nexpand.backend = http://127.0.0.1:1/complete\n"
                       "expand.retries = 2\nexpand.backoff_ms = 1\nexpand.timeout_ms = 500\n");
  std::size_t requests = 0;
  const auto r = run([&](auto& o, auto& e) { return cmd_expand(cfg, o, e, &requests); });
  EXPECT_EQ(r.code, 3);
  EXPECT_EQ(requests, 2u);
  EXPECT_FALSE(fs::exists(cfg.expanded_path()));
}

TEST(LmDataset, TableFixtureProducesOneLinePerPair) {
  TempDir dir("lm");
  std::string spans;
  const std::vector<std::pair<std::string, int>> docs = {{"A", 616}, {"B", 286}, {"C", 851}, {"D", 58}};
  for (const auto& [doc, pairs] : docs) spans += testing::single_font_spans(doc, pairs * 5, 20);
  io::write_file(dir / "spans.jsonl", spans);
  auto cfg = config_in(dir, "paths.spans = spans.jsonl\n");
  ASSERT_EQ(run([&](auto& o, auto& e) { return cmd_extract_pairs(cfg, o, e); }).code, 0);
  EXPECT_EQ(io::read_file(dir / "out" / "corpus_stats.csv"),
            "doc_id,pair_count\nA,616\nB,286\nC,851\nD,58\nTotal,1811\n");

  ASSERT_EQ(run([&](auto& o, auto& e) { return cmd_lm_dataset(cfg, "records", o, e); }).code, 0);
  const auto records = io::read_jsonl(dir / "out" / "lm_records.jsonl");
  ASSERT_EQ(records.size(), 1811u);
  EXPECT_EQ(records[0].at("prompt").get<std::string>()[0], ' ');

  ASSERT_EQ(run([&](auto& o, auto& e) { return cmd_lm_dataset(cfg, "concat", o, e); }).code, 0);
  const auto lines = io::read_lines(dir / "out" / "lm_concat.txt");
  ASSERT_EQ(lines.size(), 1811u);
  for (const auto& line : lines) {
    const auto at = line.find("<|endoftext|>");
    ASSERT_NE(at, std::string::npos);
    EXPECT_EQ(line.find("<|endoftext|>", at + 1), std::string::npos);
  }
  EXPECT_EQ(run([&](auto& o, auto& e) { return cmd_lm_dataset(cfg, "other", o, e); }).code, 1);
}

TEST(LmDataset, EmptyAndCollidingInputs) {
  TempDir dir("lm_edge");
  io::write_file(dir / "pairs.jsonl", "");
  auto cfg = config_in(dir, "paths.pairs = pairs.jsonl\n");
  const auto empty = run([&](auto& o, auto& e) { return cmd_lm_dataset(cfg, "records", o, e); });
  EXPECT_EQ(empty.code, 0);
  EXPECT_EQ(io::read_file(dir / "out" / "lm_records.jsonl"), "");

  io::write_file(dir / "pairs.jsonl",
                 "{\"doc_id\":\"d\",\"prompt\":\"p <|endoftext|>\",\"completion\":\"c\"}\n");
  EXPECT_EQ(run([&](auto& o, auto& e) { return cmd_lm_dataset(cfg, "concat", o, e); }).code, 2);
  EXPECT_EQ(run([&](auto& o, auto& e) { return cmd_lm_dataset(cfg, "records", o, e); }).code, 0);
}

// Captions, features, annotations and config for a small separable problem.
struct TrainingFixture {
  TempDir dir{"train"};
  PipelineConfig cfg;

  explicit TrainingFixture(const std::string& extra = "") {
    const auto data = testing::make_clusters(11, 12);
    io::write_file(dir / "captions.jsonl", testing::captions_jsonl(data));
    io::write_file(dir / "features.jsonl", testing::features_jsonl(data));
    io::write_file(dir / "ann.jsonl", testing::annotations_jsonl(testing::cluster_annotations(data)));
    cfg = config_in(dir,
                    "paths.vocab = vocab.txt\npaths.captions = captions.jsonl\npaths.features = features.jsonl\n"
                    "paths.annotations = ann.jsonl\ntrain.batch_size = 8\ntrain.learning_rate = 0.01\n"
                    "train.epochs = 3\nmodel.d_tok = 8\nmodel.d_emb = 8\nrng_seed = 5\n" +
                        extra);
  }
};

TEST(Train, SameSeedGivesIdenticalOutputs) {
  TrainingFixture fx;
  ASSERT_EQ(run([&](auto& o, auto& e) { return cmd_vocab(fx.cfg, o, e); }).code, 0);
  ASSERT_EQ(run([&](auto& o, auto& e) { return cmd_train(fx.cfg, o, e); }).code, 0);
  const auto ckpt = io::read_file(fx.cfg.checkpoint_path());
  const auto log = io::read_file(fx.cfg.paths.output_dir / "loss_log.csv");
  EXPECT_EQ(log.rfind("epoch,mean_loss,lr_at_epoch_start\n1,", 0), 0u);
  ASSERT_EQ(run([&](auto& o, auto& e) { return cmd_train(fx.cfg, o, e); }).code, 0);
  EXPECT_EQ(io::read_file(fx.cfg.checkpoint_path()), ckpt);
  EXPECT_EQ(io::read_file(fx.cfg.paths.output_dir / "loss_log.csv"), log);
}

TEST(Train, ZeroEpochsWritesInitialModel) {
  TrainingFixture fx("train.epochs = 0\n");
  ASSERT_EQ(run([&](auto& o, auto& e) { return cmd_vocab(fx.cfg, o, e); }).code, 0);
  ASSERT_EQ(run([&](auto& o, auto& e) { return cmd_train(fx.cfg, o, e); }).code, 0);
  const auto vocab = tokenizer::Vocabulary::load(fx.cfg.paths.vocab);
  EXPECT_EQ(two_tower::load_checkpoint(fx.cfg.checkpoint_path()), two_tower::initialize(8, 8, 8, vocab.size(), 5));
  EXPECT_EQ(io::read_file(fx.cfg.paths.output_dir / "loss_log.csv"), "epoch,mean_loss,lr_at_epoch_start\n");
}

TEST(Train, DatasetSmallerThanBatchExitsTwo) {
  TrainingFixture fx("train.batch_size = 500\n");
  ASSERT_EQ(run([&](auto& o, auto& e) { return cmd_vocab(fx.cfg, o, e); }).code, 0);
  EXPECT_EQ(run([&](auto& o, auto& e) { return cmd_train(fx.cfg, o, e); }).code, 2);
}

TEST(Eval, ReportAndShuffleInvariance) {
  TrainingFixture fx("train.epochs = 20\n");
  ASSERT_EQ(run([&](auto& o, auto& e) { return cmd_vocab(fx.cfg, o, e); }).code, 0);
  ASSERT_EQ(run([&](auto& o, auto& e) { return cmd_train(fx.cfg, o, e); }).code, 0);
  const auto r = run([&](auto& o, auto& e) { return cmd_eval(fx.cfg, o, e); });
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("Mean AUC"), std::string::npos);
  const auto report = io::read_file(fx.cfg.paths.output_dir / "report.csv");
  EXPECT_EQ(report.rfind("concept,n_true,auc\nplaque,12,", 0), 0u);

  auto lines = io::read_lines(fx.dir / "ann.jsonl");
  std::reverse(lines.begin() + 1, lines.end());
  std::string shuffled;
  for (const auto& l : lines) shuffled += l + "\n";
  io::write_file(fx.dir / "ann.jsonl", shuffled);
  ASSERT_EQ(run([&](auto& o, auto& e) { return cmd_eval(fx.cfg, o, e); }).code, 0);
  EXPECT_EQ(io::read_file(fx.cfg.paths.output_dir / "report.csv"), report);
}

TEST(Eval, PerfectFixtureScoresOne) {
  TempDir dir("eval_perfect");
  // identity towers; concept words map to the axes the images point along
  const tokenizer::Vocabulary vocab({"this", "is", "alpha", "beta"});
  auto model = two_tower::TwoTowerModel::zeros(2, 2, 2, vocab.size());
  for (std::size_t k = 0; k < 2; ++k) {
    model.image_proj(k, k) = 1.0;
    model.text_proj(k, k) = 1.0;
  }
  model.token_embedding(static_cast<std::size_t>(vocab.lookup("alpha")), 0) = 1.0;
  model.token_embedding(static_cast<std::size_t>(vocab.lookup("beta")), 1) = 1.0;
  zeroshot::ConceptAnnotations ann;
  ann.concepts = {"alpha", "beta"};
  ann.images = {{"i1", {1.0, 0.1}, {1, 0}}, {"i2", {0.9, 0.3}, {1, 0}}, {"i3", {0.2, 1.0}, {0, 1}},
                {"i4", {0.1, 0.8}, {0, 1}}};
  io::write_file(dir / "vocab.txt", vocab.to_text());
  io::write_file(dir / "ann.jsonl", testing::annotations_jsonl(ann));
  two_tower::save_checkpoint(model, dir / "model.ckpt");
  auto cfg = config_in(dir, "paths.vocab = vocab.txt\npaths.annotations = ann.jsonl\npaths.checkpoint = model.ckpt\n");
  ASSERT_EQ(run([&](auto& o, auto& e) { return cmd_eval(cfg, o, e); }).code, 0);
  EXPECT_EQ(io::read_file(dir / "out" / "report.csv"),
            "concept,n_true,auc\nalpha,2,1.000000\nbeta,2,1.000000\nMean AUC,,1.000000\n");
}

TEST(Eval, MissingOrMismatchedInputsExitOne) {
  TrainingFixture fx;
  EXPECT_EQ(run([&](auto& o, auto& e) { return cmd_eval(fx.cfg, o, e); }).code, 1);
  ASSERT_EQ(run([&](auto& o, auto& e) { return cmd_vocab(fx.cfg, o, e); }).code, 0);
  two_tower::save_checkpoint(two_tower::initialize(8, 8, 8, 5, 1), fx.cfg.checkpoint_path());
  EXPECT_EQ(run([&](auto& o, auto& e) { return cmd_eval(fx.cfg, o, e); }).code, 1);
}

#ifdef CAPALIGN_CLI_PATH
int run_cli(const std::string& args) {
  const int status = std::system((std::string(CAPALIGN_CLI_PATH) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST(Cli, SubcommandsAndExitCodes) {
  TempDir dir("cli");
  io::write_file(dir / "spans.jsonl", testing::single_font_spans("doc", 10));
  io::write_file(dir / "pipeline.cfg", "paths.spans = spans.jsonl\n");
  const std::string cfg = "--config " + (dir / "pipeline.cfg").string();
  EXPECT_EQ(run_cli("extract-pairs " + cfg + " --out " + (dir / "o").string()), 0);
  EXPECT_TRUE(fs::exists(dir / "o" / "pairs.jsonl"));
  EXPECT_EQ(run_cli("lm-dataset " + cfg + " --out " + (dir / "o").string() + " --format concat"), 0);
  EXPECT_EQ(run_cli("token-stats " + cfg), 1);
  EXPECT_EQ(run_cli("extract-pairs --config " + (dir / "missing.cfg").string()), 1);
  EXPECT_EQ(run_cli("no-such-command"), 1);
}
#endif

}  // namespace
}  // namespace capalign::pipeline
