// capalign: caption alignment pipeline, one subcommand per stage.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "capalign/config.hpp"
#include "capalign/pipeline.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Caption alignment pipeline: corpus extraction, caption expansion, "
               "contrastive training and zero-shot concept evaluation"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::string checkpoint;
  std::string format = "records";

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "Pipeline config file")->required();
    cmd->add_option("--seed", seed, "Override rng_seed");
    cmd->add_option("--out", out_dir, "Override paths.output_dir");
  };

  auto* extract = app.add_subcommand("extract-pairs", "Build prompt-completion pairs from span records");
  auto* stats = app.add_subcommand("token-stats", "Tokenized caption length statistics");
  auto* expand = app.add_subcommand("expand", "Expand captions through the completion backend");
  auto* lm = app.add_subcommand("lm-dataset", "Write an LLM fine-tuning dataset from the pairs file");
  auto* vocab = app.add_subcommand("vocab", "Build a vocabulary file from captions and concepts");
  auto* train = app.add_subcommand("train", "Train the two-tower model");
  auto* eval = app.add_subcommand("eval", "Zero-shot concept evaluation report");
  for (auto* cmd : {extract, stats, expand, lm, vocab, train, eval}) add_common(cmd);
  lm->add_option("--format", format, "records | concat")->check(CLI::IsMember({"records", "concat"}));
  eval->add_option("--checkpoint", checkpoint, "Override paths.checkpoint");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  capalign::PipelineConfig cfg;
  try {
    cfg = capalign::load_config(config_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return capalign::pipeline::kIoFailure;
  }
  if (seed) capalign::override_seed(cfg, *seed);
  if (!out_dir.empty()) cfg.paths.output_dir = out_dir;
  if (!checkpoint.empty()) cfg.paths.checkpoint = checkpoint;

  namespace p = capalign::pipeline;
  if (*extract) return p::cmd_extract_pairs(cfg, std::cout, std::cerr);
  if (*stats) return p::cmd_token_stats(cfg, std::cout, std::cerr);
  if (*expand) return p::cmd_expand(cfg, std::cout, std::cerr);
  if (*lm) return p::cmd_lm_dataset(cfg, format, std::cout, std::cerr);
  if (*vocab) return p::cmd_vocab(cfg, std::cout, std::cerr);
  if (*train) return p::cmd_train(cfg, std::cout, std::cerr);
  if (*eval) return p::cmd_eval(cfg, std::cout, std::cerr);
  return p::kIoFailure;
}
