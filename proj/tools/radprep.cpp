#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "radprep/pipeline.hpp"

namespace rp = radprep::pipeline;

namespace {

constexpr int kOk = 0;
constexpr int kOperational = 1;
constexpr int kInvalid = 2;

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string workdir;
  std::optional<unsigned> threads;
};

rp::PipelineConfig resolve(const Globals& g) {
  auto config = g.config.empty() ? rp::PipelineConfig::from_json_text("{}", radprep::fs::current_path())
                                 : rp::PipelineConfig::load(g.config);
  if (g.seed) config.master_seed = *g.seed;
  if (!g.workdir.empty()) config.workdir = radprep::fs::absolute(g.workdir);
  if (g.threads) config.threads = *g.threads;
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"radprep: radiology report preprocessing, packing and evaluation"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "JSON pipeline config")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "master seed (overrides the config)");
  app.add_option("--workdir", g.workdir, "working directory (overrides the config)");
  app.add_option("--threads", g.threads, "worker threads (overrides the config)")->check(CLI::PositiveNumber);

  auto* ingest = app.add_subcommand("ingest", "convert the source CSV into the canonical JSON-Lines dataset");
  std::string input;
  ingest->add_option("--input", input, "source CSV (overrides source.path)");

  app.add_subcommand("prepare", "extract, de-identify, filter, build instruction pairs and split");
  app.add_subcommand("pack", "tokenize training pairs and pack them into fixed-capacity blocks");

  auto* eval = app.add_subcommand("eval", "score generated impressions against references");
  rp::EvalOptions eval_opts;
  std::string eval_format = "markdown";
  eval->add_option("--generated", eval_opts.generated, "JSON-Lines generations")->required()->check(CLI::ExistingFile);
  eval->add_option("--reference", eval_opts.reference, "JSON-Lines references")->required()->check(CLI::ExistingFile);
  eval->add_option("--label", eval_opts.label, "model label for the summary row");
  eval->add_flag("--judge", eval_opts.judge, "also score every pair with the LLM judge");
  eval->add_option("--format", eval_format, "markdown or csv");

  auto* judge = app.add_subcommand("judge", "score pairs with the LLM judge (resumable)");
  rp::JudgeOptions judge_opts;
  std::string judge_output;
  judge->add_option("--generated", judge_opts.generated, "JSON-Lines generations")->required()->check(CLI::ExistingFile);
  judge->add_option("--reference", judge_opts.reference, "JSON-Lines references")->required()->check(CLI::ExistingFile);
  judge->add_option("--output", judge_output, "verdict file (default <workdir>/verdicts.jsonl)");

  auto* report = app.add_subcommand("report", "render the summary table from eval results");
  rp::ReportOptions report_opts;
  std::string report_format = "markdown";
  std::string report_output;
  report->add_option("summaries", report_opts.summaries, "summary.json files (default: all under <workdir>/eval)");
  report->add_option("--format", report_format, "markdown or csv");
  report->add_option("--output", report_output, "also write the table to this file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kInvalid;
  }

  try {
    auto config = resolve(g);
    if (!input.empty()) config.source_path = radprep::fs::absolute(input);
    config.validate();
    rp::WorkdirLock lock(config.workdir);

    rp::CommandReport result;
    if (*ingest) {
      result = rp::cmd_ingest(config);
    } else if (app.got_subcommand("prepare")) {
      result = rp::cmd_prepare(config);
    } else if (app.got_subcommand("pack")) {
      result = rp::cmd_pack(config);
    } else if (*eval) {
      eval_opts.format = radprep::report::parse_format(eval_format);
      result = rp::cmd_eval(config, eval_opts);
    } else if (*judge) {
      if (!judge_output.empty()) judge_opts.output = radprep::fs::absolute(judge_output);
      result = rp::cmd_judge(config, judge_opts);
    } else if (*report) {
      report_opts.format = radprep::report::parse_format(report_format);
      if (!report_output.empty()) report_opts.output = report_output;
      result = rp::cmd_report(config, report_opts);
    }
    std::cout << result.text;
    return kOk;
  } catch (const radprep::ValidationError& e) {
    std::cerr << "radprep: " << e.what() << '\n';
    return kInvalid;
  } catch (const std::exception& e) {
    std::cerr << "radprep: " << e.what() << '\n';
    return kOperational;
  }
}
