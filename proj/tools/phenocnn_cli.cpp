// phenocnn command-line driver.
//
// Exit codes: 0 success, 2 config error, 3 data error, 4 model-load error,
// 1 anything else.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "phenocnn/phenocnn.hpp"

namespace fs = std::filesystem;
using namespace phenocnn;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> models;
  std::string phenotype;
  int top_k = 19;
  std::string out;
  bool multilabel = false;
  std::string checkpoint;
  std::string corpus;
  std::string ids;
  std::string scope = "global";
  std::string note_id;
  std::string method = "norm";
  bool verbose = false;
};

ExperimentConfig load_config(const Options& o) {
  if (o.config.empty()) throw ConfigError("--config is required");
  auto cfg = load_experiment_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (!o.out.empty()) cfg.output_dir = o.out;
  if (o.multilabel) cfg.multilabel = true;
  if (!o.models.empty()) cfg.models = o.models;
  cfg.validate();
  return cfg;
}

std::vector<Note> load_notes(const Options& o) {
  if (o.corpus.empty()) throw ConfigError("--corpus is required");
  if (!fs::is_regular_file(o.corpus)) throw ConfigError("corpus not found: " + o.corpus);
  auto notes = read_corpus(o.corpus);
  if (!o.ids.empty()) {
    const auto wanted = read_id_list(o.ids);
    const std::set<std::string> keep(wanted.begin(), wanted.end());
    std::erase_if(notes, [&](const Note& n) { return !keep.contains(n.note_id); });
  }
  return notes;
}

int cmd_generate(const Options& o) {
  if (o.out.empty()) throw ConfigError("--out is required");
  SyntheticSpec spec;
  if (!o.config.empty()) {
    std::ifstream in(o.config);
    if (!in) throw ConfigError("cannot open " + o.config);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(o.config + " is not valid JSON: " + e.what());
    }
    spec = synthetic_spec_from_json(j);
  } else {
    spec.phrases.push_back({"alcohol_abuse", {"heavy", "alcohol", "abuse"}, {}});
  }
  if (o.seed) spec.seed = *o.seed;
  const auto corpus = generate_synthetic_corpus(spec);
  write_synthetic_corpus(o.out, corpus);
  std::ofstream(fs::path(o.out) / "synthetic_spec.json") << to_json(spec).dump(2) << '\n';
  std::cout << "wrote " << corpus.labeled.size() << " labeled and " << corpus.unlabeled.size() << " unlabeled notes, "
            << corpus.dictionary.size() << " dictionary entries to " << o.out << '\n';
  return 0;
}

int cmd_split(const Options& o) {
  auto cfg = load_config(o);
  ExperimentPipeline pipe(cfg);
  const fs::path dir = o.out.empty() ? cfg.output_dir / "split" : fs::path(o.out);
  write_split_manifest(dir, pipe.split());
  std::cout << "train=" << pipe.split().train.size() << " val=" << pipe.split().val.size()
            << " test=" << pipe.split().test.size() << " split_hash=" << pipe.split().manifest_hash() << '\n';
  return 0;
}

int cmd_pretrain(const Options& o) {
  auto cfg = load_config(o);
  ExperimentPipeline pipe(cfg);
  const fs::path dir = o.out.empty() ? cfg.output_dir / "vocab" : fs::path(o.out);
  fs::create_directories(dir);
  write_embeddings(dir / "embeddings.txt", pipe.embeddings(), pipe.vocabulary());
  std::cout << "vocabulary " << pipe.vocabulary().size() << " tokens, hash " << pipe.vocabulary().hash() << '\n';
  return 0;
}

int cmd_train(const Options& o) {
  auto cfg = load_config(o);
  if (o.models.size() != 1) throw ConfigError("train needs exactly one --model");
  const auto& model = o.models.front();
  if (!o.phenotype.empty() &&
      std::find(cfg.phenotypes.begin(), cfg.phenotypes.end(), o.phenotype) == cfg.phenotypes.end()) {
    throw ConfigError("phenotype '" + o.phenotype + "' is not in the config");
  }
  ExperimentPipeline pipe(cfg);
  const fs::path dir = cfg.output_dir / "models";
  fs::create_directories(dir);
  const auto phenotypes = o.phenotype.empty() ? cfg.phenotypes : std::vector<std::string>{o.phenotype};
  if (model == "cnn" && cfg.multilabel) {
    const auto path = dir / (model_file_stem("cnn", "multilabel") + ".json");
    save_cnn_checkpoint(path, pipe.train_cnn(""));
    std::cout << path.string() << '\n';
    return 0;
  }
  for (const auto& p : phenotypes) {
    const auto path = dir / (model_file_stem(model, p) + ".json");
    if (model == "cnn") {
      save_cnn_checkpoint(path, pipe.train_cnn(p));
    } else {
      save_baseline_checkpoint(path, pipe.train_baseline_model(model, p));
    }
    std::cout << path.string() << '\n';
  }
  return 0;
}

int cmd_evaluate(const Options& o) {
  if (o.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  const auto model = load_any_checkpoint(o.checkpoint);
  const auto notes = load_notes(o);
  const auto rows = evaluate_checkpoint(model, notes, o.phenotype);
  const auto csv = metrics_csv(rows, "# format_version: " + std::to_string(kReportFormatVersion) + "\n");
  if (o.out.empty()) {
    std::cout << csv;
  } else {
    write_text_file(o.out, csv);
  }
  return 0;
}

int cmd_explain(const Options& o) {
  if (o.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  if (o.top_k < 1) throw ConfigError("--top-k must be >= 1");
  const auto scope = saliency_scope_from_string(o.scope);
  const auto method = saliency_method_from_string(o.method);
  const auto model = load_cnn_checkpoint(o.checkpoint);
  const auto notes = load_notes(o);
  const std::string phenotype = o.phenotype.empty() ? model.phenotypes.front() : o.phenotype;
  if (std::find(model.phenotypes.begin(), model.phenotypes.end(), phenotype) == model.phenotypes.end()) {
    throw ConfigError("checkpoint has no head for phenotype " + phenotype);
  }
  auto docs = to_documents(notes);
  std::vector<TokenSequence> tokens;
  for (const auto& d : docs) tokens.push_back(d.tokens);
  check_vocabulary_coverage(model.vocab, tokens);

  SaliencyReport report;
  if (scope == SaliencyScope::Global) {
    report = global_top_phrases(model, std::span<const ScoredDocument>(docs), phenotype, o.top_k, method);
  } else {
    if (o.note_id.empty() && docs.size() != 1) throw ConfigError("--note-id is required for local scope on a multi-note corpus");
    auto it = o.note_id.empty() ? docs.begin()
                                : std::find_if(docs.begin(), docs.end(), [&](const ScoredDocument& d) { return d.note_id == o.note_id; });
    if (it == docs.end()) throw DataError("note " + o.note_id + " is not in the corpus");
    if (it->tokens.empty()) throw DataError("note " + it->note_id + " has no tokens");
    report = local_salient_phrases(model, *it, phenotype, o.top_k, method);
  }
  if (o.out.empty()) {
    write_saliency_tsv(std::cout, report);
  } else {
    write_saliency_report(o.out, report);
  }
  return 0;
}

int cmd_run_experiment(const Options& o) {
  const auto cfg = load_config(o);
  const auto result = run_experiment(cfg);
  std::ifstream in(result.metrics_path);
  std::cout << in.rdbuf();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Phenotype classification of clinical notes with convolutional networks and baselines"};
  app.require_subcommand(1);
  Options o;
  app.add_flag("-v,--verbose", o.verbose, "Debug logging");

  auto with_config = [&](CLI::App* sub, bool required) {
    auto* opt = sub->add_option("--config", o.config, "Configuration file (JSON)");
    if (required) opt->required();
    sub->add_option("--seed", o.seed, "Root seed (overrides the config)");
    sub->add_option("--out", o.out, "Output directory");
  };

  auto* generate = app.add_subcommand("generate", "Write a synthetic labeled/unlabeled corpus and dictionary");
  generate->add_option("--config", o.config, "Synthetic corpus spec (JSON)");
  generate->add_option("--seed", o.seed, "Generator seed (overrides the spec)");
  generate->add_option("--out", o.out, "Output directory")->required();

  auto* pretrain = app.add_subcommand("pretrain", "Build the vocabulary and pretrain word embeddings");
  with_config(pretrain, true);

  auto* split = app.add_subcommand("split", "Write the train/val/test manifest");
  with_config(split, true);

  auto* trainc = app.add_subcommand("train", "Train one model on the training split");
  with_config(trainc, true);
  trainc->add_option("--model", o.models, "Model name")->required()->expected(1);
  trainc->add_option("--phenotype", o.phenotype, "Phenotype (default: all in the config)");
  trainc->add_flag("--multilabel", o.multilabel, "Train one CNN with a head per phenotype");

  auto* evaluate = app.add_subcommand("evaluate", "Score a checkpoint on a labeled corpus");
  evaluate->add_option("--checkpoint", o.checkpoint, "Model checkpoint")->required();
  evaluate->add_option("--corpus", o.corpus, "Labeled corpus (JSONL)")->required();
  evaluate->add_option("--ids", o.ids, "Restrict to the note ids listed in this file");
  evaluate->add_option("--phenotype", o.phenotype, "Only this phenotype");
  evaluate->add_option("--out", o.out, "Output CSV file (default: stdout)");

  auto* explain = app.add_subcommand("explain", "Report the most salient phrases of a CNN checkpoint");
  explain->add_option("--checkpoint", o.checkpoint, "CNN checkpoint")->required();
  explain->add_option("--corpus", o.corpus, "Corpus (JSONL)")->required();
  explain->add_option("--ids", o.ids, "Restrict to the note ids listed in this file");
  explain->add_option("--phenotype", o.phenotype, "Phenotype head (default: first)");
  explain->add_option("--top-k", o.top_k, "Number of phrases")->capture_default_str();
  explain->add_option("--scope", o.scope, "global or local")->capture_default_str();
  explain->add_option("--note-id", o.note_id, "Note for local scope");
  explain->add_option("--method", o.method, "norm or weighted")->capture_default_str();
  explain->add_option("--out", o.out, "Output path stem; writes .tsv and .json (default: TSV on stdout)");

  auto* run = app.add_subcommand("run-experiment", "Split, train all models, evaluate and explain");
  with_config(run, true);
  run->add_option("--model", o.models, "Restrict to these models (repeatable)");
  run->add_flag("--multilabel", o.multilabel, "Train one CNN with a head per phenotype");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  spdlog::set_level(o.verbose ? spdlog::level::debug : spdlog::level::info);

  try {
    if (generate->parsed()) return cmd_generate(o);
    if (pretrain->parsed()) return cmd_pretrain(o);
    if (split->parsed()) return cmd_split(o);
    if (trainc->parsed()) return cmd_train(o);
    if (evaluate->parsed()) return cmd_evaluate(o);
    if (explain->parsed()) return cmd_explain(o);
    if (run->parsed()) return cmd_run_experiment(o);
  } catch (const ConfigError& e) {
    spdlog::error("config error: {}", e.what());
    return 2;
  } catch (const DataError& e) {
    spdlog::error("data error: {}", e.what());
    return 3;
  } catch (const ModelLoadError& e) {
    spdlog::error("model load error: {}", e.what());
    return 4;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 1;
}
