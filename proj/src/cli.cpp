// Copyright 2026 The SB-MoE Retrieval Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "sbmoe/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "sbmoe/analysis.hpp"
#include "sbmoe/config.hpp"
#include "sbmoe/data_io.hpp"
#include "sbmoe/evaluation.hpp"
#include "sbmoe/moe_block.hpp"
#include "sbmoe/retrieval.hpp"
#include "sbmoe/synthetic.hpp"
#include "sbmoe/training.hpp"

namespace sbmoe::cli {

namespace {

/// Flags that may override values loaded from a config file. Left unset
/// unless given on the command line.
struct TrainingFlags {
  std::optional<std::size_t> batch_size;
  std::optional<double> learning_rate;
  std::optional<std::size_t> epochs;
  std::optional<double> temperature;
  std::optional<double> val_fraction;
  std::optional<std::string> routing;
  bool unscaled = false;
  std::optional<std::size_t> experts;
  std::optional<std::string> activation;
};

void add_training_flags(CLI::App* sub, TrainingFlags& f, bool with_experts) {
  sub->add_option("--batch-size", f.batch_size, "Minibatch size (default 64)");
  sub->add_option("--lr", f.learning_rate, "Adam learning rate (default 1e-4)");
  sub->add_option("--epochs", f.epochs, "Training epochs (default 20)");
  sub->add_option("--temperature", f.temperature, "Contrastive temperature (default 1)");
  sub->add_option("--val-fraction", f.val_fraction, "Share of queries held out (default 0.05)");
  sub->add_option("--routing", f.routing, "noisy-top1 or random (default noisy-top1)");
  sub->add_flag("--unscaled", f.unscaled, "Train on f_m(x) instead of p_m*f_m(x)");
  if (with_experts) sub->add_option("--experts", f.experts, "Number of experts (default 3)");
  sub->add_option("--activation", f.activation, "Expert activation: relu or gelu (default relu)");
}

struct Globals {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> config;
};

RunConfig resolve_run_config(const Globals& g, const TrainingFlags& f) {
  RunConfig c;
  if (const auto path = resolve_config_path(g.config)) c = load_config(*path);
  if (g.seed) c.training.seed = *g.seed;
  if (f.batch_size) c.training.batch_size = *f.batch_size;
  if (f.learning_rate) c.training.learning_rate = *f.learning_rate;
  if (f.epochs) c.training.epochs = *f.epochs;
  if (f.temperature) c.training.temperature = *f.temperature;
  if (f.val_fraction) c.training.val_fraction = *f.val_fraction;
  if (f.routing) c.training.routing = parse_train_routing(*f.routing);
  if (f.unscaled) c.training.scale_by_gate = false;
  if (f.experts) c.experts = *f.experts;
  if (f.activation) c.activation = parse_activation(*f.activation);
  if (c.experts < 1) throw std::invalid_argument("--experts must be >= 1");
  c.training.validate();
  return c;
}

std::uint64_t resolve_seed(const Globals& g) {
  if (g.seed) return *g.seed;
  if (const auto path = resolve_config_path(g.config)) return load_config(*path).training.seed;
  return TrainingConfig{}.seed;
}

/// Refiner for an optional checkpoint; `block` keeps the loaded weights alive.
Refiner make_refiner(const std::optional<std::string>& checkpoint, const std::optional<std::string>& mode,
                     std::uint64_t seed, std::optional<MoEBlock>& block) {
  if (!checkpoint) {
    if (mode) throw std::invalid_argument("--mode requires --checkpoint");
    return Refiner::identity();
  }
  block = load_checkpoint(*checkpoint);
  return Refiner{&*block, mode ? parse_pooling(*mode) : block->pooling, seed};
}

std::vector<MetricSpec> parse_metrics(const std::vector<std::string>& names) {
  std::vector<MetricSpec> specs;
  for (const auto& n : names) specs.push_back(MetricSpec::parse(n));
  return specs;
}

std::ofstream open_output(const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(IoErrorKind::kOpen, "cannot write " + path);
  return out;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Single-block mixture-of-experts refinement for dense retrieval embeddings", "sbmoe"};
  // subcommands inherit this, so global flags may follow the subcommand name
  app.fallthrough();
  Globals globals;
  app.add_option("--seed", globals.seed, "Seed for every random draw (default 42)");
  app.add_option("--config", globals.config,
                 std::string("key=value settings file; falls back to $") + kConfigEnvVar);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a multi-domain synthetic retrieval dataset");
  SyntheticSpec spec;
  std::string synth_out;
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--domains", spec.num_domains, "Number of domains K")->capture_default_str();
  synth->add_option("--dim", spec.dim, "Embedding dimension")->capture_default_str();
  synth->add_option("--docs-per-domain", spec.docs_per_domain, "Corpus documents per domain")
      ->capture_default_str();
  synth->add_option("--queries-per-domain", spec.queries_per_domain, "Test queries per domain")
      ->capture_default_str();
  synth->add_option("--train-queries-per-domain", spec.train_queries_per_domain,
                    "Training queries per domain")
      ->capture_default_str();
  synth->add_option("--positives", spec.positives_per_query, "Relevant documents per query")
      ->capture_default_str();
  synth->add_option("--distortion-rank", spec.distortion_rank, "Directions stretched per domain")
      ->capture_default_str();
  synth->add_option("--scale", spec.transform_scale, "Stretch factor of the domain distortion")
      ->capture_default_str();
  synth->add_option("--spread", spec.doc_spread, "Document spread around the domain center")
      ->capture_default_str();
  synth->add_option("--noise", spec.noise, "Query noise level")->capture_default_str();
  synth->add_option("--embedding-scale", spec.embedding_scale, "Factor applied to every vector")
      ->capture_default_str();

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a block with the contrastive objective");
  std::string tr_queries, tr_corpus, tr_qrels, tr_out, tr_scheme = "near-identity", tr_pooling = "top1";
  std::optional<std::string> tr_init, tr_log;
  TrainingFlags tr_flags;
  train_cmd->add_option("--queries", tr_queries, "Training query embeddings")->required();
  train_cmd->add_option("--corpus", tr_corpus, "Corpus embeddings")->required();
  train_cmd->add_option("--qrels", tr_qrels, "Training judgments")->required();
  train_cmd->add_option("--out", tr_out, "Checkpoint to write")->required();
  train_cmd->add_option("--init", tr_init, "Start from this checkpoint instead of a fresh block");
  train_cmd->add_option("--init-scheme", tr_scheme, "near-identity or random")->capture_default_str();
  train_cmd->add_option("--pooling", tr_pooling, "Inference pooling stored in the checkpoint")
      ->capture_default_str();
  train_cmd->add_option("--loss-log", tr_log, "Per-epoch loss TSV");
  add_training_flags(train_cmd, tr_flags, true);

  // index
  auto* index_cmd = app.add_subcommand("index", "Refine a corpus into a searchable index");
  std::string ix_corpus, ix_out;
  std::optional<std::string> ix_ckpt, ix_mode;
  unsigned ix_threads = 1;
  index_cmd->add_option("--corpus", ix_corpus, "Corpus embeddings")->required();
  index_cmd->add_option("--checkpoint", ix_ckpt, "Block checkpoint; omit for the unrefined baseline");
  index_cmd->add_option("--mode", ix_mode, "top1, all, random-top1 or random-all (default: checkpoint's)");
  index_cmd->add_option("--out", ix_out, "Index file to write")->required();
  index_cmd->add_option("--threads", ix_threads, "Worker threads, 0 = all cores")->capture_default_str();

  // search
  auto* search_cmd = app.add_subcommand("search", "Rank the index for every query");
  std::string se_index, se_queries, se_out, se_tag = "sbmoe";
  std::optional<std::string> se_ckpt, se_mode;
  std::size_t se_k = 100;
  search_cmd->add_option("--index", se_index, "Index file")->required();
  search_cmd->add_option("--queries", se_queries, "Query embeddings")->required();
  search_cmd->add_option("--checkpoint", se_ckpt, "Checkpoint the index was built with");
  search_cmd->add_option("--mode", se_mode, "Pooling the index was built with");
  search_cmd->add_option("--k", se_k, "Documents per query")->capture_default_str();
  search_cmd->add_option("--out", se_out, "Run file to write")->required();
  search_cmd->add_option("--tag", se_tag, "Run tag column")->capture_default_str();

  // evaluate
  auto* eval_cmd = app.add_subcommand("evaluate", "Score a run file against judgments");
  std::string ev_run, ev_qrels, ev_gain = "linear";
  std::vector<std::string> ev_metrics{"ndcg@10", "recall@100"};
  std::optional<std::string> ev_per_query;
  eval_cmd->add_option("--run", ev_run, "Run file")->required();
  eval_cmd->add_option("--qrels", ev_qrels, "Judgments")->required();
  eval_cmd->add_option("--metrics", ev_metrics, "Metrics such as ndcg@10 recall@100")
      ->delimiter(',')
      ->capture_default_str();
  eval_cmd->add_option("--gain", ev_gain, "nDCG gain: linear or exponential")->capture_default_str();
  eval_cmd->add_option("--per-query", ev_per_query, "Write per-query values to this TSV");

  // compare
  auto* cmp_cmd = app.add_subcommand("compare", "Paired t-tests of runs against a baseline");
  std::vector<std::string> cmp_runs;
  std::string cmp_qrels;
  std::optional<std::string> cmp_baseline, cmp_out;
  std::vector<std::string> cmp_metrics{"ndcg@10", "recall@100"};
  std::optional<std::size_t> cmp_comparisons;
  double cmp_alpha = 0.05;
  cmp_cmd->add_option("--run", cmp_runs, "name=path, repeat for each run")->required();
  cmp_cmd->add_option("--qrels", cmp_qrels, "Judgments")->required();
  cmp_cmd->add_option("--baseline", cmp_baseline, "Baseline run name (default: first)");
  cmp_cmd->add_option("--metrics", cmp_metrics, "Metrics to compare")->delimiter(',')->capture_default_str();
  cmp_cmd->add_option("--comparisons", cmp_comparisons, "Bonferroni factor (default: tests emitted)");
  cmp_cmd->add_option("--alpha", cmp_alpha, "Significance level")->capture_default_str();
  cmp_cmd->add_option("--out", cmp_out, "TSV path (default: standard output)");

  // activation
  auto* act_cmd = app.add_subcommand("activation", "Count documents routed to each expert");
  std::string act_index, act_threshold = "0.01";
  std::optional<std::string> act_out;
  act_cmd->add_option("--index", act_index, "Index file")->required();
  act_cmd->add_option("--threshold", act_threshold, "Fraction of the corpus (<1) or document count")
      ->capture_default_str();
  act_cmd->add_option("--out", act_out, "TSV path (default: standard output)");

  // sweep
  auto* sweep_cmd = app.add_subcommand("sweep", "Train and evaluate several expert counts");
  std::string sw_data, sw_out, sw_threshold = "0.01";
  std::optional<std::string> sw_timing;
  std::vector<std::size_t> sw_experts{3, 6, 9, 12};
  std::vector<std::string> sw_variants{"top1", "all"};
  std::size_t sw_depth = 100;
  TrainingFlags sw_flags;
  sweep_cmd->add_option("--data", sw_data, "Dataset directory written by synth")->required();
  sweep_cmd->add_option("--experts", sw_experts, "Expert counts")->delimiter(',')->capture_default_str();
  sweep_cmd->add_option("--variants", sw_variants, "Pooling variants")->delimiter(',')->capture_default_str();
  sweep_cmd->add_option("--threshold", sw_threshold, "Activation threshold")->capture_default_str();
  sweep_cmd->add_option("--depth", sw_depth, "Retrieval depth")->capture_default_str();
  sweep_cmd->add_option("--out", sw_out, "Result TSV")->required();
  sweep_cmd->add_option("--timing", sw_timing, "Wall-clock TSV");
  add_training_flags(sweep_cmd, sw_flags, false);

  // export-viz
  auto* viz_cmd = app.add_subcommand("export-viz", "Dump raw and refined vectors of one query's results");
  std::string vz_run, vz_query, vz_queries, vz_corpus, vz_index, vz_out;
  std::optional<std::string> vz_ckpt, vz_mode;
  std::size_t vz_top = 1000;
  viz_cmd->add_option("--run", vz_run, "Run file")->required();
  viz_cmd->add_option("--query-id", vz_query, "Query to export")->required();
  viz_cmd->add_option("--queries", vz_queries, "Query embeddings")->required();
  viz_cmd->add_option("--corpus", vz_corpus, "Raw corpus embeddings")->required();
  viz_cmd->add_option("--index", vz_index, "Index file")->required();
  viz_cmd->add_option("--checkpoint", vz_ckpt, "Checkpoint the index was built with");
  viz_cmd->add_option("--mode", vz_mode, "Pooling the index was built with");
  viz_cmd->add_option("--top-k", vz_top, "Documents to export")->capture_default_str();
  viz_cmd->add_option("--out", vz_out, "TSV to write")->required();

  app.require_subcommand(1);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (synth->parsed()) {
      spec.seed = resolve_seed(globals);
      write_dataset(synth_out, gen_synthetic(spec));
    } else if (train_cmd->parsed()) {
      const auto cfg = resolve_run_config(globals, tr_flags);
      const auto queries = read_embeddings(tr_queries);
      const auto corpus = read_embeddings(tr_corpus);
      const auto qrels = read_qrels(tr_qrels);
      MoEBlock init;
      if (tr_init) {
        init = load_checkpoint(*tr_init);
      } else {
        const auto scheme = tr_scheme == "near-identity" ? InitScheme::kNearIdentity
                            : tr_scheme == "random"      ? InitScheme::kRandom
                                                         : throw std::invalid_argument("unknown --init-scheme " + tr_scheme);
        init = init_block(corpus.dim(), cfg.experts, mix_seed(cfg.training.seed, cfg.experts), scheme,
                          cfg.activation);
      }
      init.pooling = parse_pooling(tr_pooling);
      const auto result = train(cfg.training, make_pairs(queries, corpus, qrels), init);
      save_checkpoint(tr_out, result.best.block);
      if (tr_log) write_loss_log(*tr_log, result.epochs);
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.6f", result.best.val_loss);
      out << "best epoch " << result.best.epoch << " val_loss " << buf << '\n';
    } else if (index_cmd->parsed()) {
      std::optional<MoEBlock> block;
      const auto refiner = make_refiner(ix_ckpt, ix_mode, resolve_seed(globals), block);
      write_index(ix_out, build_index(read_embeddings(ix_corpus), refiner, ix_threads));
    } else if (search_cmd->parsed()) {
      std::optional<MoEBlock> block;
      const auto refiner = make_refiner(se_ckpt, se_mode, resolve_seed(globals), block);
      const auto index = read_index(se_index);
      write_run(se_out, run_queries(read_embeddings(se_queries), refiner, index, se_k), se_tag);
    } else if (eval_cmd->parsed()) {
      const auto run = read_run(ev_run);
      const auto qrels = read_qrels(ev_qrels);
      Gain gain = Gain::kLinear;
      if (ev_gain == "exponential") {
        gain = Gain::kExponential;
      } else if (ev_gain != "linear") {
        throw std::invalid_argument("unknown --gain " + ev_gain);
      }
      std::optional<std::ofstream> per_query;
      if (ev_per_query) {
        per_query.emplace(open_output(*ev_per_query));
        *per_query << "metric\tquery\tvalue\n";
      }
      for (const auto& m : parse_metrics(ev_metrics)) {
        const auto report = m.name == "ndcg" ? ndcg_at_k(run, qrels, m.cutoff, gain) : m.evaluate(run, qrels);
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.6f", report.mean);
        out << m.label() << '\t' << buf << '\n';
        if (report.skipped > 0) err << m.label() << ": skipped " << report.skipped << " queries\n";
        if (per_query) {
          for (const auto& [q, v] : report.per_query) {
            std::snprintf(buf, sizeof buf, "%.6f", v);
            *per_query << m.label() << '\t' << q << '\t' << buf << '\n';
          }
        }
      }
    } else if (cmp_cmd->parsed()) {
      std::vector<NamedRun> runs;
      for (const auto& item : cmp_runs) {
        const auto eq = item.find('=');
        if (eq == std::string::npos || eq == 0) throw std::invalid_argument("--run expects name=path, got " + item);
        runs.push_back({item.substr(0, eq), read_run(item.substr(eq + 1))});
      }
      const auto table = compare_runs(runs, read_qrels(cmp_qrels), parse_metrics(cmp_metrics),
                                      cmp_baseline.value_or(runs.front().name), cmp_comparisons, cmp_alpha);
      if (cmp_out) {
        auto f = open_output(*cmp_out);
        write_comparison_tsv(f, table);
      } else {
        write_comparison_tsv(out, table);
      }
    } else if (act_cmd->parsed()) {
      const auto index = read_index(act_index);
      if (!index.mode) throw std::invalid_argument("activation: index was built without a block");
      const auto report = activation_report(index.routing.selected, index.num_experts,
                                            ThresholdSpec::parse(act_threshold));
      if (act_out) {
        auto f = open_output(*act_out);
        write_activation_tsv(f, report);
      } else {
        write_activation_tsv(out, report);
      }
    } else if (sweep_cmd->parsed()) {
      const auto cfg = resolve_run_config(globals, sw_flags);
      SweepConfig sc;
      sc.training = cfg.training;
      sc.activation = cfg.activation;
      sc.expert_counts = sw_experts;
      sc.variants.clear();
      for (const auto& v : sw_variants) sc.variants.push_back(parse_pooling(v));
      sc.threshold = ThresholdSpec::parse(sw_threshold);
      sc.depth = sw_depth;
      const auto result = sweep(sc, read_dataset(sw_data));
      auto f = open_output(sw_out);
      write_sweep_tsv(f, result);
      if (sw_timing) {
        auto t = open_output(*sw_timing);
        write_sweep_timing(t, result);
      }
    } else if (viz_cmd->parsed()) {
      std::optional<MoEBlock> block;
      const auto refiner = make_refiner(vz_ckpt, vz_mode, resolve_seed(globals), block);
      const auto index = read_index(vz_index);
      if (index.fingerprint != refiner.fingerprint()) {
        throw FingerprintError("export-viz: checkpoint and mode do not match the index");
      }
      const auto queries = read_embeddings(vz_queries);
      const auto corpus = read_embeddings(vz_corpus);
      const auto refined = refine_query_matrix(queries, refiner);
      const auto run = read_run(vz_run);
      auto f = open_output(vz_out);
      export_viz(f, vz_query, {run, queries, corpus, refined.refined, refined.routing, index}, vz_top);
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace sbmoe::cli
