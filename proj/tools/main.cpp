#include <spdlog/cfg/env.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <set>

#include "condenser/attention.hpp"
#include "condenser/checkpoint.hpp"
#include "condenser/config.hpp"
#include "condenser/io_util.hpp"
#include "condenser/parallel.hpp"
#include "condenser/retrieval.hpp"
#include "condenser/synthetic.hpp"
#include "condenser/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace condenser;

namespace {

constexpr const char* kVersion = "0.1.0";

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string config_path;
  std::optional<int> threads;
  std::string report_path;
};

// Settings resolved from --config plus global flags.
RunConfig resolve_config(const Globals& g) {
  RunConfig c;
  if (!g.config_path.empty()) c = load_run_config(g.config_path);
  if (g.seed) c.seed = *g.seed;
  if (g.threads) c.threads = *g.threads;
  if (c.threads < 1) throw Error("--threads must be at least 1");
  return c;
}

void write_report(const fs::path& path, const std::string& command, const RunConfig& config,
                  json body, double seconds) {
  json report{{"command", command},
              {"version", kVersion},
              {"seed", config.seed},
              {"threads", config.threads},
              {"config", config},
              {"elapsed_seconds", seconds}};
  for (auto& [k, v] : body.items()) report[k] = std::move(v);
  io::write_atomic(path, report.dump(2) + "\n");
  spdlog::info("report written to {}", path.string());
}

json provenance(const RunConfig& config, const std::string& command) {
  return json{{"command", command}, {"seed", config.seed}, {"run_config", config}};
}

std::vector<std::string> passage_texts(const std::vector<Passage>& items) {
  std::vector<std::string> out;
  out.reserve(items.size());
  for (const auto& p : items) out.push_back(p.text);
  return out;
}

std::vector<std::pair<std::string, std::vector<double>>> encode_queries(
    const Encoder& encoder, const text::Vocabulary& vocab, const std::vector<Passage>& queries,
    std::size_t max_len) {
  auto vectors = encode_texts(encoder, vocab, passage_texts(queries), max_len);
  std::vector<std::pair<std::string, std::vector<double>>> out;
  for (std::size_t i = 0; i < queries.size(); ++i) out.emplace_back(queries[i].id, std::move(vectors[i]));
  return out;
}

double mean_of(const std::vector<double>& v, std::size_t begin, std::size_t end) {
  end = std::min(end, v.size());
  if (begin >= end) return 0.0;
  double s = 0.0;
  for (std::size_t i = begin; i < end; ++i) s += v[i];
  return s / static_cast<double>(end - begin);
}

// ---------------------------------------------------------------------------

struct VocabArgs {
  std::vector<std::string> corpus;
  std::string out;
  std::size_t max_size = 0;
  std::size_t min_count = 1;
};

json run_vocab(const VocabArgs& a, RunConfig& config) {
  std::vector<std::string> docs;
  for (const auto& path : a.corpus) {
    auto part = text::read_corpus(path);
    docs.insert(docs.end(), part.begin(), part.end());
  }
  auto vocab = text::Vocabulary::build(docs, a.max_size, a.min_count);
  vocab.save(a.out);
  config.model.vocab_size = vocab.size();
  std::cout << "vocabulary size " << vocab.size() << "\n";
  return {{"inputs", {{"corpus", a.corpus}}},
          {"outputs", {{"vocab", a.out}}},
          {"metrics", {{"documents", docs.size()}, {"vocab_size", vocab.size()}}}};
}

struct PretrainArgs {
  std::string corpus, vocab, out, kind = "condenser-full", resume, state_out;
  std::optional<std::size_t> epochs, micro_batch, accumulation, max_len, max_steps;
  std::optional<double> lr;
};

json run_pretrain(const PretrainArgs& a, RunConfig& config) {
  auto vocab = text::Vocabulary::load(a.vocab);
  auto& po = config.pretrain;
  if (a.epochs) po.epochs = *a.epochs;
  if (a.micro_batch) po.micro_batch_size = *a.micro_batch;
  if (a.accumulation) po.accumulation_steps = *a.accumulation;
  if (a.max_len) po.max_len = *a.max_len;
  if (a.lr) po.peak_lr = *a.lr;
  po.seed = config.seed;
  ModelKind kind = model_kind_from_string(a.kind);
  if (kind == ModelKind::kEncoderOnly) throw Error("pretrain: kind must be condenser-full or mlm-full");

  std::optional<TrainState> state;
  if (!a.resume.empty()) {
    state = load_train_state(a.resume);
    config.model = state->config;
    kind = state->kind;
    po = state->options;
    config.seed = po.seed;
  }
  if (config.model.vocab_size != vocab.size()) {
    if (config.model.vocab_size != ModelConfig{}.vocab_size && !state)
      spdlog::warn("config vocab_size {} replaced by vocabulary size {}", config.model.vocab_size,
                   vocab.size());
    if (state) throw Error("pretrain: vocabulary does not match the resumed state");
    config.model.vocab_size = vocab.size();
  }
  if (po.max_len > config.model.max_position)
    throw Error("pretrain: max_len exceeds the model's max_position");

  auto docs = text::encode_all(text::read_corpus(a.corpus), vocab, po.max_len);
  std::optional<Pretrainer> trainer;
  if (state)
    trainer.emplace(*state, std::move(docs), config.model, kind, po);
  else
    trainer.emplace(PretrainModel(config.model, kind, config.seed), std::move(docs), po);
  const std::size_t start = trainer->step();
  spdlog::info("pretraining {} for {} steps (from step {})", to_string(kind), trainer->total_steps(), start);

  std::vector<double> total, head, backbone;
  const std::size_t budget = a.max_steps ? *a.max_steps : std::numeric_limits<std::size_t>::max();
  for (std::size_t taken = 0; !trainer->done() && taken < budget; ++taken) {
    auto log = trainer->train_step();
    total.push_back(log.total);
    head.push_back(log.head);
    backbone.push_back(log.backbone);
    if (log.step % 50 == 0 || trainer->done())
      spdlog::info("step {} lr {:.3g} loss {:.4f} (head {:.4f}, backbone {:.4f})", log.step, log.lr, log.total,
                   log.head, log.backbone);
  }

  config.paths["corpus"] = a.corpus;
  config.paths["vocab"] = a.vocab;
  auto meta = provenance(config, "pretrain");
  meta["steps"] = trainer->step();
  save_checkpoint(trainer->model(), a.out, meta);
  json outputs{{"checkpoint", a.out}};
  if (!a.state_out.empty()) {
    save_train_state(trainer->state(), a.state_out);
    outputs["state"] = a.state_out;
  }
  const std::size_t n = total.size();
  std::cout << "pretrained " << to_string(kind) << ": " << trainer->step() << "/" << trainer->total_steps()
            << " steps\n";
  return {{"inputs", {{"corpus", a.corpus}, {"vocab", a.vocab}, {"resume", a.resume}}},
          {"outputs", outputs},
          {"metrics",
           {{"kind", to_string(kind)},
            {"parameters", trainer->model().parameter_count()},
            {"start_step", start},
            {"steps", trainer->step()},
            {"total_steps", trainer->total_steps()},
            {"first10_loss", mean_of(total, 0, 10)},
            {"last10_loss", mean_of(total, n >= 10 ? n - 10 : 0, n)},
            {"first10_head_loss", mean_of(head, 0, 10)},
            {"last10_head_loss", mean_of(head, n >= 10 ? n - 10 : 0, n)},
            {"loss", total},
            {"head_loss", head},
            {"backbone_loss", backbone}}}};
}

struct ReduceArgs {
  std::string in, out;
};

json run_reduce(const ReduceArgs& a, RunConfig& config) {
  auto ck = load_checkpoint(a.in);
  Encoder encoder = encoder_from_checkpoint(ck);
  config.model = ck.config;
  auto meta = ck.metadata;
  meta["reduced_from"] = a.in;
  meta["reduced_from_kind"] = to_string(ck.kind);
  save_checkpoint(encoder, a.out, meta);
  const std::size_t kept = encoder.parameters().size();
  std::cout << "kept " << kept << " of " << ck.tensors.size() << " tensors\n";
  return {{"inputs", {{"checkpoint", a.in}}},
          {"outputs", {{"checkpoint", a.out}}},
          {"metrics",
           {{"source_kind", to_string(ck.kind)},
            {"tensors_in", ck.tensors.size()},
            {"tensors_out", kept},
            {"parameters_out", encoder.parameter_count()}}}};
}

struct FinetuneArgs {
  std::string mode = "contrastive", init, vocab, out, passage_out;
  std::string pairs, passages, triplets;
  std::optional<std::size_t> epochs, batch_size, accumulation, max_len, passages_per_query;
  std::optional<double> lr, margin;
  bool no_dropout = false, no_in_batch = false, no_random_fill = false, two_tower = false;
};

json run_finetune(const FinetuneArgs& a, RunConfig& config) {
  auto vocab = text::Vocabulary::load(a.vocab);
  auto& fo = config.finetune;
  if (a.epochs) fo.epochs = *a.epochs;
  if (a.batch_size) fo.batch_size = *a.batch_size;
  if (a.accumulation) fo.accumulation_steps = *a.accumulation;
  if (a.max_len) fo.max_len = *a.max_len;
  if (a.passages_per_query) fo.passages_per_query = *a.passages_per_query;
  if (a.lr) fo.peak_lr = *a.lr;
  if (a.margin) fo.margin = *a.margin;
  if (a.no_dropout) fo.dropout = false;
  if (a.no_in_batch) fo.in_batch_negatives = false;
  if (a.no_random_fill) fo.fill_random_negatives = false;
  if (a.two_tower) fo.two_tower = true;
  fo.seed = config.seed;

  Encoder encoder = [&] {
    if (!a.init.empty()) {
      config.paths["init"] = a.init;
      return load_encoder(a.init);
    }
    config.model.vocab_size = vocab.size();
    spdlog::warn("finetune: no --init given, starting from random weights");
    return Encoder(config.model, config.seed);
  }();
  config.model = encoder.config();
  if (config.model.vocab_size != vocab.size()) throw Error("finetune: vocabulary size does not match the model");
  config.paths["vocab"] = a.vocab;

  FinetuneReport report;
  json outputs{{"checkpoint", a.out}};
  json inputs{{"init", a.init}, {"vocab", a.vocab}};
  if (a.mode == "contrastive") {
    if (a.pairs.empty() || a.passages.empty()) throw Error("finetune contrastive: --pairs and --passages required");
    if (fo.two_tower && a.passage_out.empty()) throw Error("finetune: --two-tower needs --passage-out");
    auto pairs = read_training_pairs(a.pairs);
    auto passages = read_passages(a.passages);
    config.paths["pairs"] = a.pairs;
    config.paths["passages"] = a.passages;
    inputs["pairs"] = a.pairs;
    inputs["passages"] = a.passages;
    Retriever retriever(std::move(encoder), fo.two_tower);
    report = finetune_retriever(retriever, vocab, pairs, passages, fo);
    auto meta = provenance(config, "finetune");
    meta["mode"] = a.mode;
    meta["tower"] = fo.two_tower ? "query" : "shared";
    save_checkpoint(retriever.query_encoder(), a.out, meta);
    if (fo.two_tower) {
      meta["tower"] = "passage";
      save_checkpoint(retriever.passage_encoder(), a.passage_out, meta);
      outputs["passage_checkpoint"] = a.passage_out;
    }
  } else if (a.mode == "regression") {
    if (a.pairs.empty()) throw Error("finetune regression: --pairs required");
    auto pairs = read_scored_pairs(a.pairs);
    config.paths["pairs"] = a.pairs;
    inputs["pairs"] = a.pairs;
    report = finetune_regression(encoder, vocab, pairs, fo);
    auto meta = provenance(config, "finetune");
    meta["mode"] = a.mode;
    save_checkpoint(encoder, a.out, meta);
  } else if (a.mode == "triplet") {
    if (a.triplets.empty()) throw Error("finetune triplet: --triplets required");
    auto triplets = read_triplets(a.triplets);
    config.paths["triplets"] = a.triplets;
    inputs["triplets"] = a.triplets;
    report = finetune_triplet(encoder, vocab, triplets, fo);
    auto meta = provenance(config, "finetune");
    meta["mode"] = a.mode;
    save_checkpoint(encoder, a.out, meta);
  } else {
    throw Error("finetune: unknown mode '" + a.mode + "'");
  }
  const std::size_t n = report.losses.size();
  std::cout << "finetuned (" << a.mode << ") for " << report.steps << " steps\n";
  return {{"inputs", inputs},
          {"outputs", outputs},
          {"metrics",
           {{"mode", a.mode},
            {"steps", report.steps},
            {"first10_loss", mean_of(report.losses, 0, 10)},
            {"last10_loss", mean_of(report.losses, n >= 10 ? n - 10 : 0, n)},
            {"loss", report.losses}}}};
}

struct EncodeArgs {
  std::string model, vocab, input, out;
  std::size_t max_len = 32;
};

json run_encode(const EncodeArgs& a, RunConfig& config) {
  auto vocab = text::Vocabulary::load(a.vocab);
  auto encoder = load_encoder(a.model);
  config.model = encoder.config();
  auto items = read_passages(a.input);
  auto vectors = encode_texts(encoder, vocab, passage_texts(items), a.max_len);
  std::string out;
  char buf[32];
  for (std::size_t i = 0; i < items.size(); ++i) {
    out += items[i].id;
    out += '\t';
    for (std::size_t j = 0; j < vectors[i].size(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", vectors[i][j]);
      if (j) out += ' ';
      out += buf;
    }
    out += '\n';
  }
  io::write_atomic(a.out, out);
  std::cout << "encoded " << items.size() << " texts\n";
  return {{"inputs", {{"model", a.model}, {"vocab", a.vocab}, {"input", a.input}}},
          {"outputs", {{"vectors", a.out}}},
          {"metrics", {{"count", items.size()}, {"dim", encoder.config().hidden_dim}, {"max_len", a.max_len}}}};
}

struct IndexArgs {
  std::string model, vocab, passages, out;
  std::size_t max_len = 32;
};

json run_index(const IndexArgs& a, RunConfig& config) {
  auto vocab = text::Vocabulary::load(a.vocab);
  auto encoder = load_encoder(a.model);
  config.model = encoder.config();
  auto index = build_index(encoder, vocab, read_passages(a.passages), a.max_len);
  index.save(a.out);
  std::cout << "indexed " << index.size() << " passages\n";
  return {{"inputs", {{"model", a.model}, {"vocab", a.vocab}, {"passages", a.passages}}},
          {"outputs", {{"index", a.out}}},
          {"metrics", {{"passages", index.size()}, {"dim", index.dim()}}}};
}

struct SearchArgs {
  std::string model, vocab, index, queries, out, tag = "condenser";
  std::size_t k = 100, max_len = 32;
};

json run_search(const SearchArgs& a, RunConfig& config) {
  auto vocab = text::Vocabulary::load(a.vocab);
  auto encoder = load_encoder(a.model);
  config.model = encoder.config();
  auto index = DenseIndex::load(a.index);
  auto queries = read_passages(a.queries);
  auto run = search_all(index, encode_queries(encoder, vocab, queries, a.max_len), a.k);
  write_run(a.out, run, a.tag);
  std::cout << "searched " << queries.size() << " queries\n";
  return {{"inputs", {{"model", a.model}, {"vocab", a.vocab}, {"index", a.index}, {"queries", a.queries}}},
          {"outputs", {{"run", a.out}}},
          {"metrics", {{"queries", queries.size()}, {"k", a.k}}}};
}

struct MineArgs {
  std::string model, vocab, index, pairs, qrels, out;
  std::size_t depth = 20, max_len = 32;
};

json run_mine(const MineArgs& a, RunConfig& config) {
  auto vocab = text::Vocabulary::load(a.vocab);
  auto encoder = load_encoder(a.model);
  config.model = encoder.config();
  auto index = DenseIndex::load(a.index);
  auto pairs = read_training_pairs(a.pairs);
  auto qrels = read_qrels(a.qrels);
  std::vector<Passage> queries;
  std::set<std::string> seen;
  for (const auto& p : pairs)
    if (seen.insert(p.query_id).second) queries.push_back({p.query_id, p.query_text});
  auto mined = mine_hard_negatives(index, encode_queries(encoder, vocab, queries, a.max_len), qrels, a.depth);
  std::size_t before = 0, after = 0;
  for (const auto& p : pairs) before += p.negative_ids.size();
  auto extended = append_negatives(std::move(pairs), mined);
  for (const auto& p : extended) after += p.negative_ids.size();
  write_training_pairs(a.out, extended);
  std::cout << "added " << after - before << " negatives\n";
  return {{"inputs",
           {{"model", a.model}, {"vocab", a.vocab}, {"index", a.index}, {"pairs", a.pairs}, {"qrels", a.qrels}}},
          {"outputs", {{"pairs", a.out}}},
          {"metrics",
           {{"queries", queries.size()}, {"depth", a.depth}, {"negatives_before", before}, {"negatives_after", after}}}};
}

struct EvalArgs {
  std::string run, qrels, metrics = "mrr@10,ndcg@10,recall@100,top5,top20";
  std::string model, vocab, scored_pairs, triplets;
  std::size_t max_len = 32;
};

json run_eval(const EvalArgs& a, RunConfig& config) {
  json metrics = json::object();
  json inputs = json::object();
  auto show = [&](const std::string& name, double value) {
    metrics[name] = value;
    std::cout << name << " = " << value << "\n";
  };
  if (!a.run.empty() || !a.qrels.empty()) {
    if (a.run.empty() || a.qrels.empty()) throw Error("eval: --run and --qrels go together");
    auto run = read_run(a.run);
    auto qrels = read_qrels(a.qrels);
    inputs["run"] = a.run;
    inputs["qrels"] = a.qrels;
    for (const auto& name : io::split(a.metrics, ',')) {
      if (name.empty()) continue;
      auto [metric, k] = parse_metric(name);
      show(name, mean_metric(run, qrels, metric, k));
    }
    metrics["judged_queries"] = qrels.size();
  }
  if (!a.scored_pairs.empty() || !a.triplets.empty()) {
    if (a.model.empty() || a.vocab.empty()) throw Error("eval: --model and --vocab needed for pair metrics");
    auto vocab = text::Vocabulary::load(a.vocab);
    auto encoder = load_encoder(a.model);
    config.model = encoder.config();
    inputs["model"] = a.model;
    if (!a.scored_pairs.empty()) {
      auto pairs = read_scored_pairs(a.scored_pairs);
      std::vector<std::string> left, right;
      std::vector<double> gold, predicted;
      for (const auto& p : pairs) {
        left.push_back(p.text_a);
        right.push_back(p.text_b);
        gold.push_back(p.score);
      }
      auto va = encode_texts(encoder, vocab, left, a.max_len), vb = encode_texts(encoder, vocab, right, a.max_len);
      for (std::size_t i = 0; i < pairs.size(); ++i) {
        double dot = 0, na = 0, nb = 0;
        for (std::size_t j = 0; j < va[i].size(); ++j) {
          dot += va[i][j] * vb[i][j];
          na += va[i][j] * va[i][j];
          nb += vb[i][j] * vb[i][j];
        }
        predicted.push_back(dot / std::sqrt(na * nb));
      }
      inputs["scored_pairs"] = a.scored_pairs;
      show("spearman", spearman(predicted, gold));
    }
    if (!a.triplets.empty()) {
      inputs["triplets"] = a.triplets;
      show("pairwise_accuracy", pairwise_accuracy(encoder, vocab, read_triplets(a.triplets), a.max_len));
    }
  }
  if (inputs.empty()) throw Error("eval: nothing to evaluate; give --run/--qrels or --scored-pairs/--triplets");
  return {{"inputs", inputs}, {"outputs", json::object()}, {"metrics", metrics}};
}

struct AttentionArgs {
  std::string model, vocab, corpus, out, tag;
  std::vector<std::string> compare;
  std::size_t max_len = 32, max_samples = 256;
};

json run_attention(const AttentionArgs& a, RunConfig& config) {
  if (!a.compare.empty()) {
    if (a.compare.size() != 2) throw Error("analyze-attention: --compare takes two profile files");
    auto pa = read_profile_csv(a.compare[0]), pb = read_profile_csv(a.compare[1]);
    auto cmp = compare_profiles(pa, pb);
    write_comparison_csv(a.out, cmp);
    std::cout << "mean |delta| " << cmp.mean_abs_delta << " nats\n";
    return {{"inputs", {{"profiles", a.compare}}},
            {"outputs", {{"comparison", a.out}}},
            {"metrics", {{"mean_abs_delta", cmp.mean_abs_delta}, {"max_abs_delta", cmp.max_abs_delta}}}};
  }
  if (a.model.empty() || a.vocab.empty() || a.corpus.empty())
    throw Error("analyze-attention: --model, --vocab and --corpus required");
  auto vocab = text::Vocabulary::load(a.vocab);
  auto encoder = load_encoder(a.model);
  config.model = encoder.config();
  const std::string tag = a.tag.empty() ? fs::path(a.model).stem().string() : a.tag;
  auto profile = cls_attention_entropy(encoder, vocab, text::read_corpus(a.corpus), a.max_len, a.max_samples, tag);
  write_profile_csv(a.out, profile);
  for (std::size_t l = 0; l < profile.layers(); ++l)
    std::cout << "layer " << l << ": " << profile.mean[l] << " nats\n";
  return {{"inputs", {{"model", a.model}, {"vocab", a.vocab}, {"corpus", a.corpus}}},
          {"outputs", {{"profile", a.out}}},
          {"metrics", {{"samples", profile.samples}, {"mean_entropy", profile.mean}, {"std", profile.stddev}}}};
}

struct SynthArgs {
  std::string out;
  SyntheticOptions options;
};

json run_synth(SynthArgs a, RunConfig& config) {
  a.options.seed = config.seed;
  auto data = make_synthetic_dataset(a.options);
  write_synthetic_dataset(a.out, data);
  std::cout << "wrote synthetic dataset to " << a.out << "\n";
  return {{"inputs", json::object()},
          {"outputs", {{"directory", a.out}}},
          {"metrics",
           {{"documents", data.documents.size()},
            {"passages", data.passages.size()},
            {"train_pairs", data.train_pairs.size()},
            {"test_queries", data.test_queries.size()},
            {"topics", a.options.topics}}}};
}

}  // namespace

int main(int argc, char** argv) {
  auto logger = spdlog::stderr_color_mt("condenser");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::info);
  spdlog::cfg::load_env_levels();  // SPDLOG_LEVEL=debug|info|warn|error|off

  CLI::App app{"Condenser pre-training, dense retrieval and attention analysis"};
  app.failure_message(CLI::FailureMessage::help);
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  Globals g;
  app.add_option("--seed", g.seed, "Seed for initialization, masking, shuffling and sampling");
  app.add_option("--config", g.config_path, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--threads", g.threads, "Worker threads for kernels");
  app.add_option("--report", g.report_path, "Report path (default: <output>.report.json)");

  std::string command;
  auto sub = [&](const char* name, const char* help) {
    auto* s = app.add_subcommand(name, help);
    s->callback([&command, name] { command = name; });
    return s;
  };

  VocabArgs vocab_args;
  {
    auto* s = sub("vocab", "Build a vocabulary from one or more corpora");
    s->add_option("--corpus", vocab_args.corpus, "Corpus file, one document per line")->required()
        ->check(CLI::ExistingFile);
    s->add_option("--out", vocab_args.out, "Vocabulary file")->required();
    s->add_option("--max-size", vocab_args.max_size, "Maximum size including reserved tokens (0 = all)");
    s->add_option("--min-count", vocab_args.min_count, "Minimum token count");
  }
  PretrainArgs pre;
  {
    auto* s = sub("pretrain", "Masked language model pre-training");
    s->add_option("--corpus", pre.corpus)->required()->check(CLI::ExistingFile);
    s->add_option("--vocab", pre.vocab)->required()->check(CLI::ExistingFile);
    s->add_option("--out", pre.out, "Checkpoint path")->required();
    s->add_option("--kind", pre.kind, "condenser-full or mlm-full")
        ->check(CLI::IsMember({"condenser-full", "mlm-full"}));
    s->add_option("--resume", pre.resume, "Training state to continue from")->check(CLI::ExistingFile);
    s->add_option("--state-out", pre.state_out, "Write the training state here");
    s->add_option("--max-steps", pre.max_steps, "Stop after this many steps");
    s->add_option("--epochs", pre.epochs);
    s->add_option("--micro-batch", pre.micro_batch);
    s->add_option("--accumulation", pre.accumulation);
    s->add_option("--max-len", pre.max_len);
    s->add_option("--lr", pre.lr, "Peak learning rate");
  }
  ReduceArgs red;
  {
    auto* s = sub("reduce", "Drop the head and projection, keeping the backbone encoder");
    s->add_option("--in", red.in)->required()->check(CLI::ExistingFile);
    s->add_option("--out", red.out)->required();
  }
  FinetuneArgs ft;
  {
    auto* s = sub("finetune", "Fine-tune an encoder");
    s->add_option("--mode", ft.mode)->check(CLI::IsMember({"contrastive", "regression", "triplet"}));
    s->add_option("--init", ft.init, "Starting checkpoint (full or reduced)")->check(CLI::ExistingFile);
    s->add_option("--vocab", ft.vocab)->required()->check(CLI::ExistingFile);
    s->add_option("--out", ft.out)->required();
    s->add_option("--passage-out", ft.passage_out, "Passage encoder checkpoint (two-tower)");
    s->add_option("--pairs", ft.pairs, "Training pairs (contrastive) or scored pairs (regression)")
        ->check(CLI::ExistingFile);
    s->add_option("--passages", ft.passages)->check(CLI::ExistingFile);
    s->add_option("--triplets", ft.triplets)->check(CLI::ExistingFile);
    s->add_option("--epochs", ft.epochs);
    s->add_option("--batch-size", ft.batch_size);
    s->add_option("--accumulation", ft.accumulation);
    s->add_option("--max-len", ft.max_len);
    s->add_option("--passages-per-query", ft.passages_per_query);
    s->add_option("--lr", ft.lr);
    s->add_option("--margin", ft.margin);
    s->add_flag("--no-dropout", ft.no_dropout);
    s->add_flag("--no-in-batch", ft.no_in_batch);
    s->add_flag("--no-random-fill", ft.no_random_fill);
    s->add_flag("--two-tower", ft.two_tower);
  }
  EncodeArgs enc;
  {
    auto* s = sub("encode", "Write CLS vectors for id<TAB>text lines");
    s->add_option("--model", enc.model)->required()->check(CLI::ExistingFile);
    s->add_option("--vocab", enc.vocab)->required()->check(CLI::ExistingFile);
    s->add_option("--input", enc.input)->required()->check(CLI::ExistingFile);
    s->add_option("--out", enc.out)->required();
    s->add_option("--max-len", enc.max_len);
  }
  IndexArgs idx;
  {
    auto* s = sub("index", "Encode passages into a flat inner-product index");
    s->add_option("--model", idx.model)->required()->check(CLI::ExistingFile);
    s->add_option("--vocab", idx.vocab)->required()->check(CLI::ExistingFile);
    s->add_option("--passages", idx.passages)->required()->check(CLI::ExistingFile);
    s->add_option("--out", idx.out)->required();
    s->add_option("--max-len", idx.max_len);
  }
  SearchArgs sea;
  {
    auto* s = sub("search", "Exact top-k search; writes a TREC run file");
    s->add_option("--model", sea.model, "Query encoder")->required()->check(CLI::ExistingFile);
    s->add_option("--vocab", sea.vocab)->required()->check(CLI::ExistingFile);
    s->add_option("--index", sea.index)->required()->check(CLI::ExistingFile);
    s->add_option("--queries", sea.queries, "id<TAB>text lines")->required()->check(CLI::ExistingFile);
    s->add_option("--out", sea.out)->required();
    s->add_option("-k,--k", sea.k);
    s->add_option("--tag", sea.tag);
    s->add_option("--max-len", sea.max_len);
  }
  MineArgs mine;
  {
    auto* s = sub("mine-negatives", "Append retrieved non-relevant passages as negatives");
    s->add_option("--model", mine.model)->required()->check(CLI::ExistingFile);
    s->add_option("--vocab", mine.vocab)->required()->check(CLI::ExistingFile);
    s->add_option("--index", mine.index)->required()->check(CLI::ExistingFile);
    s->add_option("--pairs", mine.pairs)->required()->check(CLI::ExistingFile);
    s->add_option("--qrels", mine.qrels)->required()->check(CLI::ExistingFile);
    s->add_option("--out", mine.out)->required();
    s->add_option("--depth", mine.depth);
    s->add_option("--max-len", mine.max_len);
  }
  EvalArgs ev;
  {
    auto* s = sub("eval", "Retrieval metrics from a run file, or pair metrics from a model");
    s->add_option("--run", ev.run)->check(CLI::ExistingFile);
    s->add_option("--qrels", ev.qrels)->check(CLI::ExistingFile);
    s->add_option("--metrics", ev.metrics, "Comma-separated, e.g. mrr@10,recall@100,ndcg@10,top20");
    s->add_option("--model", ev.model)->check(CLI::ExistingFile);
    s->add_option("--vocab", ev.vocab)->check(CLI::ExistingFile);
    s->add_option("--scored-pairs", ev.scored_pairs, "Spearman of cosine against gold scores")
        ->check(CLI::ExistingFile);
    s->add_option("--triplets", ev.triplets, "Pairwise accuracy")->check(CLI::ExistingFile);
    s->add_option("--max-len", ev.max_len);
  }
  AttentionArgs att;
  {
    auto* s = sub("analyze-attention", "Per-layer CLS attention entropy profile");
    s->add_option("--model", att.model)->check(CLI::ExistingFile);
    s->add_option("--vocab", att.vocab)->check(CLI::ExistingFile);
    s->add_option("--corpus", att.corpus)->check(CLI::ExistingFile);
    s->add_option("--out", att.out, "Profile CSV (or comparison CSV with --compare)")->required();
    s->add_option("--tag", att.tag);
    s->add_option("--max-len", att.max_len);
    s->add_option("--max-samples", att.max_samples);
    s->add_option("--compare", att.compare, "Two profile CSVs to compare")->expected(2)
        ->check(CLI::ExistingFile);
  }
  SynthArgs syn;
  {
    auto* s = sub("synth", "Write a clustered topical synthetic dataset");
    s->add_option("--out", syn.out, "Output directory")->required();
    s->add_option("--topics", syn.options.topics);
    s->add_option("--passages-per-topic", syn.options.passages_per_topic);
    s->add_option("--documents-per-topic", syn.options.documents_per_topic);
    s->add_option("--train-pairs", syn.options.train_pairs);
    s->add_option("--test-queries-per-topic", syn.options.test_queries_per_topic);
    s->add_option("--explicit-negatives", syn.options.explicit_negatives);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  const std::map<std::string, std::pair<std::function<json(RunConfig&)>, std::string>> table{
      {"vocab", {[&](RunConfig& c) { return run_vocab(vocab_args, c); }, vocab_args.out}},
      {"pretrain", {[&](RunConfig& c) { return run_pretrain(pre, c); }, pre.out}},
      {"reduce", {[&](RunConfig& c) { return run_reduce(red, c); }, red.out}},
      {"finetune", {[&](RunConfig& c) { return run_finetune(ft, c); }, ft.out}},
      {"encode", {[&](RunConfig& c) { return run_encode(enc, c); }, enc.out}},
      {"index", {[&](RunConfig& c) { return run_index(idx, c); }, idx.out}},
      {"search", {[&](RunConfig& c) { return run_search(sea, c); }, sea.out}},
      {"mine-negatives", {[&](RunConfig& c) { return run_mine(mine, c); }, mine.out}},
      {"eval", {[&](RunConfig& c) { return run_eval(ev, c); }, ev.run.empty() ? "eval" : ev.run + ".eval"}},
      {"analyze-attention", {[&](RunConfig& c) { return run_attention(att, c); }, att.out}},
      {"synth", {[&](RunConfig& c) { return run_synth(syn, c); }, (fs::path(syn.out) / "synth").string()}},
  };

  try {
    RunConfig config = resolve_config(g);
    set_num_threads(config.threads);
    const auto& [fn, primary] = table.at(command);
    const auto t0 = std::chrono::steady_clock::now();
    json body = fn(config);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const fs::path report = g.report_path.empty() ? fs::path(primary + ".report.json") : fs::path(g.report_path);
    write_report(report, command, config, std::move(body), seconds);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
