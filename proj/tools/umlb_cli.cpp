// umlb: a desk-scale lab for studying and erasing verbatim memorization in a
// toy byte-level transformer. Subcommands cover the full pipeline: pretrain,
// memorize, select blocks, erase with one of the implemented methods,
// evaluate, sweep k, dump attention patterns, render comparison reports.

#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "umlb/erasers.hpp"
#include "umlb/io.hpp"
#include "umlb/metrics.hpp"
#include "umlb/model.hpp"
#include "umlb/selection.hpp"

namespace fs = std::filesystem;
using namespace umlb;

namespace {

struct CliState {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<std::string> corpus_path;

  ExperimentConfig resolve() const {
    json j = json::object();
    if (!config_path.empty()) j = json::parse(read_text_file(config_path));
    for (const auto& o : overrides) apply_override(j, o);
    ExperimentConfig cfg = j.get<ExperimentConfig>();
    if (seed) cfg.seed = *seed;
    if (out_dir) cfg.out_dir = *out_dir;
    if (corpus_path) cfg.corpus.path = *corpus_path;
    cfg.validate();
    return cfg;
  }
};

void add_common(CLI::App* cmd, CliState& st) {
  cmd->add_option("--config", st.config_path, "experiment config JSON");
  cmd->add_option("--set", st.overrides, "override config values, key.path=value");
  cmd->add_option("--seed", st.seed, "root seed (overrides config)");
  cmd->add_option("--out-dir", st.out_dir, "output directory (overrides config)");
  cmd->add_option("--corpus", st.corpus_path, "corpus file (overrides config)");
}

CorpusSplits load_splits(const ExperimentConfig& cfg) {
  if (cfg.corpus.path.empty()) throw InvalidInput("no corpus configured (--corpus or config)");
  return ingest_corpus(cfg.corpus.path, cfg.corpus, cfg.model.context, cfg.seed);
}

void write_manifest(const ExperimentConfig& cfg, const std::string& command,
                    const std::vector<fs::path>& inputs) {
  json j;
  j["command"] = command;
  j["config"] = cfg;
  j["config_hash"] = hex64(fnv1a64(json(cfg).dump()));
  j["seed"] = cfg.seed;
  json in = json::object();
  for (const auto& p : inputs)
    if (fs::exists(p)) in[p.string()] = hex64(file_content_hash(p));
  j["inputs"] = in;
  write_text_file(fs::path(cfg.out_dir) / ("manifest_" + command + ".json"), j.dump(2) + "\n");
}

MetricReport evaluate_checkpoint(const ModelParams<float>& params, const CorpusSplits& splits,
                                 const ExperimentConfig& cfg,
                                 const ModelParams<float>* cd_memo = nullptr,
                                 double cd_gamma = 0.3) {
  auto val = token_seqs(splits.retain_val);
  if (cd_memo) {
    ContrastiveDecodeModel<float> m{&params, cd_memo, cd_gamma};
    return evaluate_model(m, splits.forget, val, splits.utility_prompts, cfg.metrics);
  }
  TransformerModel<float> m{&params};
  return evaluate_model(m, splits.forget, val, splits.utility_prompts, cfg.metrics);
}

void save_run_artifacts(const ExperimentConfig& cfg, const EraseRun<float>& run,
                        const std::string& tag) {
  fs::path dir(cfg.out_dir);
  save_checkpoint(dir / (tag + ".umlb"), run.model,
                  json{{"lineage", tag}, {"seed", cfg.seed}});
  write_text_file(dir / (tag + "_log.jsonl"), run_log_lines(run.epochs));
  if (run.mask_rounds.size() > 1)
    write_text_file(dir / (tag + "_mask_frequency.txt"), mask_frequency_text(run.mask_rounds));
  if (run.decode_reference)
    save_checkpoint(dir / (tag + "_reference.umlb"), *run.decode_reference,
                    json{{"lineage", tag + "_reference"}, {"seed", cfg.seed}});
}

int cmd_train_base(const CliState& st) {
  auto cfg = st.resolve();
  fs::create_directories(cfg.out_dir);
  auto splits = load_splits(cfg);
  auto params = init_model<float>(cfg.model, cfg.seed);
  double loss = train_lm(params, splits.retain_train, cfg.train.epochs, cfg.train.lr,
                         cfg.train.batch_size, substream_seed(cfg.seed, "train_base"));
  save_checkpoint(fs::path(cfg.out_dir) / "base.umlb", params,
                  json{{"lineage", "train-base"}, {"seed", cfg.seed}});
  double ppl = perplexity(TransformerModel<float>{&params}, token_seqs(splits.retain_val));
  std::cout << "train-base: final loss " << loss << ", retain-val perplexity " << ppl << "\n";
  write_manifest(cfg, "train-base", {cfg.corpus.path});
  return 0;
}

int cmd_memorize(const CliState& st, const std::string& in) {
  auto cfg = st.resolve();
  fs::create_directories(cfg.out_dir);
  fs::path input = in.empty() ? fs::path(cfg.out_dir) / "base.umlb" : fs::path(in);
  auto loaded = load_checkpoint(input);
  auto splits = load_splits(cfg);
  MemorizeConfig mc = cfg.memorize;
  mc.seed = substream_seed(cfg.seed, "memorize");
  auto memo = induce_memorization(loaded.params, splits.forget, cfg.memorize_target_ma, mc);
  save_checkpoint(fs::path(cfg.out_dir) / "memorized.umlb", memo,
                  json{{"lineage", "memorize"}, {"seed", cfg.seed}});
  std::cout << "memorize: forget MA " << forget_ma(memo, splits.forget) << "\n";
  write_manifest(cfg, "memorize", {cfg.corpus.path, input});
  return 0;
}

int cmd_select(const CliState& st, const std::string& in) {
  auto cfg = st.resolve();
  fs::create_directories(cfg.out_dir);
  fs::path input = in.empty() ? fs::path(cfg.out_dir) / "memorized.umlb" : fs::path(in);
  auto loaded = load_checkpoint(input);
  auto splits = load_splits(cfg);
  Rng rng(substream_seed(cfg.seed, "mask_batch", 0));
  std::vector<size_t> order(splits.forget.size());
  std::iota(order.begin(), order.end(), size_t{0});
  deterministic_shuffle(order, rng);
  order.resize(std::min<size_t>(order.size(), static_cast<size_t>(cfg.erase.batch_size)));
  SequenceBatch batch;
  for (size_t i : order) batch.push_back(splits.forget[i]);
  uint64_t bseed = substream_seed(cfg.seed, "mask_batch", 0);
  auto em = snapshot_gradients(loaded.params, batch, LossKind::EM, bseed);
  auto nll = snapshot_gradients(loaded.params, batch, LossKind::NLL, bseed);
  auto scores = score_blocks(em, nll);
  auto mask = build_mask(scores, cfg.erase.k);
  if (mask.clamped)
    std::cerr << "select: k exceeds the registry, selecting all blocks\n";
  std::string text = selection_report_text(scores, mask);
  write_text_file(fs::path(cfg.out_dir) / "selection.txt", text);
  std::cout << text;
  write_manifest(cfg, "select", {cfg.corpus.path, input});
  return 0;
}

int cmd_erase(const CliState& st, const std::string& in, const std::string& method_flag) {
  auto cfg = st.resolve();
  if (!method_flag.empty()) cfg.erase.method = erase_method_from_name(method_flag);
  fs::create_directories(cfg.out_dir);
  fs::path input = in.empty() ? fs::path(cfg.out_dir) / "memorized.umlb" : fs::path(in);
  auto loaded = load_checkpoint(input);
  auto splits = load_splits(cfg);
  EraseRunConfig ec = cfg.erase;
  ec.seed = substream_seed(cfg.seed, "erase");
  auto run = erase_run(loaded.params, splits, ec);
  std::string tag = std::string("erased_") + erase_method_name(ec.method);
  save_run_artifacts(cfg, run, tag);
  std::cout << "erase(" << erase_method_name(ec.method) << "): epochs " << run.epochs.size();
  if (!run.epochs.empty()) {
    const auto& last = run.epochs.back();
    std::cout << ", MA " << last.ma << ", ppl ratio " << last.ppl_ratio;
    if (run.collapsed) std::cout << " [COLLAPSED]";
  }
  std::cout << "\n";
  write_manifest(cfg, "erase", {cfg.corpus.path, input});
  return 0;
}

int cmd_evaluate(const CliState& st, const std::string& in, const std::string& cd_memo,
                 double cd_gamma, const std::string& tag) {
  auto cfg = st.resolve();
  fs::create_directories(cfg.out_dir);
  fs::path input = in.empty() ? fs::path(cfg.out_dir) / "memorized.umlb" : fs::path(in);
  auto loaded = load_checkpoint(input);
  auto splits = load_splits(cfg);
  std::optional<LoadedCheckpoint> memo;
  if (!cd_memo.empty()) memo = load_checkpoint(cd_memo);
  auto report = evaluate_checkpoint(loaded.params, splits, cfg,
                                    memo ? &memo->params : nullptr, cd_gamma);
  std::string name = tag.empty() ? input.stem().string() : tag;
  write_text_file(fs::path(cfg.out_dir) / (name + "_metrics.txt"), report.to_text());
  std::cout << report.to_text();
  write_manifest(cfg, "evaluate", {cfg.corpus.path, input});
  return 0;
}

int cmd_sweep_k(const CliState& st, const std::string& in, const std::string& values) {
  auto cfg = st.resolve();
  fs::create_directories(cfg.out_dir);
  fs::path input = in.empty() ? fs::path(cfg.out_dir) / "memorized.umlb" : fs::path(in);
  auto loaded = load_checkpoint(input);
  auto splits = load_splits(cfg);
  std::vector<int> ks;
  std::stringstream ss(values);
  for (std::string part; std::getline(ss, part, ',');) ks.push_back(std::stoi(part));
  if (ks.empty()) throw InvalidInput("sweep-k: no k values given");
  std::ostringstream csv;
  csv << "k,el,ma,ematch_mean,ppl,rep,div\n";
  for (int k : ks) {
    EraseRunConfig ec = cfg.erase;
    ec.method = EraseMethod::EMSO;
    ec.k = k;
    ec.seed = substream_seed(cfg.seed, "erase");
    auto run = erase_run(loaded.params, splits, ec);
    auto rep = evaluate_checkpoint(run.model, splits, cfg);
    std::string tag = "sweep_k" + std::to_string(k);
    save_run_artifacts(cfg, run, tag);
    write_text_file(fs::path(cfg.out_dir) / (tag + "_metrics.txt"), rep.to_text());
    csv << k << "," << (rep.el.empty() ? 0.0 : rep.el.begin()->second) << "," << rep.ma << ","
        << rep.ematch_mean << "," << rep.ppl << ","
        << (rep.rep.empty() ? 0.0 : rep.rep.begin()->second) << ","
        << (rep.div.empty() ? 1.0 : rep.div.begin()->second) << "\n";
    std::cout << "sweep-k: k=" << k << " MA " << rep.ma << "\n";
  }
  write_text_file(fs::path(cfg.out_dir) / "sweep_k.csv", csv.str());
  write_manifest(cfg, "sweep-k", {cfg.corpus.path, input});
  return 0;
}

int cmd_attn_dump(const CliState& st, const std::string& in, int layer, int head,
                  const std::string& text, int index) {
  auto cfg = st.resolve();
  fs::create_directories(cfg.out_dir);
  fs::path input = in.empty() ? fs::path(cfg.out_dir) / "memorized.umlb" : fs::path(in);
  auto loaded = load_checkpoint(input);
  std::vector<int> tokens;
  if (!text.empty()) {
    tokens.push_back(Vocabulary::kBos);
    for (int id : Vocabulary::encode(text)) tokens.push_back(id);
  } else {
    auto splits = load_splits(cfg);
    if (index < 0 || index >= static_cast<int>(splits.forget.size()))
      throw InvalidInput("attn-dump: --index out of range of the forget split");
    tokens = splits.forget[static_cast<size_t>(index)].tokens;
  }
  auto pat = attention_pattern(loaded.params, tokens, layer, head);
  std::ostringstream csv;
  csv.precision(8);
  for (int i = 0; i < pat.rows(); ++i) {
    for (int j = 0; j < pat.cols(); ++j) csv << (j ? "," : "") << pat.at(i, j);
    csv << "\n";
  }
  fs::path out = fs::path(cfg.out_dir) /
                 ("attn_L" + std::to_string(layer) + "H" + std::to_string(head) + ".csv");
  write_text_file(out, csv.str());
  std::cout << "attn-dump: wrote " << out.string() << "\n";
  return 0;
}

int cmd_report(const CliState& st, const std::vector<std::string>& inputs,
               const std::vector<std::string>& collapsed) {
  auto cfg = st.resolve();
  fs::create_directories(cfg.out_dir);
  std::vector<ReportRow> rows;
  for (const auto& spec : inputs) {
    auto eq = spec.find('=');
    if (eq == std::string::npos)
      throw InvalidInput("report: --row expects name=metrics_path, got '" + spec + "'");
    ReportRow row;
    row.method = spec.substr(0, eq);
    row.metrics = MetricReport::from_text(read_text_file(spec.substr(eq + 1)));
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw InvalidInput("report: no rows given");
  // collapse classification relative to the "original" row when present
  const MetricReport* original = nullptr;
  for (const auto& r : rows)
    if (r.method == "original") original = &r.metrics;
  for (auto& r : rows) {
    double rep2 = r.metrics.rep.count(2) ? r.metrics.rep.at(2) : 0.0;
    bool degen = rep2 > 0.9;
    bool gibberish = original && original->ppl > 0.0 &&
                     r.metrics.ppl / original->ppl > 10.0 && rep2 <= 0.9;
    r.collapsed = degen || gibberish;
  }
  for (const auto& name : collapsed)
    for (auto& r : rows)
      if (r.method == name) r.collapsed = true;
  std::string text = render_report(rows);
  write_text_file(fs::path(cfg.out_dir) / "report.txt", text);
  write_text_file(fs::path(cfg.out_dir) / "report.csv", report_csv(rows));
  std::cout << text;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"umlb: verbatim-memorization erasure lab for a toy transformer"};
  app.require_subcommand(1);

  CliState st;
  std::string in, method, cd_memo, values = "1,2,3,4", text, tag;
  double cd_gamma = 0.3;
  int layer = 0, head = 0, index = 0;
  std::vector<std::string> rows, collapsed;

  auto* c_train = app.add_subcommand("train-base", "pretrain the base model on the retain split");
  add_common(c_train, st);

  auto* c_memo = app.add_subcommand("memorize", "overfit the forget split to the target MA");
  add_common(c_memo, st);
  c_memo->add_option("--in", in, "input checkpoint (default <out>/base.umlb)");

  auto* c_sel = app.add_subcommand("select", "score blocks with the contrastive gradient metric");
  add_common(c_sel, st);
  c_sel->add_option("--in", in, "input checkpoint (default <out>/memorized.umlb)");

  auto* c_erase = app.add_subcommand("erase", "run an erasure method");
  add_common(c_erase, st);
  c_erase->add_option("--in", in, "input checkpoint (default <out>/memorized.umlb)");
  c_erase->add_option("--method", method,
                      "emso|ga|di|gd|kl|ta|cd|select-nll|random-em|no-dir|full-em");
  int k_flag = -1, epochs_flag = -1;
  double lr_flag = -1.0, gamma_flag = -1.0, tau_flag = -1.0;
  c_erase->add_option("--k", k_flag, "selected blocks");
  c_erase->add_option("--epochs", epochs_flag, "max epochs");
  c_erase->add_option("--lr", lr_flag, "learning rate");
  c_erase->add_option("--gamma", gamma_flag, "method strength");
  c_erase->add_option("--tau", tau_flag, "early-stop perplexity ratio");

  auto* c_eval = app.add_subcommand("evaluate", "compute the metric report for a checkpoint");
  add_common(c_eval, st);
  c_eval->add_option("--in", in, "checkpoint to evaluate");
  c_eval->add_option("--cd-memo", cd_memo, "evaluate with contrastive decoding against this model");
  c_eval->add_option("--cd-gamma", cd_gamma, "contrastive decoding strength");
  c_eval->add_option("--tag", tag, "output name (default: checkpoint stem)");

  auto* c_sweep = app.add_subcommand("sweep-k", "EMSO reports across k values");
  add_common(c_sweep, st);
  c_sweep->add_option("--in", in, "input checkpoint (default <out>/memorized.umlb)");
  c_sweep->add_option("--values", values, "comma-separated k values");

  auto* c_attn = app.add_subcommand("attn-dump", "export one head's attention pattern as CSV");
  add_common(c_attn, st);
  c_attn->add_option("--in", in, "input checkpoint (default <out>/memorized.umlb)");
  c_attn->add_option("--layer", layer, "layer index")->required();
  c_attn->add_option("--head", head, "head index")->required();
  c_attn->add_option("--text", text, "input text (default: forget sequence --index)");
  c_attn->add_option("--index", index, "forget-split sequence index");

  auto* c_rep = app.add_subcommand("report", "render a comparison grid from metric files");
  add_common(c_rep, st);
  c_rep->add_option("--row", rows, "name=metrics_path (repeatable)");
  c_rep->add_option("--collapsed", collapsed, "mark a row as collapsed (repeatable)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (c_erase->parsed()) {
      if (k_flag > 0) st.overrides.push_back("erase.k=" + std::to_string(k_flag));
      if (epochs_flag >= 0)
        st.overrides.push_back("erase.max_epochs=" + std::to_string(epochs_flag));
      if (lr_flag >= 0.0) st.overrides.push_back("erase.lr=" + std::to_string(lr_flag));
      if (gamma_flag >= 0.0) st.overrides.push_back("erase.gamma=" + std::to_string(gamma_flag));
      if (tau_flag > 0.0) st.overrides.push_back("erase.tau=" + std::to_string(tau_flag));
    }
    if (c_train->parsed()) return cmd_train_base(st);
    if (c_memo->parsed()) return cmd_memorize(st, in);
    if (c_sel->parsed()) return cmd_select(st, in);
    if (c_erase->parsed()) return cmd_erase(st, in, method);
    if (c_eval->parsed()) return cmd_evaluate(st, in, cd_memo, cd_gamma, tag);
    if (c_sweep->parsed()) return cmd_sweep_k(st, in, values);
    if (c_attn->parsed()) return cmd_attn_dump(st, in, layer, head, text, index);
    if (c_rep->parsed()) return cmd_report(st, rows, collapsed);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
