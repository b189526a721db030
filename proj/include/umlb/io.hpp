#pragma once

// Persistence and ingestion: the UMLB checkpoint format, newline-delimited
// corpus loading with seeded splits, experiment configuration, run logs and
// report rendering. The only header that touches JSON.

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "umlb/erasers.hpp"
#include "umlb/losses.hpp"
#include "umlb/metrics.hpp"
#include "umlb/model.hpp"
#include "umlb/util.hpp"

namespace umlb {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// json bindings

inline void to_json(json& j, const ModelConfig& c) {
  j = json{{"n_layers", c.n_layers}, {"n_heads", c.n_heads},   {"d_model", c.d_model},
           {"d_ff", c.d_ff},         {"vocab_size", c.vocab_size}, {"context", c.context}};
}

inline void from_json(const json& j, ModelConfig& c) {
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_model = j.value("d_model", c.d_model);
  c.d_ff = j.value("d_ff", c.d_ff);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.context = j.value("context", c.context);
}

inline void to_json(json& j, const EraseRunConfig& c) {
  j = json{{"method", erase_method_name(c.method)},
           {"k", c.k},
           {"lr", c.lr},
           {"optimizer", c.optimizer},
           {"batch_size", c.batch_size},
           {"max_epochs", c.max_epochs},
           {"tau", c.tau},
           {"recompute_mask_each_epoch", c.recompute_mask_each_epoch},
           {"gd_retain_weight", c.gd_retain_weight},
           {"kl_retain_weight", c.kl_retain_weight},
           {"memo_epochs", c.memo_epochs},
           {"stop_at_ma", c.stop_at_ma},
           {"stop_on_collapse", c.stop_on_collapse},
           {"collapse_rep2", c.collapse_rep2},
           {"collapse_ppl_ratio", c.collapse_ppl_ratio},
           {"log_el_sample", c.log_el_sample},
           {"log_el_n", c.log_el_n},
           {"log_prompts", c.log_prompts},
           {"gen_max_new", c.gen_max_new},
           {"prompt_tokens", c.prompt_tokens},
           {"seed", c.seed}};
  if (c.gamma) j["gamma"] = *c.gamma;
}

inline void from_json(const json& j, EraseRunConfig& c) {
  if (j.contains("method")) c.method = erase_method_from_name(j.at("method").get<std::string>());
  c.k = j.value("k", c.k);
  c.lr = j.value("lr", c.lr);
  c.optimizer = j.value("optimizer", c.optimizer);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.tau = j.value("tau", c.tau);
  if (j.contains("gamma")) c.gamma = j.at("gamma").get<double>();
  c.recompute_mask_each_epoch = j.value("recompute_mask_each_epoch", c.recompute_mask_each_epoch);
  c.gd_retain_weight = j.value("gd_retain_weight", c.gd_retain_weight);
  c.kl_retain_weight = j.value("kl_retain_weight", c.kl_retain_weight);
  c.memo_epochs = j.value("memo_epochs", c.memo_epochs);
  c.stop_at_ma = j.value("stop_at_ma", c.stop_at_ma);
  c.stop_on_collapse = j.value("stop_on_collapse", c.stop_on_collapse);
  c.collapse_rep2 = j.value("collapse_rep2", c.collapse_rep2);
  c.collapse_ppl_ratio = j.value("collapse_ppl_ratio", c.collapse_ppl_ratio);
  c.log_el_sample = j.value("log_el_sample", c.log_el_sample);
  c.log_el_n = j.value("log_el_n", c.log_el_n);
  c.log_prompts = j.value("log_prompts", c.log_prompts);
  c.gen_max_new = j.value("gen_max_new", c.gen_max_new);
  c.prompt_tokens = j.value("prompt_tokens", c.prompt_tokens);
  c.seed = j.value("seed", c.seed);
}

struct CorpusConfig {
  std::string path;
  int forget = 50;
  int retain = 80;
  int val = 20;
  int min_bytes = 8;
  int max_bytes = 0;  // 0: limited only by model context
  double prefix_ratio = 0.5;
};

inline void to_json(json& j, const CorpusConfig& c) {
  j = json{{"path", c.path},         {"forget", c.forget},       {"retain", c.retain},
           {"val", c.val},           {"min_bytes", c.min_bytes}, {"max_bytes", c.max_bytes},
           {"prefix_ratio", c.prefix_ratio}};
}

inline void from_json(const json& j, CorpusConfig& c) {
  c.path = j.value("path", c.path);
  c.forget = j.value("forget", c.forget);
  c.retain = j.value("retain", c.retain);
  c.val = j.value("val", c.val);
  c.min_bytes = j.value("min_bytes", c.min_bytes);
  c.max_bytes = j.value("max_bytes", c.max_bytes);
  c.prefix_ratio = j.value("prefix_ratio", c.prefix_ratio);
}

struct TrainConfig {
  int epochs = 30;
  double lr = 1e-3;
  int batch_size = 8;
};

inline void to_json(json& j, const TrainConfig& c) {
  j = json{{"epochs", c.epochs}, {"lr", c.lr}, {"batch_size", c.batch_size}};
}

inline void from_json(const json& j, TrainConfig& c) {
  c.epochs = j.value("epochs", c.epochs);
  c.lr = j.value("lr", c.lr);
  c.batch_size = j.value("batch_size", c.batch_size);
}

inline void to_json(json& j, const MemorizeConfig& c) {
  j = json{{"lr", c.lr},
           {"optimizer", c.optimizer},
           {"batch_size", c.batch_size},
           {"max_epochs", c.max_epochs},
           {"check_every", c.check_every}};
}

inline void from_json(const json& j, MemorizeConfig& c) {
  c.lr = j.value("lr", c.lr);
  c.optimizer = j.value("optimizer", c.optimizer);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.check_every = j.value("check_every", c.check_every);
}

inline void to_json(json& j, const MetricSettings& c) {
  j = json{{"el_ns", c.el_ns},
           {"rep_ns", c.rep_ns},
           {"div_ns", c.div_ns},
           {"ematch_len", c.ematch_len},
           {"el_max_sequences", c.el_max_sequences},
           {"gen_max_new", c.gen_max_new},
           {"prompt_tokens", c.prompt_tokens}};
}

inline void from_json(const json& j, MetricSettings& c) {
  c.el_ns = j.value("el_ns", c.el_ns);
  c.rep_ns = j.value("rep_ns", c.rep_ns);
  c.div_ns = j.value("div_ns", c.div_ns);
  c.ematch_len = j.value("ematch_len", c.ematch_len);
  c.el_max_sequences = j.value("el_max_sequences", c.el_max_sequences);
  c.gen_max_new = j.value("gen_max_new", c.gen_max_new);
  c.prompt_tokens = j.value("prompt_tokens", c.prompt_tokens);
}

struct ExperimentConfig {
  CorpusConfig corpus;
  ModelConfig model;
  TrainConfig train;
  MemorizeConfig memorize;
  double memorize_target_ma = 0.95;
  EraseRunConfig erase;
  MetricSettings metrics;
  uint64_t seed = 1;
  std::string out_dir = "out";

  void validate() const {
    model.validate();
    erase.validate();
    if (corpus.forget < 0 || corpus.retain < 0 || corpus.val < 0)
      throw InvalidInput("config: split sizes must be nonnegative");
    if (!(corpus.prefix_ratio > 0.0 && corpus.prefix_ratio < 1.0))
      throw InvalidInput("config: prefix_ratio must be in (0,1)");
    if (!(memorize_target_ma >= 0.0 && memorize_target_ma <= 1.0))
      throw InvalidInput("config: memorize_target_ma must be in [0,1]");
  }
};

inline void to_json(json& j, const ExperimentConfig& c) {
  j = json{{"corpus", c.corpus},
           {"model", c.model},
           {"train", c.train},
           {"memorize", c.memorize},
           {"memorize_target_ma", c.memorize_target_ma},
           {"erase", c.erase},
           {"metrics", c.metrics},
           {"seed", c.seed},
           {"out_dir", c.out_dir}};
}

inline void from_json(const json& j, ExperimentConfig& c) {
  if (j.contains("corpus")) j.at("corpus").get_to(c.corpus);
  if (j.contains("model")) j.at("model").get_to(c.model);
  if (j.contains("train")) j.at("train").get_to(c.train);
  if (j.contains("memorize")) j.at("memorize").get_to(c.memorize);
  c.memorize_target_ma = j.value("memorize_target_ma", c.memorize_target_ma);
  if (j.contains("erase")) j.at("erase").get_to(c.erase);
  if (j.contains("metrics")) j.at("metrics").get_to(c.metrics);
  c.seed = j.value("seed", c.seed);
  c.out_dir = j.value("out_dir", c.out_dir);
}

// Apply "--set a.b.c=value" style overrides onto the JSON form of a config.
inline void apply_override(json& j, const std::string& spec) {
  auto eq = spec.find('=');
  if (eq == std::string::npos) throw InvalidInput("--set expects key=value, got '" + spec + "'");
  std::string key = spec.substr(0, eq);
  std::string value = spec.substr(eq + 1);
  json* node = &j;
  size_t start = 0;
  while (true) {
    size_t dot = key.find('.', start);
    std::string part = key.substr(start, dot == std::string::npos ? dot : dot - start);
    if (part.empty()) throw InvalidInput("--set: empty key segment in '" + spec + "'");
    if (dot == std::string::npos) {
      json parsed = json::parse(value, nullptr, false);
      (*node)[part] = parsed.is_discarded() ? json(value) : parsed;
      break;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

// ---------------------------------------------------------------------------
// checkpoint format
//
//   bytes 0..3   magic "UMLB"
//   u32 LE       format version (1)
//   u32 LE       metadata length
//   ...          metadata JSON (model config, vocabulary spec, lineage, seeds)
//   ...          parameters as f32 LE, canonical block order then
//                embeddings/norms (the visit order)

namespace detail_io {

inline void put_u32(std::ostream& os, uint32_t v) {
  std::array<unsigned char, 4> b{static_cast<unsigned char>(v & 0xff),
                                 static_cast<unsigned char>((v >> 8) & 0xff),
                                 static_cast<unsigned char>((v >> 16) & 0xff),
                                 static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b.data()), 4);
}

inline uint32_t get_u32(std::istream& is) {
  std::array<unsigned char, 4> b{};
  is.read(reinterpret_cast<char*>(b.data()), 4);
  if (!is) throw IoError("checkpoint: truncated header");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

inline void put_f32(std::ostream& os, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(os, bits);
}

inline float get_f32(std::istream& is) {
  uint32_t bits = get_u32(is);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace detail_io

inline constexpr char kCheckpointMagic[4] = {'U', 'M', 'L', 'B'};
inline constexpr uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::filesystem::path& path, const ModelParams<float>& params,
                            json metadata = json::object()) {
  metadata["model"] = params.cfg;
  metadata["vocab"] = {{"kind", "byte"}, {"size", params.cfg.vocab_size}};
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("checkpoint: cannot open for writing: " + path.string());
  os.write(kCheckpointMagic, 4);
  detail_io::put_u32(os, kCheckpointVersion);
  std::string meta = metadata.dump();
  detail_io::put_u32(os, static_cast<uint32_t>(meta.size()));
  os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  params.visit([&](const std::string&, const Tensor<float>& t) {
    for (float v : t.data) detail_io::put_f32(os, v);
  });
  if (!os) throw IoError("checkpoint: write failed: " + path.string());
}

struct LoadedCheckpoint {
  ModelParams<float> params;
  json metadata;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open: " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw IoError("checkpoint: bad magic in " + path.string());
  uint32_t version = detail_io::get_u32(is);
  if (version != kCheckpointVersion)
    throw IoError("checkpoint: unsupported version " + std::to_string(version));
  uint32_t meta_len = detail_io::get_u32(is);
  std::string meta(meta_len, '\0');
  is.read(meta.data(), meta_len);
  if (!is) throw IoError("checkpoint: truncated metadata");
  LoadedCheckpoint out;
  out.metadata = json::parse(meta);
  ModelConfig cfg = out.metadata.at("model").get<ModelConfig>();
  out.params = init_model<float>(cfg, 0);
  out.params.visit([&](const std::string&, Tensor<float>& t) {
    for (auto& v : t.data) v = detail_io::get_f32(is);
  });
  if (!is) throw IoError("checkpoint: truncated payload");
  return out;
}

inline uint64_t file_content_hash(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot hash missing file: " + path.string());
  uint64_t h = 0xcbf29ce484222325ull;
  char buf[8192];
  while (is.read(buf, sizeof(buf)) || is.gcount() > 0)
    h = fnv1a64(buf, static_cast<size_t>(is.gcount()), h);
  return h;
}

inline std::string hex64(uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setfill('0') << std::setw(16) << v;
  return os.str();
}

// ---------------------------------------------------------------------------
// corpus ingestion

namespace detail_io {

// Returns the byte offset of the first invalid UTF-8 byte, or npos.
inline size_t utf8_invalid_at(const std::string& s) {
  size_t i = 0;
  while (i < s.size()) {
    unsigned char c = static_cast<unsigned char>(s[i]);
    size_t need;
    if (c < 0x80) need = 0;
    else if ((c & 0xe0) == 0xc0 && c >= 0xc2) need = 1;
    else if ((c & 0xf0) == 0xe0) need = 2;
    else if ((c & 0xf8) == 0xf0 && c <= 0xf4) need = 3;
    else return i;
    for (size_t k = 1; k <= need; ++k) {
      if (i + k >= s.size() || (static_cast<unsigned char>(s[i + k]) & 0xc0) != 0x80) return i;
    }
    i += need + 1;
  }
  return std::string::npos;
}

}  // namespace detail_io

// BOS token + byte tokens, truncated to the context, split by ratio.
inline ForgetSequence make_sequence(const std::string& line, int context, double prefix_ratio,
                                    int max_bytes) {
  std::vector<int> ids = Vocabulary::encode(line);
  size_t limit = static_cast<size_t>(context - 1);
  if (max_bytes > 0) limit = std::min(limit, static_cast<size_t>(max_bytes));
  if (ids.size() > limit) ids.resize(limit);
  ForgetSequence s;
  s.tokens.push_back(Vocabulary::kBos);
  s.tokens.insert(s.tokens.end(), ids.begin(), ids.end());
  int total = static_cast<int>(s.tokens.size());
  int p = std::clamp(static_cast<int>(total * prefix_ratio), 1, total - 1);
  s.prefix_len = p;
  s.continuation_len = total - p;
  return s;
}

// Reads a newline-delimited UTF-8 corpus and deals out disjoint splits with a
// seeded shuffle. Utility prompts are the validation-sequence prefixes.
inline CorpusSplits ingest_corpus(const std::filesystem::path& path, const CorpusConfig& cfg,
                                  int context, uint64_t seed) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("corpus: cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  size_t file_offset = 0;
  std::vector<std::string> bad;
  size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    size_t invalid = detail_io::utf8_invalid_at(line);
    if (invalid != std::string::npos)
      throw InvalidInput("corpus: invalid UTF-8 at byte offset " +
                         std::to_string(file_offset + invalid) + " (line " +
                         std::to_string(line_no) + ")");
    if (static_cast<int>(line.size()) < cfg.min_bytes)
      bad.push_back("line " + std::to_string(line_no) + ": " + std::to_string(line.size()) +
                    " bytes < minimum " + std::to_string(cfg.min_bytes));
    else
      lines.push_back(line);
    file_offset += line.size() + 1;
  }
  if (!bad.empty()) {
    std::string msg = "corpus: lines shorter than minimum:";
    for (const auto& b : bad) msg += "\n  " + b;
    throw InvalidInput(msg);
  }
  if (lines.empty()) throw InvalidInput("corpus: empty file " + path.string());
  size_t need = static_cast<size_t>(cfg.forget) + cfg.retain + cfg.val;
  if (lines.size() < need)
    throw InvalidInput("corpus: " + std::to_string(lines.size()) + " usable lines but splits need " +
                       std::to_string(need));
  Rng rng(substream_seed(seed, "split"));
  deterministic_shuffle(lines, rng);
  CorpusSplits splits;
  size_t at = 0;
  auto take = [&](int n) {
    SequenceBatch b;
    for (int i = 0; i < n; ++i)
      b.push_back(make_sequence(lines[at++], context, cfg.prefix_ratio, cfg.max_bytes));
    return b;
  };
  splits.forget = take(cfg.forget);
  splits.retain_train = take(cfg.retain);
  splits.retain_val = take(cfg.val);
  for (const auto& s : splits.retain_val) splits.utility_prompts.push_back(s.tokens);
  return splits;
}

// ---------------------------------------------------------------------------
// run artifacts

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// One JSON object per line: epoch, loss, MA, EL, perplexity ratio, mask.
inline std::string run_log_lines(const std::vector<EpochLog>& epochs) {
  std::string out;
  for (const auto& e : epochs) {
    json j{{"epoch", e.epoch},
           {"loss", e.loss},
           {"ma", e.ma},
           {"ppl", e.ppl},
           {"ppl_ratio", e.ppl_ratio},
           {"rep_2", e.rep2},
           {"collapse_degeneration", e.collapse_degeneration},
           {"collapse_gibberish", e.collapse_gibberish},
           {"stopped_early", e.stopped_early},
           {"mask", e.mask}};
    if (std::isfinite(e.el3)) j["el_3"] = e.el3;
    out += j.dump() + "\n";
  }
  return out;
}

inline std::string selection_report_text(const std::vector<BlockScore>& scores,
                                         const SelectionMask& mask) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(6);
  os << "block cosine scaled_l1 m selected\n";
  for (const auto& s : scores)
    os << s.id.name() << " " << s.cosine << " " << s.scaled_l1 << " " << s.m << " "
       << (mask.contains(s.id) ? 1 : 0) << "\n";
  return os.str();
}

// Table-3-style frequency accounting over selection rounds.
inline std::string mask_frequency_text(const std::vector<std::vector<std::string>>& rounds) {
  std::map<std::string, int> freq;
  for (const auto& r : rounds)
    for (const auto& name : r) ++freq[name];
  std::vector<std::pair<std::string, int>> items(freq.begin(), freq.end());
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::ostringstream os;
  os << "block frequency (rounds=" << rounds.size() << ")\n";
  for (const auto& [name, n] : items) os << name << " " << n << "\n";
  return os.str();
}

struct ReportRow {
  std::string method;
  MetricReport metrics;
  bool collapsed = false;
};

// Comparison grid with collapse flags. Collapsed models are shown but kept
// out of the ranking columns.
inline std::string render_report(const std::vector<ReportRow>& rows) {
  std::vector<size_t> ranked;
  for (size_t i = 0; i < rows.size(); ++i)
    if (!rows[i].collapsed) ranked.push_back(i);

  // rank = mean rank over the group's metrics (lower is better everywhere
  // after orienting div upward)
  auto rank_of = [&](auto value_fn) {
    std::map<size_t, double> rank;
    std::vector<size_t> order = ranked;
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
      return value_fn(rows[a]) < value_fn(rows[b]);
    });
    for (size_t r = 0; r < order.size(); ++r) rank[order[r]] = static_cast<double>(r + 1);
    return rank;
  };
  auto get_el = [](const ReportRow& r) {
    return r.metrics.el.empty() ? 0.0 : r.metrics.el.begin()->second;
  };
  auto get_rep = [](const ReportRow& r) {
    return r.metrics.rep.empty() ? 0.0 : r.metrics.rep.begin()->second;
  };
  auto get_div = [](const ReportRow& r) {
    return r.metrics.div.empty() ? 1.0 : -r.metrics.div.begin()->second;
  };
  auto r_el = rank_of(get_el);
  auto r_ma = rank_of([](const ReportRow& r) { return r.metrics.ma; });
  auto r_em = rank_of([](const ReportRow& r) { return r.metrics.ematch_mean; });
  auto r_ppl = rank_of([](const ReportRow& r) { return r.metrics.ppl; });
  auto r_rep = rank_of(get_rep);
  auto r_div = rank_of(get_div);

  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "method el ma ematch_mean ppl rep div erase_rank gen_rank avg_rank flags\n";
  for (size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    os << r.method << " " << get_el(r) << " " << r.metrics.ma << " " << r.metrics.ematch_mean
       << " " << r.metrics.ppl << " " << get_rep(r) << " " << -get_div(r) << " ";
    if (r.collapsed) {
      os << "n/a n/a n/a COLLAPSED\n";
      continue;
    }
    double erank = (r_el[i] + r_ma[i] + r_em[i]) / 3.0;
    double grank = (r_ppl[i] + r_rep[i] + r_div[i]) / 3.0;
    os << erank << " " << grank << " " << (erank + grank) / 2.0 << " -\n";
  }
  return os.str();
}

inline std::string report_csv(const std::vector<ReportRow>& rows) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(6);
  os << "method,el,ma,ematch_mean,ppl,rep,div,collapsed\n";
  for (const auto& r : rows) {
    double el = r.metrics.el.empty() ? 0.0 : r.metrics.el.begin()->second;
    double rep = r.metrics.rep.empty() ? 0.0 : r.metrics.rep.begin()->second;
    double div = r.metrics.div.empty() ? 1.0 : r.metrics.div.begin()->second;
    os << r.method << "," << el << "," << r.metrics.ma << "," << r.metrics.ematch_mean << ","
       << r.metrics.ppl << "," << rep << "," << div << "," << (r.collapsed ? 1 : 0) << "\n";
  }
  return os.str();
}

}  // namespace umlb
