#include "histoprog/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <exception>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "histoprog/mil.hpp"
#include "histoprog/relevance.hpp"
#include "histoprog/sae.hpp"
#include "histoprog/stats.hpp"
#include "histoprog/svg.hpp"

namespace histoprog {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

// ---------------------------------------------------------------------------
// Formatting and files

template <typename T>
std::string fmt(T v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string slurp_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << text;
  if (!out) throw ValidationError("failed writing " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  try {
    return json::parse(slurp_text(path));
  } catch (const json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find('\t', start);
    out.push_back(line.substr(start, pos == std::string::npos ? std::string::npos : pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

// Rows of a TSV whose header must equal `header`.
std::vector<std::vector<std::string>> read_tsv(const fs::path& path, const std::vector<std::string>& header) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || split_tabs(line) != header) {
    throw ValidationError(path.string() + ": unexpected header");
  }
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cols = split_tabs(line);
    if (cols.size() != header.size()) {
      throw ValidationError(path.string() + ": row " + std::to_string(rows.size() + 1) + " has " +
                            std::to_string(cols.size()) + " columns");
    }
    rows.push_back(std::move(cols));
  }
  return rows;
}

template <typename T>
T parse_num(const std::string& s, const std::string& what) {
  T v{};
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw ValidationError("bad " + what + " '" + s + "'");
  return v;
}

std::string join_tabs(std::initializer_list<std::string> cols) {
  std::string out;
  bool first = true;
  for (const auto& c : cols) {
    if (!first) out += '\t';
    out += c;
    first = false;
  }
  out += '\n';
  return out;
}

// Runs fn(i) for i in [0, n) on up to `threads` threads; rethrows the
// exception of the lowest failing index.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn fn) {
  std::vector<std::exception_ptr> errors(n);
  auto body = [&](std::size_t i) {
    try {
      fn(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        for (std::size_t i = t; i < n; i += threads) body(i);
      });
    }
    for (auto& th : pool) th.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

fs::path require_stage(const PipelineConfig& cfg, Stage stage, const char* file) {
  const fs::path p = stage_dir(cfg, stage) / file;
  if (!fs::exists(p)) {
    throw ValidationError("missing " + p.string() + ": run " + stage_name(stage) + " first");
  }
  return p;
}

fs::path make_stage_dir(const PipelineConfig& cfg, Stage stage) {
  const fs::path dir = stage_dir(cfg, stage);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ValidationError("cannot create " + dir.string() + ": " + ec.message());
  return dir;
}

Cohort load_cohort(const PipelineConfig& cfg) {
  const fs::path manifest = cfg.manifest_path();
  if (!fs::exists(manifest)) {
    throw ValidationError("manifest " + manifest.string() + " not found (run synth first or pass --manifest)");
  }
  Cohort cohort = parse_manifest(manifest);
  resolve_cohort_dim(cohort);
  return cohort;
}

bool cv_eligible(SurvivalGroup g) { return g == SurvivalGroup::Shorter || g == SurvivalGroup::Longer; }

json metrics_json(const std::vector<double>& scores, const std::vector<int>& labels,
                  const std::vector<SurvivalGroup>& predicted, const std::vector<SurvivalGroup>& truth) {
  json j;
  const auto n_pos = std::size_t(std::count(labels.begin(), labels.end(), 1));
  const auto n_neg = labels.size() - n_pos;
  j["n"] = labels.size();
  j["n_longer"] = n_pos;
  j["n_shorter"] = n_neg;
  if (n_pos > 0 && n_neg > 0) {
    const double a = auroc(scores, labels);
    const auto ci = hanley_mcneil_ci(a, n_pos, n_neg);
    j["auroc"] = a;
    j["auroc_se"] = ci.se;
    j["auroc_ci95"] = {ci.lo, ci.hi};
  } else {
    j["auroc"] = nullptr;
    j["auroc_se"] = nullptr;
    j["auroc_ci95"] = nullptr;
  }
  j["f1_longer"] = predicted.empty() ? 0.0 : f1_score(predicted, truth);
  return j;
}

FoldAssignment folds_from_report(const json& report) {
  FoldAssignment f;
  f.k = report.at("k").get<std::size_t>();
  for (const auto& row : report.at("folds")) {
    f.fold_of[row.at("patient_id").get<std::string>()] = row.at("fold").get<std::size_t>();
  }
  return f;
}

std::vector<MilParams<float>> load_fold_models(const PipelineConfig& cfg, const json& report) {
  const fs::path dir = stage_dir(cfg, Stage::Cv);
  std::vector<MilParams<float>> models;
  for (const auto& name : report.at("checkpoints")) {
    const fs::path p = dir / name.get<std::string>();
    if (!fs::exists(p)) throw ValidationError("missing " + p.string() + ": run cv first");
    models.push_back(read_mil_checkpoint(p));
  }
  return models;
}

const std::vector<std::string> kTileScoreHeader = {"patient_id",      "grid_x",          "grid_y",
                                                   "attention_logit", "tile_prediction", "decision_score"};
const std::vector<std::string> kSampledHeader = {"hospital", "group",  "patient_id",     "tile_index",
                                                 "grid_x",   "grid_y", "decision_score", "count"};
const std::vector<std::string> kEncodedHeader = {"row", "hospital", "patient_id", "tile_index", "grid_x", "grid_y"};

struct ScoredTile {
  std::string patient_id;
  std::uint32_t tile_index;
  std::int32_t x, y;
  float a, p, s;
};

std::vector<ScoredTile> read_tile_scores(const fs::path& path) {
  std::vector<ScoredTile> out;
  std::string prev;
  std::uint32_t idx = 0;
  for (const auto& r : read_tsv(path, kTileScoreHeader)) {
    if (r[0] != prev) {
      prev = r[0];
      idx = 0;
    }
    out.push_back({r[0], idx++, parse_num<std::int32_t>(r[1], "grid_x"), parse_num<std::int32_t>(r[2], "grid_y"),
                   parse_num<float>(r[3], "attention_logit"), parse_num<float>(r[4], "tile_prediction"),
                   parse_num<float>(r[5], "decision_score")});
  }
  return out;
}

struct SampledRow {
  std::string hospital;
  bool longer;
  std::string patient_id;
  std::uint32_t tile_index;
  std::int32_t x, y;
  double score;
  std::size_t count;
};

std::vector<SampledRow> read_sampled(const fs::path& path) {
  std::vector<SampledRow> out;
  for (const auto& r : read_tsv(path, kSampledHeader)) {
    if (r[1] != "longer" && r[1] != "shorter") throw ValidationError(path.string() + ": bad group " + r[1]);
    out.push_back({r[0], r[1] == "longer", r[2], parse_num<std::uint32_t>(r[3], "tile_index"),
                   parse_num<std::int32_t>(r[4], "grid_x"), parse_num<std::int32_t>(r[5], "grid_y"),
                   parse_num<double>(r[6], "decision_score"), parse_num<std::size_t>(r[7], "count")});
  }
  return out;
}

json curve_json(const SurvivalCurve& c) {
  json j;
  j["n_subjects"] = c.n_subjects;
  j["times"] = c.times;
  j["survival"] = c.survival_prob;
  j["at_risk"] = c.at_risk;
  j["n_events"] = c.n_events;
  j["censor_times"] = c.censor_times;
  const auto m = c.median();
  j["median"] = m ? json(*m) : json(nullptr);
  return j;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config and stage addressing

fs::path PipelineConfig::cohort_dir() const {
  return synth_dir.empty() ? output_dir() / "cohort" : fs::path(synth_dir);
}

fs::path PipelineConfig::manifest_path() const {
  return io.manifest.empty() ? cohort_dir() / "manifest.tsv" : fs::path(io.manifest);
}

std::string stage_name(Stage stage) {
  switch (stage) {
    case Stage::Cv: return "cv";
    case Stage::Score: return "score";
    case Stage::Sample: return "sample";
    case Stage::TrainSae: return "train-sae";
    case Stage::Encode: return "encode";
    case Stage::Select: return "select";
    case Stage::Survival: return "survival";
    case Stage::Report: return "report";
  }
  return "?";
}

std::string stage_hash(const PipelineConfig& c, Stage stage) {
  auto h = [](const std::string& s) { return hex64(fnv1a64(s)); };
  const auto manifest = [&] {
    const fs::path p = c.manifest_path();
    if (!fs::exists(p)) throw ValidationError("manifest " + p.string() + " not found (run synth first)");
    return h(slurp_text(p));
  };
  const auto cutoffs = "cutoffs=" + fmt(c.survival.shorter_days) + "," + fmt(c.survival.longer_days);
  switch (stage) {
    case Stage::Cv:
      return h("cv;manifest=" + manifest() + ";" + cutoffs + ";variant=" + c.mil.variant + ";lr=" + fmt(c.mil.lr) +
               ";wd=" + fmt(c.mil.weight_decay) + ";epochs=" + fmt(c.mil.epochs) +
               ";accum=" + fmt(c.mil.grad_accum) + ";k=" + fmt(c.mil.k_folds) + ";seed=" + fmt(c.mil_seed()));
    case Stage::Score: return h("score;" + stage_hash(c, Stage::Cv));
    case Stage::Sample:
      return h("sample;" + stage_hash(c, Stage::Score) + ";n=" + fmt(c.selection.n_per_sign) +
               ";seed=" + fmt(c.selection_seed()));
    case Stage::TrainSae:
      return h("train-sae;manifest=" + manifest() + ";n=" + fmt(c.sae.n_latents) + ";k=" + fmt(c.sae.k) +
               ";lr=" + fmt(c.sae.lr) + ";epochs=" + fmt(c.sae.epochs) + ";batch=" + fmt(c.sae.batch_size) +
               ";tail=" + fmt(c.sae.tail_fraction) + ";norm=" + fmt(c.sae.norm_target) + ";seed=" + fmt(c.sae_seed()));
    case Stage::Encode:
      return h("encode;" + stage_hash(c, Stage::Sample) + ";" + stage_hash(c, Stage::TrainSae));
    case Stage::Select:
      return h("select;" + stage_hash(c, Stage::Encode) + ";m=" + fmt(c.selection.top_m) +
               ";examples=" + fmt(c.selection.examples_per_pattern) + ";seed=" + fmt(c.selection_seed()));
    case Stage::Survival: return h("survival;" + stage_hash(c, Stage::Cv));
    case Stage::Report:
      return h("report;" + stage_hash(c, Stage::Select) + ";" + stage_hash(c, Stage::Survival));
  }
  return "";
}

fs::path stage_dir(const PipelineConfig& config, Stage stage) {
  return config.output_dir() / (stage_name(stage) + "-" + stage_hash(config, stage));
}

// ---------------------------------------------------------------------------
// Commands

void cmd_synth(const PipelineConfig& cfg) {
  SynthSpec spec = cfg.synth;
  spec.seed = cfg.synth_seed.value_or(cfg.seed);
  spec.cutoffs = cfg.survival;
  const auto synth = generate_synthetic_cohort(spec);
  const fs::path dir = cfg.cohort_dir();
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ValidationError("cannot create " + dir.string() + ": " + ec.message());
  write_synthetic_cohort(synth, spec, dir);
}

void cmd_cv(const PipelineConfig& cfg) {
  const Cohort cohort = load_cohort(cfg);
  const MilVariant variant = parse_mil_variant(cfg.mil.variant);
  if (cfg.mil.k_folds < 2) throw ValidationError("mil.k_folds must be >= 2");
  const FoldAssignment folds = stratified_kfold(cohort, cfg.mil.k_folds, cfg.mil_seed(), cfg.survival);
  const std::size_t k = folds.k;

  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < cohort.patients.size(); ++i) {
    if (cv_eligible(cohort.patients[i].group(cfg.survival))) eligible.push_back(i);
  }
  std::vector<Matrix<float>> bags(eligible.size());
  std::vector<int> labels(eligible.size());
  std::vector<std::size_t> fold_of(eligible.size());
  for (std::size_t e = 0; e < eligible.size(); ++e) {
    const auto& p = cohort.patients[eligible[e]];
    bags[e] = read_embedding_bag(cohort.bag_path(p)).embeddings;
    labels[e] = p.group(cfg.survival) == SurvivalGroup::Longer ? 1 : 0;
    fold_of[e] = folds.fold_of.at(p.patient_id);
  }

  const fs::path dir = make_stage_dir(cfg, Stage::Cv);
  std::vector<MilTrainLog> logs(k);
  std::vector<float> logits(eligible.size());
  const Rng base(cfg.mil_seed());
  parallel_for(k, cfg.threads, [&](std::size_t f) {
    std::vector<MilExample<float>> train, val;
    std::vector<std::size_t> val_idx;
    for (std::size_t e = 0; e < eligible.size(); ++e) {
      if (fold_of[e] == f) {
        val.push_back({&bags[e], labels[e]});
        val_idx.push_back(e);
      } else {
        train.push_back({&bags[e], labels[e]});
      }
    }
    MilTrainConfig tc;
    tc.lr = cfg.mil.lr;
    tc.weight_decay = cfg.mil.weight_decay;
    tc.epochs = cfg.mil.epochs;
    tc.grad_accum_steps = cfg.mil.grad_accum;
    tc.seed = base.fork(f).next_u64();
    auto result = train_mil<float>(train, val, tc, cohort.dim, variant);
    write_mil_checkpoint(result.params, dir / ("fold-" + std::to_string(f) + ".milp"));
    for (const auto e : val_idx) logits[e] = forward(result.params, bags[e]).logit;
    logs[f] = std::move(result.log);
  });

  // Combined test-fold predictions, overall and per hospital.
  std::string tsv = join_tabs({"patient_id", "hospital", "group", "fold", "logit", "p_longer", "predicted"});
  std::map<std::string, std::vector<std::size_t>> by_hospital;
  std::vector<double> scores(eligible.size());
  std::vector<SurvivalGroup> predicted(eligible.size()), truth(eligible.size());
  for (std::size_t e = 0; e < eligible.size(); ++e) {
    const auto& p = cohort.patients[eligible[e]];
    const double prob = double(sigmoid(logits[e]));
    scores[e] = double(logits[e]);
    predicted[e] = group_from_probability(prob);
    truth[e] = p.group(cfg.survival);
    by_hospital[p.hospital].push_back(e);
    tsv += join_tabs({p.patient_id, p.hospital, to_string(truth[e]), fmt(fold_of[e]), fmt(logits[e]), fmt(prob),
                      to_string(predicted[e])});
  }
  write_text(dir / artifacts::kCvPredictions, tsv);

  json report;
  report["variant"] = to_string(variant);
  report["k"] = k;
  report["n_patients"] = cohort.patients.size();
  report["n_eligible"] = eligible.size();
  report["dim"] = cohort.dim;
  report["config"] = {{"lr", cfg.mil.lr},
                      {"weight_decay", cfg.mil.weight_decay},
                      {"epochs", cfg.mil.epochs},
                      {"grad_accum", cfg.mil.grad_accum},
                      {"seed", cfg.mil_seed()}};
  report["checkpoints"] = json::array();
  for (std::size_t f = 0; f < k; ++f) report["checkpoints"].push_back("fold-" + std::to_string(f) + ".milp");
  report["overall"] = metrics_json(scores, labels, predicted, truth);
  json per_h = json::object();
  for (const auto& h : cohort.hospitals) {
    std::vector<double> s;
    std::vector<int> l;
    std::vector<SurvivalGroup> pr, tr;
    for (const auto e : by_hospital[h]) {
      s.push_back(scores[e]);
      l.push_back(labels[e]);
      pr.push_back(predicted[e]);
      tr.push_back(truth[e]);
    }
    per_h[h] = metrics_json(s, l, pr, tr);
  }
  report["per_hospital"] = per_h;
  report["folds"] = json::array();
  for (std::size_t e = 0; e < eligible.size(); ++e) {
    const auto& p = cohort.patients[eligible[e]];
    report["folds"].push_back({{"patient_id", p.patient_id},
                               {"hospital", p.hospital},
                               {"group", to_string(truth[e])},
                               {"fold", fold_of[e]}});
  }
  report["training"] = json::array();
  for (std::size_t f = 0; f < k; ++f) {
    json epochs = json::array();
    for (const auto& ep : logs[f].epochs) {
      epochs.push_back({{"epoch", ep.epoch},
                        {"train_loss", ep.train_loss},
                        {"train_auroc", ep.train_auroc},
                        {"val_loss", ep.val_loss},
                        {"val_auroc", ep.val_auroc},
                        {"lr", ep.last_lr}});
    }
    report["training"].push_back({{"fold", f}, {"optimizer_steps", logs[f].optimizer_steps}, {"epochs", epochs}});
  }
  report["warnings"] = folds.warnings;
  write_json(dir / artifacts::kCvReport, report);
}

void cmd_score(const PipelineConfig& cfg) {
  const json cv = read_json(require_stage(cfg, Stage::Cv, artifacts::kCvReport));
  const Cohort cohort = load_cohort(cfg);
  const FoldAssignment folds = folds_from_report(cv);
  const auto models = load_fold_models(cfg, cv);

  std::vector<const PatientRecord*> scored;
  for (const auto& p : cohort.patients) {
    if (folds.fold_of.count(p.patient_id)) scored.push_back(&p);
  }
  std::vector<std::string> chunks(scored.size());
  std::vector<std::size_t> n_tiles(scored.size());
  parallel_for(scored.size(), cfg.threads, [&](std::size_t i) {
    const auto& p = *scored[i];
    const auto bag = read_embedding_bag(cohort.bag_path(p));
    const auto set = score_tiles(models.at(folds.fold_of.at(p.patient_id)), bag);
    std::string text;
    for (const auto& t : set.tiles) {
      text += join_tabs({p.patient_id, fmt(t.grid_x), fmt(t.grid_y), fmt(t.attention_logit), fmt(t.tile_prediction),
                         fmt(t.decision_score)});
    }
    chunks[i] = std::move(text);
    n_tiles[i] = set.tiles.size();
  });

  const fs::path dir = make_stage_dir(cfg, Stage::Score);
  std::string tsv = join_tabs({"patient_id", "grid_x", "grid_y", "attention_logit", "tile_prediction",
                               "decision_score"});
  std::size_t total = 0;
  for (std::size_t i = 0; i < chunks.size(); ++i) {
    tsv += chunks[i];
    total += n_tiles[i];
  }
  write_text(dir / artifacts::kTileScores, tsv);
  const bool decomposes = parse_mil_variant(cv.at("variant").get<std::string>()) == MilVariant::AbmilIb;
  json report;
  report["variant"] = cv.at("variant");
  report["scores_decompose_prediction"] = decomposes;
  if (!decomposes) report["warning"] = "decision scores are not the prediction decomposition for this variant";
  report["n_patients"] = scored.size();
  report["n_tiles"] = total;
  write_json(dir / artifacts::kScoreReport, report);
}

void cmd_sample(const PipelineConfig& cfg) {
  const auto tiles = read_tile_scores(require_stage(cfg, Stage::Score, artifacts::kTileScores));
  const Cohort cohort = load_cohort(cfg);
  std::map<std::string, std::vector<TileRef>> by_hospital;
  for (const auto& t : tiles) {
    const auto* p = cohort.find(t.patient_id);
    if (!p) throw ValidationError("tile scores mention unknown patient " + t.patient_id);
    by_hospital[p->hospital].push_back({t.patient_id, p->hospital, t.tile_index, t.x, t.y, double(t.s)});
  }

  std::string tsv = join_tabs({"hospital", "group", "patient_id", "tile_index", "grid_x", "grid_y",
                               "decision_score", "count"});
  json report;
  report["n_per_sign"] = cfg.selection.n_per_sign;
  report["seed"] = cfg.selection_seed();
  report["hospitals"] = json::array();
  std::size_t total = 0;
  for (const auto& [hospital, refs] : by_hospital) {
    const auto s = sample_prognosis_tiles(hospital, refs, cfg.selection.n_per_sign, cfg.selection_seed());
    for (const bool longer : {true, false}) {
      std::map<std::size_t, std::size_t> counts;
      for (const auto i : longer ? s.longer : s.shorter) ++counts[i];
      for (const auto& [i, n] : counts) {
        const auto& r = refs[i];
        tsv += join_tabs({hospital, longer ? "longer" : "shorter", r.patient_id, fmt(r.tile_index), fmt(r.grid_x),
                          fmt(r.grid_y), fmt(r.decision_score), fmt(n)});
      }
      total += longer ? s.longer.size() : s.shorter.size();
    }
    report["hospitals"].push_back({{"hospital", hospital},
                                   {"n_positive_tiles", s.n_positive_tiles},
                                   {"n_negative_tiles", s.n_negative_tiles},
                                   {"n_zero_excluded", s.n_zero_excluded},
                                   {"draws_longer", s.longer.size()},
                                   {"draws_shorter", s.shorter.size()}});
  }
  report["total_draws"] = total;
  const fs::path dir = make_stage_dir(cfg, Stage::Sample);
  write_text(dir / artifacts::kSampledTiles, tsv);
  write_json(dir / artifacts::kSampleReport, report);
}

void cmd_train_sae(const PipelineConfig& cfg) {
  const Cohort cohort = load_cohort(cfg);
  std::vector<EmbeddingBag> bags;
  std::size_t n = 0;
  for (const auto& p : cohort.patients) {
    bags.push_back(read_embedding_bag(cohort.bag_path(p)));
    n += bags.back().n_tiles();
  }
  Matrix<float> tiles(n, cohort.dim);
  std::size_t row = 0;
  for (const auto& b : bags) {
    std::copy(b.embeddings.values().begin(), b.embeddings.values().end(), tiles.row(row).begin());
    row += b.n_tiles();
  }
  bags.clear();

  auto params = init_sae<float>(cohort.dim, cfg.sae.n_latents, cfg.sae.k, tiles, cfg.sae_seed());
  SaeTrainConfig tc;
  tc.lr = cfg.sae.lr;
  tc.epochs = cfg.sae.epochs;
  tc.batch_size = cfg.sae.batch_size;
  tc.tail_fraction = cfg.sae.tail_fraction;
  tc.norm_target = cfg.sae.norm_target;
  tc.seed = cfg.sae_seed();
  const auto result = train_sae(tiles, tc, std::move(params));
  const auto dead = dead_latent_report(result.params, tiles);

  const fs::path dir = make_stage_dir(cfg, Stage::TrainSae);
  write_sae_checkpoint(result.params, dir / artifacts::kSaeCheckpoint);
  json report;
  report["n_tiles"] = n;
  report["dim"] = cohort.dim;
  report["n_latents"] = cfg.sae.n_latents;
  report["k"] = cfg.sae.k;
  report["input_scale"] = result.params.input_scale;
  report["optimizer_steps"] = result.log.optimizer_steps;
  report["epoch_loss"] = result.log.epoch_loss;
  report["n_dead_latents"] = dead.n_dead;
  json freq = json::array();
  for (const auto& l : dead.latents) freq.push_back({l.latent, l.frequency});
  report["latent_frequency"] = freq;
  write_json(dir / artifacts::kSaeReport, report);
}

void cmd_encode(const PipelineConfig& cfg) {
  const auto sampled = read_sampled(require_stage(cfg, Stage::Sample, artifacts::kSampledTiles));
  const auto sae = read_sae_checkpoint(require_stage(cfg, Stage::TrainSae, artifacts::kSaeCheckpoint));
  const Cohort cohort = load_cohort(cfg);

  std::set<std::pair<std::string, std::uint32_t>> seen;
  std::vector<const SampledRow*> unique;
  for (const auto& r : sampled) {
    if (seen.insert({r.patient_id, r.tile_index}).second) unique.push_back(&r);
  }
  Matrix<float> rows(unique.size(), sae.dim);
  std::map<std::string, EmbeddingBag> cache;
  for (std::size_t i = 0; i < unique.size(); ++i) {
    const auto& r = *unique[i];
    auto it = cache.find(r.patient_id);
    if (it == cache.end()) {
      const auto* p = cohort.find(r.patient_id);
      if (!p) throw ValidationError("sampled tiles mention unknown patient " + r.patient_id);
      it = cache.emplace(r.patient_id, read_embedding_bag(cohort.bag_path(*p))).first;
    }
    if (it->second.dim() != sae.dim) throw ValidationError("SAE dim does not match the embedding bags");
    if (r.tile_index >= it->second.n_tiles()) throw ValidationError("sampled tile index out of range");
    const auto src = it->second.embeddings.row(r.tile_index);
    std::copy(src.begin(), src.end(), rows.row(i).begin());
  }
  cache.clear();
  const auto codes = encode_batch(sae, rows);

  const fs::path dir = make_stage_dir(cfg, Stage::Encode);
  write_activation_dump(codes, sae.n_latents, dir / artifacts::kActivations);
  std::string tsv = join_tabs({"row", "hospital", "patient_id", "tile_index", "grid_x", "grid_y"});
  for (std::size_t i = 0; i < unique.size(); ++i) {
    const auto& r = *unique[i];
    tsv += join_tabs({fmt(i), r.hospital, r.patient_id, fmt(r.tile_index), fmt(r.x), fmt(r.y)});
  }
  write_text(dir / artifacts::kEncodedTiles, tsv);
}

void cmd_select(const PipelineConfig& cfg) {
  const auto sampled = read_sampled(require_stage(cfg, Stage::Sample, artifacts::kSampledTiles));
  const auto codes = read_activation_dump(require_stage(cfg, Stage::Encode, artifacts::kActivations));
  const auto encoded = read_tsv(require_stage(cfg, Stage::Encode, artifacts::kEncodedTiles), kEncodedHeader);
  const auto sae = read_sae_checkpoint(require_stage(cfg, Stage::TrainSae, artifacts::kSaeCheckpoint));
  if (encoded.size() != codes.size()) throw ValidationError("encoded tile table and activation dump disagree");

  std::map<std::pair<std::string, std::uint32_t>, std::size_t> row_of;
  for (const auto& r : encoded) {
    row_of[{r[2], parse_num<std::uint32_t>(r[3], "tile_index")}] = parse_num<std::size_t>(r[0], "row");
  }
  std::map<std::string, HospitalCodes> hmap;
  for (const auto& s : sampled) {
    const auto it = row_of.find({s.patient_id, s.tile_index});
    if (it == row_of.end()) throw ValidationError("sampled tile missing from the encoding; run encode first");
    auto& hc = hmap[s.hospital];
    hc.hospital = s.hospital;
    auto& dst = s.longer ? hc.longer : hc.shorter;
    dst.insert(dst.end(), s.count, it->second);
  }
  std::vector<HospitalCodes> hospitals;
  for (auto& [name, hc] : hmap) hospitals.push_back(std::move(hc));

  const std::size_t n_latents = sae.n_latents;
  const auto stats = pattern_stats(codes, hospitals, n_latents);
  const auto selected = select_top_patterns(stats, std::min(cfg.selection.top_m, n_latents));
  const auto curve = select_top_patterns(stats, n_latents);

  const Rng base(cfg.selection_seed());
  std::string tsv = join_tabs({"pattern_index", "hospital", "patient_id", "grid_x", "grid_y", "activation"});
  json report;
  report["n_latents"] = n_latents;
  report["top_m"] = selected.size();
  report["hospitals"] = stats.hospitals;
  report["selected"] = json::array();
  std::vector<std::uint32_t> latents;
  for (std::size_t rank = 0; rank < selected.size(); ++rank) {
    const auto& p = selected[rank];
    latents.push_back(p.latent);
    json diffs = json::object();
    json examples = json::object();
    for (std::size_t h = 0; h < hospitals.size(); ++h) {
      const auto& hc = hospitals[h];
      diffs[hc.hospital] = p.hospital_diffs[h];
      std::vector<std::size_t> pool(hc.longer);
      pool.insert(pool.end(), hc.shorter.begin(), hc.shorter.end());
      const auto pick = sample_example_tiles(p.latent, pool, codes, cfg.selection.examples_per_pattern,
                                             base.fork(p.latent).fork(fnv1a64(hc.hospital)).next_u64());
      examples[hc.hospital] = {{"n", pick.items.size()}, {"shortfall", pick.shortfall}};
      for (const auto item : pick.items) {
        const auto& e = encoded[item];
        tsv += join_tabs({fmt(p.latent), hc.hospital, e[2], e[4], e[5], fmt(codes[item].activation(p.latent))});
      }
    }
    report["selected"].push_back({{"rank", rank},
                                  {"latent", p.latent},
                                  {"direction", p.direction ? json(to_string(*p.direction)) : json(nullptr)},
                                  {"mean_abs_diff", p.mean_abs_diff},
                                  {"hospital_diffs", diffs},
                                  {"sign_consistent", p.sign_consistent},
                                  {"examples", examples}});
  }
  json curve_values = json::array();
  for (const auto& p : curve) curve_values.push_back(p.mean_abs_diff);
  report["mean_abs_diff_curve"] = curve_values;
  const auto sim = pattern_similarity_matrix(sae, latents);
  json sim_rows = json::array();
  for (std::size_t i = 0; i < sim.rows(); ++i) {
    sim_rows.push_back(std::vector<double>(sim.row(i).begin(), sim.row(i).end()));
  }
  report["similarity"] = {{"latents", latents}, {"matrix", sim_rows}};

  const fs::path dir = make_stage_dir(cfg, Stage::Select);
  write_json(dir / artifacts::kPatternReport, report);
  write_text(dir / artifacts::kExampleTiles, tsv);
  if (!selected.empty()) write_text(dir / artifacts::kPatternBars, svg::pattern_bars(selected, stats.hospitals));
}

void cmd_survival(const PipelineConfig& cfg) {
  const json cv = read_json(require_stage(cfg, Stage::Cv, artifacts::kCvReport));
  const Cohort cohort = load_cohort(cfg);
  const FoldAssignment folds = folds_from_report(cv);
  const auto models = load_fold_models(cfg, cv);
  if (models.size() != folds.k) throw ValidationError("cv report lists the wrong number of checkpoints");

  const FoldPredictor predict = [&](std::size_t fold, const PatientRecord& p) {
    return double(forward(models.at(fold), read_embedding_bag(cohort.bag_path(p))).p_longer);
  };
  const auto risk = assemble_risk_groups(cohort, folds, models.size(), predict,
                                         Rng(cfg.mil_seed()).fork(fnv1a64("risk")).next_u64(), cfg.survival);
  const auto adjusted = cox_adjusted_analysis(cohort, std::span<const RiskAssignment>(risk));
  const auto& fit = adjusted.fit;

  const fs::path dir = make_stage_dir(cfg, Stage::Survival);
  std::string tsv = join_tabs({"patient_id", "hospital", "group", "model_fold", "random_fold", "p_longer", "risk"});
  std::size_t n_random = 0, n_excluded = 0, n_higher = 0;
  for (std::size_t i = 0; i < risk.size(); ++i) {
    const auto& r = risk[i];
    n_random += r.random_fold;
    n_excluded += r.group == SurvivalGroup::Excluded;
    n_higher += r.risk == RiskGroup::Higher;
    tsv += join_tabs({r.patient_id, cohort.patients[i].hospital, to_string(r.group), fmt(r.model_fold),
                      r.random_fold ? "1" : "0", fmt(r.p_longer), to_string(r.risk)});
  }
  write_text(dir / artifacts::kRiskGroups, tsv);

  json report;
  report["n_patients"] = risk.size();
  report["n_higher_risk"] = n_higher;
  report["n_lower_risk"] = risk.size() - n_higher;
  report["n_random_fold"] = n_random;
  report["n_excluded_censored_before_longer_cutoff"] = n_excluded;
  report["n_dropped_unknown_mgmt"] = adjusted.n_dropped_unknown_mgmt;
  json cox;
  cox["n_used"] = fit.n_used;
  cox["n_events"] = fit.n_events;
  cox["converged"] = fit.converged;
  cox["iterations"] = fit.iterations;
  cox["log_likelihood"] = fit.log_likelihood;
  cox["diagnostics"] = fit.diagnostics;
  cox["covariates"] = json::array();
  for (std::size_t c = 0; c < fit.coefficients.size(); ++c) {
    cox["covariates"].push_back({{"name", fit.covariate_names[c]},
                                 {"coef", fit.coefficients[c]},
                                 {"hazard_ratio", fit.hazard_ratios[c]},
                                 {"se", fit.standard_errors[c]},
                                 {"ci95", {fit.ci_lo[c], fit.ci_hi[c]}}});
  }
  report["cox"] = cox;
  json curves = json::object();
  for (const auto& [g, c] : adjusted.curves) curves[g] = curve_json(c);
  report["kaplan_meier"] = curves;
  write_json(dir / artifacts::kSurvivalReport, report);
  write_text(dir / artifacts::kKmSvg, svg::kaplan_meier(adjusted.curves));
}

void cmd_report(const PipelineConfig& cfg) {
  const json cv = read_json(require_stage(cfg, Stage::Cv, artifacts::kCvReport));
  const auto tiles = read_tile_scores(require_stage(cfg, Stage::Score, artifacts::kTileScores));
  const json patterns = read_json(require_stage(cfg, Stage::Select, artifacts::kPatternReport));
  const json survival = read_json(require_stage(cfg, Stage::Survival, artifacts::kSurvivalReport));

  const fs::path dir = make_stage_dir(cfg, Stage::Report);
  fs::create_directories(dir / "heatmaps");
  std::map<std::string, std::vector<TileScore>> per_patient;
  for (const auto& t : tiles) per_patient[t.patient_id].push_back({t.x, t.y, t.a, t.p, t.s});
  for (const auto& [pid, ts] : per_patient) write_text(dir / "heatmaps" / (pid + ".svg"), svg::heatmap(ts));

  json summary;
  summary["overall"] = cv.at("overall");
  summary["per_hospital"] = cv.at("per_hospital");
  json risk = nullptr;
  for (const auto& c : survival.at("cox").at("covariates")) {
    if (c.at("name") == "risk") risk = c;
  }
  summary["cox_risk"] = risk;
  json top = json::array();
  for (const auto& p : patterns.at("selected")) {
    top.push_back({{"latent", p.at("latent")}, {"direction", p.at("direction")},
                   {"mean_abs_diff", p.at("mean_abs_diff")}});
  }
  summary["top_patterns"] = top;
  summary["artifacts"] = {
      {"cv", stage_dir(cfg, Stage::Cv).filename().string()},
      {"score", stage_dir(cfg, Stage::Score).filename().string()},
      {"sample", stage_dir(cfg, Stage::Sample).filename().string()},
      {"train_sae", stage_dir(cfg, Stage::TrainSae).filename().string()},
      {"encode", stage_dir(cfg, Stage::Encode).filename().string()},
      {"select", stage_dir(cfg, Stage::Select).filename().string()},
      {"survival", stage_dir(cfg, Stage::Survival).filename().string()},
      {"heatmaps", per_patient.size()}};
  write_json(dir / artifacts::kSummary, summary);
}

}  // namespace histoprog
