#pragma once

// Pipeline stages behind the command-line tool. Each stage reads only
// on-disk artifacts from earlier stages and writes into its own directory
// `<out>/<stage>-<hash>`, where the hash covers every setting the stage's
// output depends on (including the hashes of the stages it reads).

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "histoprog/data_model.hpp"

namespace histoprog {

struct MilSection {
  std::string variant = "abmil-ib";
  double lr = 5e-5;
  double weight_decay = 1e-2;
  std::size_t epochs = 16;
  std::size_t grad_accum = 32;
  std::size_t k_folds = 5;
  std::optional<std::uint64_t> seed;
};

struct SaeSection {
  std::size_t n_latents = 7680;
  std::size_t k = 8;
  double lr = 5e-5;
  std::size_t epochs = 8;
  std::size_t batch_size = 16384;
  double tail_fraction = 0.2;
  double norm_target = 0;  // 0 means sqrt(dim)
  std::optional<std::uint64_t> seed;
};

struct SelectionSection {
  std::size_t n_per_sign = 100000;
  std::size_t top_m = 24;
  std::size_t examples_per_pattern = 35;
  std::optional<std::uint64_t> seed;
};

struct IoSection {
  std::string manifest;  // empty: <output_dir>/cohort/manifest.tsv
  std::string output_dir = "out";
};

struct PipelineConfig {
  std::uint64_t seed = 2026;
  std::size_t threads = 1;
  MilSection mil;
  SaeSection sae;
  SelectionSection selection;
  SurvivalCutoffs survival;
  IoSection io;
  SynthSpec synth;
  std::optional<std::uint64_t> synth_seed;
  std::string synth_dir;  // empty: <output_dir>/cohort

  std::uint64_t mil_seed() const { return mil.seed.value_or(seed); }
  std::uint64_t sae_seed() const { return sae.seed.value_or(seed); }
  std::uint64_t selection_seed() const { return selection.seed.value_or(seed); }
  std::filesystem::path output_dir() const { return io.output_dir; }
  std::filesystem::path manifest_path() const;
  std::filesystem::path cohort_dir() const;
};

enum class Stage { Cv, Score, Sample, TrainSae, Encode, Select, Survival, Report };

std::string stage_name(Stage stage);

/// 16 hex digits; changes whenever an input of the stage changes.
std::string stage_hash(const PipelineConfig& config, Stage stage);
std::filesystem::path stage_dir(const PipelineConfig& config, Stage stage);

// File names inside the stage directories.
namespace artifacts {
inline constexpr const char* kCvReport = "cv_report.json";
inline constexpr const char* kCvPredictions = "predictions.tsv";
inline constexpr const char* kTileScores = "tile_scores.tsv";
inline constexpr const char* kScoreReport = "score_report.json";
inline constexpr const char* kSampledTiles = "sampled_tiles.tsv";
inline constexpr const char* kSampleReport = "sample_report.json";
inline constexpr const char* kSaeCheckpoint = "sae.sae1";
inline constexpr const char* kSaeReport = "sae_report.json";
inline constexpr const char* kActivations = "activations.act1";
inline constexpr const char* kEncodedTiles = "encoded_tiles.tsv";
inline constexpr const char* kPatternReport = "pattern_report.json";
inline constexpr const char* kExampleTiles = "example_tiles.tsv";
inline constexpr const char* kPatternBars = "pattern_bars.svg";
inline constexpr const char* kSurvivalReport = "survival_report.json";
inline constexpr const char* kRiskGroups = "risk_groups.tsv";
inline constexpr const char* kKmSvg = "km.svg";
inline constexpr const char* kSummary = "summary.json";
}  // namespace artifacts

void cmd_synth(const PipelineConfig& config);
void cmd_cv(const PipelineConfig& config);
void cmd_score(const PipelineConfig& config);
void cmd_sample(const PipelineConfig& config);
void cmd_train_sae(const PipelineConfig& config);
void cmd_encode(const PipelineConfig& config);
void cmd_select(const PipelineConfig& config);
void cmd_survival(const PipelineConfig& config);
void cmd_report(const PipelineConfig& config);

}  // namespace histoprog
