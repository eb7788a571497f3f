#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "histoprog/errors.hpp"
#include "histoprog/numerics.hpp"

namespace histoprog {

enum class Sex { F, M };
enum class Mgmt { Unmethylated, Methylated, Unknown };
enum class SurvivalGroup { Shorter, Longer, Intermediate, Excluded };

std::string to_string(Sex sex);
std::string to_string(Mgmt mgmt);
std::string to_string(SurvivalGroup group);

struct SurvivalCutoffs {
  int shorter_days = 180;
  int longer_days = 360;
};

/// Death within the shorter cutoff is Shorter; surviving (or being followed
/// up) at least the longer cutoff is Longer; deaths in between are
/// Intermediate; censoring before the longer cutoff is Excluded.
SurvivalGroup assign_survival_group(int survival_days, int event,
                                    const SurvivalCutoffs& cutoffs = {});

struct PatientRecord {
  std::string patient_id;
  std::string hospital;
  std::string embedding_path;  // relative to the manifest directory
  int survival_days = 0;
  int event = 0;  // 1 = death observed, 0 = censored
  double age_midpoint = 62.5;
  Sex sex = Sex::F;
  Mgmt mgmt = Mgmt::Unknown;

  SurvivalGroup group(const SurvivalCutoffs& cutoffs = {}) const {
    return assign_survival_group(survival_days, event, cutoffs);
  }
  /// Unknown MGMT status removes a patient from the adjusted Cox analysis.
  bool excluded_from_cox() const { return mgmt == Mgmt::Unknown; }
};

struct Cohort {
  std::vector<PatientRecord> patients;
  std::vector<std::string> hospitals;  // sorted, unique
  std::size_t dim = 0;                 // 0 until resolved from the bags
  std::filesystem::path base_dir;      // directory embedding paths are relative to

  std::filesystem::path bag_path(const PatientRecord& p) const { return base_dir / p.embedding_path; }
  const PatientRecord* find(const std::string& patient_id) const;
};

/// Reads the manifest TSV. Columns, in order: patient_id, hospital,
/// embedding_path, survival_days, event, age_midpoint, sex, mgmt.
Cohort parse_manifest(const std::filesystem::path& tsv_path);
void write_manifest(const Cohort& cohort, const std::filesystem::path& tsv_path);

/// Reads every bag header, checks that all bags share one dimension and sets cohort.dim.
void resolve_cohort_dim(Cohort& cohort);

// ---------------------------------------------------------------------------
// Embedding bags (EMB1)

struct GridCoord {
  std::int32_t x = 0;
  std::int32_t y = 0;
  friend bool operator==(const GridCoord&, const GridCoord&) = default;
};

struct EmbeddingBag {
  Matrix<float> embeddings;  // n_tiles x dim
  std::vector<GridCoord> coords;

  std::size_t n_tiles() const { return embeddings.rows(); }
  std::size_t dim() const { return embeddings.cols(); }
  friend bool operator==(const EmbeddingBag&, const EmbeddingBag&) = default;
};

/// Throws ValidationError when the bag is empty, coords are misaligned or duplicated.
void validate_bag(const EmbeddingBag& bag);

enum class BagErrorKind { Io, BadMagic, BadVersion, BadDtype, Truncated, ZeroDim, ZeroTiles };

class BagFormatError : public ValidationError {
 public:
  BagFormatError(BagErrorKind kind, const std::string& message)
      : ValidationError(message), kind_(kind) {}
  BagErrorKind kind() const { return kind_; }

 private:
  BagErrorKind kind_;
};

struct BagHeader {
  std::uint32_t dim = 0;
  std::uint64_t n_tiles = 0;
};

void write_embedding_bag(const EmbeddingBag& bag, const std::filesystem::path& path);
EmbeddingBag read_embedding_bag(const std::filesystem::path& path);
BagHeader read_bag_header(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Synthetic cohorts with a planted dictionary

enum class Direction { Shorter, Longer };
std::string to_string(Direction d);

struct PrognosticAtom {
  std::size_t atom = 0;
  Direction direction = Direction::Shorter;
  double prevalence = 0.3;  // fraction of that class's tiles containing the atom
};

struct SynthSpec {
  std::uint64_t seed = 2026;
  std::size_t n_patients_per_hospital = 60;
  std::size_t n_hospitals = 3;
  std::size_t tiles_min = 200;
  std::size_t tiles_max = 400;
  std::size_t dim = 64;
  std::size_t n_true_atoms = 64;
  std::size_t k_true = 4;
  std::vector<PrognosticAtom> prognostic_atoms = default_prognostic_atoms();
  double noise_sigma = 0.05;

  double coef_min = 0.5;
  double coef_max = 1.5;
  double median_shorter_days = 90.0;
  double median_longer_days = 600.0;
  double intermediate_fraction = 0.06;  // deaths drawn between the cutoffs
  double censor_fraction = 0.10;        // patients exposed to uniform censoring
  double max_follow_up_days = 1800.0;
  SurvivalCutoffs cutoffs;

  static std::vector<PrognosticAtom> default_prognostic_atoms(double prevalence = 0.3);
};

/// Throws ValidationError when the spec cannot be realised.
void validate_synth_spec(const SynthSpec& spec);

struct GroundTruth {
  Matrix<double> atoms;  // n_true_atoms x dim, unit-norm rows
  std::vector<PrognosticAtom> prognostic_atoms;
  std::vector<Direction> latent_class;                              // per patient
  std::vector<std::vector<std::vector<std::uint32_t>>> memberships;  // patient -> tile -> atoms
};

struct SyntheticCohort {
  Cohort cohort;
  std::vector<EmbeddingBag> bags;  // aligned with cohort.patients
  GroundTruth truth;
};

/// Planted-dictionary tiles: each row is a positive combination of k_true
/// atoms plus isotropic Gaussian noise. Used by the cohort generator and the
/// SAE recovery benchmark.
struct PlantedTiles {
  Matrix<float> tiles;
  std::vector<std::vector<std::uint32_t>> memberships;
};
PlantedTiles generate_planted_tiles(const Matrix<double>& atoms, std::size_t n_tiles,
                                    std::size_t k_true, double noise_sigma, Rng& rng,
                                    double coef_min = 0.5, double coef_max = 1.5);

/// n unit-norm Gaussian directions in `dim` dimensions (one per row).
Matrix<double> random_unit_atoms(std::size_t n, std::size_t dim, Rng& rng);

SyntheticCohort generate_synthetic_cohort(const SynthSpec& spec);

/// Writes manifest.tsv, bags/<patient_id>.emb and ground_truth.json under `dir`.
void write_synthetic_cohort(const SyntheticCohort& synth, const SynthSpec& spec,
                            const std::filesystem::path& dir);

/// Reads ground_truth.json written by write_synthetic_cohort (atoms and prognostic list only).
GroundTruth read_ground_truth(const std::filesystem::path& json_path);

}  // namespace histoprog
