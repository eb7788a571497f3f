#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

#include "histoprog/data_model.hpp"
#include "json.hpp"

namespace histoprog {

std::vector<PrognosticAtom> SynthSpec::default_prognostic_atoms(double prevalence) {
  return {{0, Direction::Shorter, prevalence},
          {1, Direction::Shorter, prevalence},
          {2, Direction::Longer, prevalence},
          {3, Direction::Longer, prevalence}};
}

void validate_synth_spec(const SynthSpec& spec) {
  auto fail = [](const std::string& what) { throw ValidationError("infeasible synthetic spec: " + what); };
  if (spec.n_hospitals == 0) fail("n_hospitals must be >= 1");
  if (spec.n_patients_per_hospital == 0) fail("n_patients_per_hospital must be >= 1");
  if (spec.tiles_min == 0 || spec.tiles_min > spec.tiles_max) fail("tile range must satisfy 1 <= min <= max");
  if (spec.dim == 0) fail("dim must be >= 1");
  if (spec.n_true_atoms == 0) fail("n_true_atoms must be >= 1");
  if (spec.k_true == 0 || spec.k_true > spec.n_true_atoms) fail("k_true must be in [1, n_true_atoms]");
  if (!(spec.noise_sigma >= 0.0)) fail("noise_sigma must be >= 0");
  if (!(spec.coef_min > 0.0) || spec.coef_max < spec.coef_min) fail("coefficient range must be positive");
  if (!(spec.intermediate_fraction >= 0.0 && spec.intermediate_fraction < 1.0)) {
    fail("intermediate_fraction must be in [0, 1)");
  }
  if (!(spec.censor_fraction >= 0.0 && spec.censor_fraction <= 1.0)) fail("censor_fraction must be in [0, 1]");
  if (spec.cutoffs.shorter_days < 1 || spec.cutoffs.shorter_days >= spec.cutoffs.longer_days) {
    fail("survival cutoffs must satisfy 1 <= shorter < longer");
  }
  if (!(spec.median_shorter_days > 0.0)) fail("median_shorter_days must be positive");
  if (!(spec.median_longer_days > spec.cutoffs.longer_days)) {
    fail("median_longer_days must exceed the longer cutoff");
  }
  std::set<std::size_t> seen;
  std::size_t per_dir[2] = {0, 0};
  for (const auto& pa : spec.prognostic_atoms) {
    if (pa.atom >= spec.n_true_atoms) fail("prognostic atom index out of range");
    if (!seen.insert(pa.atom).second) fail("prognostic atom listed twice (inconsistent direction)");
    if (!(pa.prevalence >= 0.0 && pa.prevalence <= 1.0)) fail("prevalence must be in [0, 1]");
    ++per_dir[pa.direction == Direction::Shorter ? 0 : 1];
  }
  if (per_dir[0] > spec.k_true || per_dir[1] > spec.k_true) {
    fail("more prognostic atoms per direction than atoms per tile (k_true)");
  }
  if (spec.n_true_atoms - spec.prognostic_atoms.size() < spec.k_true) {
    fail("background atom pool smaller than k_true; tiles without prognostic atoms cannot be formed");
  }
}

Matrix<double> random_unit_atoms(std::size_t n, std::size_t dim, Rng& rng) {
  Matrix<double> atoms(n, dim);
  for (std::size_t i = 0; i < n; ++i) {
    double norm = 0.0;
    do {
      norm = 0.0;
      for (auto& v : atoms.row(i)) {
        v = rng.normal();
        norm += v * v;
      }
    } while (norm == 0.0);
    norm = std::sqrt(norm);
    for (auto& v : atoms.row(i)) v /= norm;
  }
  return atoms;
}

namespace {

// Picks `count` distinct entries of `pool` (partial Fisher-Yates on a copy).
std::vector<std::uint32_t> pick_distinct(std::vector<std::uint32_t> pool, std::size_t count, Rng& rng) {
  for (std::size_t i = 0; i < count; ++i) {
    const auto j = i + rng.uniform_index(pool.size() - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(count);
  return pool;
}

void compose_tile(const Matrix<double>& atoms, const std::vector<std::uint32_t>& members, double noise_sigma,
                  double coef_min, double coef_max, Rng& rng, std::span<float> out) {
  const std::size_t dim = atoms.cols();
  std::vector<double> x(dim, 0.0);
  for (const auto a : members) {
    const double c = rng.uniform(coef_min, coef_max);
    const auto atom = atoms.row(a);
    for (std::size_t d = 0; d < dim; ++d) x[d] += c * atom[d];
  }
  if (noise_sigma > 0.0) {
    for (auto& v : x) v += noise_sigma * rng.normal();
  }
  for (std::size_t d = 0; d < dim; ++d) out[d] = static_cast<float>(x[d]);
}

std::vector<GridCoord> scatter_on_grid(std::size_t n, Rng& rng) {
  const auto width = static_cast<std::size_t>(std::ceil(std::sqrt(1.5 * double(n))));
  std::vector<std::uint32_t> cells(width * width);
  for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = static_cast<std::uint32_t>(i);
  auto chosen = pick_distinct(std::move(cells), n, rng);
  std::sort(chosen.begin(), chosen.end());
  std::vector<GridCoord> coords(n);
  for (std::size_t i = 0; i < n; ++i) {
    coords[i] = {std::int32_t(chosen[i] % width), std::int32_t(chosen[i] / width)};
  }
  return coords;
}

std::string padded(std::size_t v, int width) {
  std::string s = std::to_string(v);
  return std::string(std::max(0, width - int(s.size())), '0') + s;
}

}  // namespace

PlantedTiles generate_planted_tiles(const Matrix<double>& atoms, std::size_t n_tiles, std::size_t k_true,
                                    double noise_sigma, Rng& rng, double coef_min, double coef_max) {
  if (k_true == 0 || k_true > atoms.rows()) throw ValidationError("k_true must be in [1, n_atoms]");
  std::vector<std::uint32_t> pool(atoms.rows());
  for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = static_cast<std::uint32_t>(i);
  PlantedTiles out{Matrix<float>(n_tiles, atoms.cols()), {}};
  out.memberships.reserve(n_tiles);
  for (std::size_t t = 0; t < n_tiles; ++t) {
    auto members = pick_distinct(pool, k_true, rng);
    std::sort(members.begin(), members.end());
    compose_tile(atoms, members, noise_sigma, coef_min, coef_max, rng, out.tiles.row(t));
    out.memberships.push_back(std::move(members));
  }
  return out;
}

SyntheticCohort generate_synthetic_cohort(const SynthSpec& spec) {
  validate_synth_spec(spec);
  Rng root(spec.seed);
  Rng atom_rng = root.fork(0xA70B5);
  SyntheticCohort out;
  out.truth.atoms = random_unit_atoms(spec.n_true_atoms, spec.dim, atom_rng);
  out.truth.prognostic_atoms = spec.prognostic_atoms;

  std::vector<bool> is_prognostic(spec.n_true_atoms, false);
  for (const auto& pa : spec.prognostic_atoms) is_prognostic[pa.atom] = true;
  std::vector<std::uint32_t> background;
  for (std::size_t a = 0; a < spec.n_true_atoms; ++a) {
    if (!is_prognostic[a]) background.push_back(static_cast<std::uint32_t>(a));
  }

  const double rate_shorter = std::numbers::ln2 / spec.median_shorter_days;
  const double rate_longer_excess =
      std::numbers::ln2 / (spec.median_longer_days - double(spec.cutoffs.longer_days));
  const int shorter_cut = spec.cutoffs.shorter_days;
  const int longer_cut = spec.cutoffs.longer_days;

  std::size_t index = 0;
  for (std::size_t h = 0; h < spec.n_hospitals; ++h) {
    const std::string hospital = "H" + std::to_string(h + 1);
    out.cohort.hospitals.push_back(hospital);
    for (std::size_t j = 0; j < spec.n_patients_per_hospital; ++j, ++index) {
      Rng rng = root.fork(index + 1);
      PatientRecord p;
      p.patient_id = hospital + "-P" + padded(j + 1, 3);
      p.hospital = hospital;
      p.embedding_path = "bags/" + p.patient_id + ".emb";

      const Direction cls = rng.uniform() < 0.5 ? Direction::Shorter : Direction::Longer;

      // Survival: truncated exponential below the shorter cutoff, or the longer
      // cutoff plus an exponential excess; a small share dies in between.
      int days = 0;
      if (rng.uniform() < spec.intermediate_fraction) {
        days = shorter_cut + 1 + int(rng.uniform_index(std::uint64_t(longer_cut - shorter_cut - 1)));
      } else if (cls == Direction::Shorter) {
        const double mass = 1.0 - std::exp(-rate_shorter * shorter_cut);
        const double t = -std::log1p(-rng.uniform() * mass) / rate_shorter;
        days = std::clamp(int(std::ceil(t)), 1, shorter_cut);
      } else {
        days = longer_cut + int(std::ceil(rng.exponential(rate_longer_excess)));
      }
      int event = 1;
      if (rng.uniform() < spec.censor_fraction) {
        const double c = rng.uniform(0.0, spec.max_follow_up_days);
        if (c < days) {
          days = int(std::floor(c));
          event = 0;
        }
      }
      p.survival_days = days;
      p.event = event;

      const double age = std::clamp(rng.normal() * 10.0 + (cls == Direction::Shorter ? 68.0 : 62.0), 20.0, 94.0);
      p.age_midpoint = std::floor(age / 5.0) * 5.0 + 2.5;
      p.sex = rng.uniform() < 0.58 ? Sex::M : Sex::F;
      if (rng.uniform() < 0.07) {
        p.mgmt = Mgmt::Unknown;
      } else {
        p.mgmt = rng.uniform() < (cls == Direction::Shorter ? 0.40 : 0.50) ? Mgmt::Methylated : Mgmt::Unmethylated;
      }

      const std::size_t n_tiles = spec.tiles_min + rng.uniform_index(spec.tiles_max - spec.tiles_min + 1);
      EmbeddingBag bag;
      bag.embeddings = Matrix<float>(n_tiles, spec.dim);
      std::vector<std::vector<std::uint32_t>> members_per_tile(n_tiles);
      for (std::size_t t = 0; t < n_tiles; ++t) {
        std::vector<std::uint32_t> members;
        for (const auto& pa : spec.prognostic_atoms) {
          if (pa.direction == cls && rng.uniform() < pa.prevalence) {
            members.push_back(static_cast<std::uint32_t>(pa.atom));
          }
        }
        const auto fill = pick_distinct(background, spec.k_true - members.size(), rng);
        members.insert(members.end(), fill.begin(), fill.end());
        std::sort(members.begin(), members.end());
        compose_tile(out.truth.atoms, members, spec.noise_sigma, spec.coef_min, spec.coef_max, rng,
                     bag.embeddings.row(t));
        members_per_tile[t] = std::move(members);
      }
      bag.coords = scatter_on_grid(n_tiles, rng);

      out.cohort.patients.push_back(std::move(p));
      out.bags.push_back(std::move(bag));
      out.truth.latent_class.push_back(cls);
      out.truth.memberships.push_back(std::move(members_per_tile));
    }
  }
  out.cohort.dim = spec.dim;
  return out;
}

void write_synthetic_cohort(const SyntheticCohort& synth, const SynthSpec& spec, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "bags", ec);
  if (ec) throw ValidationError("cannot create output directory " + dir.string() + ": " + ec.message());
  for (std::size_t i = 0; i < synth.cohort.patients.size(); ++i) {
    write_embedding_bag(synth.bags[i], dir / synth.cohort.patients[i].embedding_path);
  }
  write_manifest(synth.cohort, dir / "manifest.tsv");

  nlohmann::ordered_json j;
  j["seed"] = spec.seed;
  j["dim"] = spec.dim;
  j["n_true_atoms"] = spec.n_true_atoms;
  j["k_true"] = spec.k_true;
  j["noise_sigma"] = spec.noise_sigma;
  auto& prog = j["prognostic_atoms"] = nlohmann::ordered_json::array();
  for (const auto& pa : synth.truth.prognostic_atoms) {
    prog.push_back({{"atom", pa.atom}, {"direction", to_string(pa.direction)}, {"prevalence", pa.prevalence}});
  }
  auto& atoms = j["atoms"] = nlohmann::ordered_json::array();
  for (std::size_t a = 0; a < synth.truth.atoms.rows(); ++a) {
    const auto row = synth.truth.atoms.row(a);
    atoms.push_back(std::vector<double>(row.begin(), row.end()));
  }
  auto& patients = j["patients"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < synth.cohort.patients.size(); ++i) {
    patients.push_back({{"patient_id", synth.cohort.patients[i].patient_id},
                        {"latent_class", to_string(synth.truth.latent_class[i])},
                        {"tile_atoms", synth.truth.memberships[i]}});
  }
  std::ofstream out(dir / "ground_truth.json", std::ios::trunc);
  if (!out) throw ValidationError("cannot write ground_truth.json in " + dir.string());
  out << j.dump() << '\n';
}

GroundTruth read_ground_truth(const std::filesystem::path& json_path) {
  std::ifstream in(json_path);
  if (!in) throw ValidationError("cannot open " + json_path.string());
  nlohmann::json j;
  try {
    in >> j;
    GroundTruth gt;
    const auto& atoms = j.at("atoms");
    const std::size_t n = atoms.size();
    const std::size_t dim = n ? atoms.at(0).size() : 0;
    gt.atoms = Matrix<double>(n, dim);
    for (std::size_t a = 0; a < n; ++a) {
      for (std::size_t d = 0; d < dim; ++d) gt.atoms(a, d) = atoms.at(a).at(d).get<double>();
    }
    for (const auto& pa : j.at("prognostic_atoms")) {
      gt.prognostic_atoms.push_back({pa.at("atom").get<std::size_t>(),
                                     pa.at("direction").get<std::string>() == "shorter" ? Direction::Shorter
                                                                                        : Direction::Longer,
                                     pa.at("prevalence").get<double>()});
    }
    return gt;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed ground truth " + json_path.string() + ": " + e.what());
  }
}

}  // namespace histoprog
