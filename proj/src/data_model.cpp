#include "histoprog/data_model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_set>

#include "histoprog/binary_io.hpp"

namespace histoprog {

std::string to_string(Sex sex) { return sex == Sex::F ? "F" : "M"; }

std::string to_string(Mgmt mgmt) {
  switch (mgmt) {
    case Mgmt::Unmethylated: return "unmethylated";
    case Mgmt::Methylated: return "methylated";
    case Mgmt::Unknown: return "unknown";
  }
  return "unknown";
}

std::string to_string(SurvivalGroup group) {
  switch (group) {
    case SurvivalGroup::Shorter: return "shorter";
    case SurvivalGroup::Longer: return "longer";
    case SurvivalGroup::Intermediate: return "intermediate";
    case SurvivalGroup::Excluded: return "excluded";
  }
  return "excluded";
}

std::string to_string(Direction d) { return d == Direction::Shorter ? "shorter" : "longer"; }

SurvivalGroup assign_survival_group(int survival_days, int event, const SurvivalCutoffs& cutoffs) {
  if (survival_days < 0) throw ValidationError("survival_days must be >= 0");
  if (event != 0 && event != 1) throw ValidationError("event must be 0 or 1");
  if (cutoffs.shorter_days >= cutoffs.longer_days) {
    throw ValidationError("shorter cutoff must be below the longer cutoff");
  }
  if (event == 1 && survival_days <= cutoffs.shorter_days) return SurvivalGroup::Shorter;
  if (survival_days >= cutoffs.longer_days) return SurvivalGroup::Longer;
  if (event == 1) return SurvivalGroup::Intermediate;
  return SurvivalGroup::Excluded;
}

const PatientRecord* Cohort::find(const std::string& patient_id) const {
  for (const auto& p : patients) {
    if (p.patient_id == patient_id) return &p;
  }
  return nullptr;
}

// ---------------------------------------------------------------------------
// Manifest

namespace {

const std::vector<std::string> kManifestColumns = {
    "patient_id", "hospital", "embedding_path", "survival_days", "event", "age_midpoint", "sex",
    "mgmt"};

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto tab = line.find('\t', start);
    if (tab == std::string::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
}

[[noreturn]] void manifest_error(std::size_t line, const std::string& column, const std::string& what) {
  throw ValidationError("manifest row " + std::to_string(line) + ", column '" + column + "': " + what);
}

int parse_int(const std::string& s, std::size_t line, const std::string& column) {
  int v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
    manifest_error(line, column, "not an integer: '" + s + "'");
  }
  return v;
}

double parse_double(const std::string& s, std::size_t line, const std::string& column) {
  if (s.empty()) manifest_error(line, column, "empty value");
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    manifest_error(line, column, "not a number: '" + s + "'");
  }
  if (used != s.size() || !std::isfinite(v)) manifest_error(line, column, "not a number: '" + s + "'");
  return v;
}

std::string format_age(double age) {
  std::ostringstream os;
  os << age;
  return os.str();
}

}  // namespace

Cohort parse_manifest(const std::filesystem::path& tsv_path) {
  std::ifstream in(tsv_path);
  if (!in) throw ValidationError("cannot open manifest " + tsv_path.string());

  Cohort cohort;
  cohort.base_dir = tsv_path.parent_path();

  std::string line;
  std::size_t line_no = 0;
  bool header_seen = false;
  std::unordered_set<std::string> ids;
  std::set<std::string> hospitals;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!header_seen) {
      const auto cols = split_tabs(line);
      if (cols != kManifestColumns) {
        std::string expected;
        for (const auto& c : kManifestColumns) expected += (expected.empty() ? "" : ", ") + c;
        throw ValidationError("manifest header must be exactly: " + expected);
      }
      header_seen = true;
      continue;
    }
    if (line.empty()) continue;
    const auto f = split_tabs(line);
    if (f.size() != kManifestColumns.size()) {
      manifest_error(line_no, kManifestColumns[std::min(f.size(), kManifestColumns.size() - 1)],
                     "expected " + std::to_string(kManifestColumns.size()) + " fields, found " +
                         std::to_string(f.size()));
    }
    PatientRecord r;
    r.patient_id = f[0];
    if (r.patient_id.empty()) manifest_error(line_no, "patient_id", "empty value");
    if (!ids.insert(r.patient_id).second) {
      manifest_error(line_no, "patient_id", "duplicate patient_id '" + r.patient_id + "'");
    }
    r.hospital = f[1];
    if (r.hospital.empty()) manifest_error(line_no, "hospital", "empty value");
    r.embedding_path = f[2];
    if (r.embedding_path.empty()) manifest_error(line_no, "embedding_path", "empty value");
    r.survival_days = parse_int(f[3], line_no, "survival_days");
    if (r.survival_days < 0) manifest_error(line_no, "survival_days", "must be >= 0");
    r.event = parse_int(f[4], line_no, "event");
    if (r.event != 0 && r.event != 1) manifest_error(line_no, "event", "must be 0 or 1");
    r.age_midpoint = parse_double(f[5], line_no, "age_midpoint");
    const double k = (r.age_midpoint - 2.5) / 5.0;
    if (r.age_midpoint < 0 || std::abs(k - std::round(k)) > 1e-9) {
      manifest_error(line_no, "age_midpoint", "not a five-year group midpoint (5k + 2.5): '" + f[5] + "'");
    }
    if (f[6] == "F") {
      r.sex = Sex::F;
    } else if (f[6] == "M") {
      r.sex = Sex::M;
    } else {
      manifest_error(line_no, "sex", "expected F or M, found '" + f[6] + "'");
    }
    if (f[7] == "unmethylated") {
      r.mgmt = Mgmt::Unmethylated;
    } else if (f[7] == "methylated") {
      r.mgmt = Mgmt::Methylated;
    } else if (f[7] == "unknown") {
      r.mgmt = Mgmt::Unknown;
    } else {
      manifest_error(line_no, "mgmt", "expected unmethylated, methylated or unknown, found '" + f[7] + "'");
    }
    hospitals.insert(r.hospital);
    cohort.patients.push_back(std::move(r));
  }
  if (!header_seen) throw ValidationError("manifest " + tsv_path.string() + " is empty");
  if (cohort.patients.empty()) throw ValidationError("manifest " + tsv_path.string() + " has no patients");
  cohort.hospitals.assign(hospitals.begin(), hospitals.end());
  return cohort;
}

void write_manifest(const Cohort& cohort, const std::filesystem::path& tsv_path) {
  std::ofstream out(tsv_path, std::ios::trunc);
  if (!out) throw ValidationError("cannot write manifest " + tsv_path.string());
  for (std::size_t i = 0; i < kManifestColumns.size(); ++i) {
    out << (i ? "\t" : "") << kManifestColumns[i];
  }
  out << '\n';
  for (const auto& p : cohort.patients) {
    out << p.patient_id << '\t' << p.hospital << '\t' << p.embedding_path << '\t' << p.survival_days
        << '\t' << p.event << '\t' << format_age(p.age_midpoint) << '\t' << to_string(p.sex) << '\t'
        << to_string(p.mgmt) << '\n';
  }
}

void resolve_cohort_dim(Cohort& cohort) {
  std::size_t dim = 0;
  for (const auto& p : cohort.patients) {
    const auto header = read_bag_header(cohort.bag_path(p));
    if (dim == 0) {
      dim = header.dim;
    } else if (header.dim != dim) {
      throw ValidationError("embedding dimension mismatch: " + p.patient_id + " has dim " +
                            std::to_string(header.dim) + ", cohort dim is " + std::to_string(dim));
    }
  }
  cohort.dim = dim;
}

// ---------------------------------------------------------------------------
// EMB1

void validate_bag(const EmbeddingBag& bag) {
  if (bag.n_tiles() == 0) throw ValidationError("embedding bag has no tiles");
  if (bag.dim() == 0) throw ValidationError("embedding bag has dim 0");
  if (bag.coords.size() != bag.n_tiles()) {
    throw ValidationError("embedding bag has " + std::to_string(bag.coords.size()) + " coords for " +
                          std::to_string(bag.n_tiles()) + " tiles");
  }
  std::set<std::pair<std::int32_t, std::int32_t>> seen;
  for (const auto& c : bag.coords) {
    if (!seen.emplace(c.x, c.y).second) {
      throw ValidationError("duplicate tile coordinate (" + std::to_string(c.x) + ", " +
                            std::to_string(c.y) + ")");
    }
  }
}

namespace {

constexpr char kBagMagic[4] = {'E', 'M', 'B', '1'};
constexpr std::uint8_t kBagVersion = 1;
constexpr std::uint8_t kDtypeF32 = 1;
constexpr std::size_t kBagHeaderSize = 20;

BagHeader parse_bag_header(binio::Reader& r, const std::filesystem::path& path) {
  if (!r.has(kBagHeaderSize)) {
    throw BagFormatError(BagErrorKind::Truncated, path.string() + ": truncated header");
  }
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kBagMagic, 4) != 0) {
    throw BagFormatError(BagErrorKind::BadMagic, path.string() + ": bad magic");
  }
  const auto version = r.u8();
  if (version != kBagVersion) {
    throw BagFormatError(BagErrorKind::BadVersion,
                         path.string() + ": unsupported version " + std::to_string(version));
  }
  const auto dtype = r.u8();
  if (dtype != kDtypeF32) {
    throw BagFormatError(BagErrorKind::BadDtype, path.string() + ": unsupported dtype " + std::to_string(dtype));
  }
  r.u8();
  r.u8();
  BagHeader h;
  h.dim = r.u32();
  h.n_tiles = r.u64();
  if (h.dim == 0) throw BagFormatError(BagErrorKind::ZeroDim, path.string() + ": dim is 0");
  if (h.n_tiles == 0) throw BagFormatError(BagErrorKind::ZeroTiles, path.string() + ": n_tiles is 0");
  return h;
}

binio::Reader open_bag(const std::filesystem::path& path) {
  try {
    return binio::Reader(binio::Reader::slurp(path));
  } catch (const ValidationError& e) {
    throw BagFormatError(BagErrorKind::Io, e.what());
  }
}

}  // namespace

void write_embedding_bag(const EmbeddingBag& bag, const std::filesystem::path& path) {
  validate_bag(bag);
  binio::Writer w;
  w.bytes(kBagMagic, 4);
  w.u8(kBagVersion);
  w.u8(kDtypeF32);
  w.u8(0);
  w.u8(0);
  w.u32(static_cast<std::uint32_t>(bag.dim()));
  w.u64(bag.n_tiles());
  for (const auto& c : bag.coords) {
    w.i32(c.x);
    w.i32(c.y);
  }
  w.f32s(bag.embeddings.values());
  w.save(path);
}

BagHeader read_bag_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw BagFormatError(BagErrorKind::Io, "cannot open " + path.string());
  std::vector<std::uint8_t> head(kBagHeaderSize);
  in.read(reinterpret_cast<char*>(head.data()), std::streamsize(head.size()));
  head.resize(static_cast<std::size_t>(in.gcount()));
  binio::Reader r(std::move(head));
  return parse_bag_header(r, path);
}

EmbeddingBag read_embedding_bag(const std::filesystem::path& path) {
  auto r = open_bag(path);
  const auto h = parse_bag_header(r, path);
  const std::uint64_t payload = h.n_tiles * 8 + h.n_tiles * std::uint64_t(h.dim) * 4;
  if (r.remaining() < payload) {
    throw BagFormatError(BagErrorKind::Truncated,
                         path.string() + ": truncated (header claims " + std::to_string(h.n_tiles) +
                             " tiles of dim " + std::to_string(h.dim) + ")");
  }
  EmbeddingBag bag;
  bag.coords.resize(h.n_tiles);
  for (auto& c : bag.coords) {
    c.x = r.i32();
    c.y = r.i32();
  }
  bag.embeddings = Matrix<float>(h.n_tiles, h.dim);
  r.f32s(bag.embeddings.values());
  return bag;
}

}  // namespace histoprog
