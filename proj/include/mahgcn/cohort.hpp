#pragma once

#include "mahgcn/atlas.hpp"
#include "mahgcn/bfn.hpp"
#include "mahgcn/common.hpp"
#include "mahgcn/io.hpp"

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace mahgcn {

enum class Diagnosis { HC, ASD, ADHD, MCI, AD, VCI };
enum class Gender { M, F };

inline const char* diagnosis_name(Diagnosis d) {
  switch (d) {
    case Diagnosis::HC: return "HC";
    case Diagnosis::ASD: return "ASD";
    case Diagnosis::ADHD: return "ADHD";
    case Diagnosis::MCI: return "MCI";
    case Diagnosis::AD: return "AD";
    case Diagnosis::VCI: return "VCI";
  }
  return "?";
}

inline Diagnosis parse_diagnosis(const std::string& s) {
  for (Diagnosis d : {Diagnosis::HC, Diagnosis::ASD, Diagnosis::ADHD,
                      Diagnosis::MCI, Diagnosis::AD, Diagnosis::VCI})
    if (s == diagnosis_name(d)) return d;
  fail("parse", "unknown diagnosis " + s);
}

struct SubjectRecord {
  std::string subject_id;
  std::string site_id;
  std::string scanner_id;
  Diagnosis diagnosis = Diagnosis::HC;
  double age = 0.0;
  Gender gender = Gender::M;
  double severity = 0.0;  // synthetic ground truth, 0 for HC
  std::vector<Matrix> signals;  // per scale, ROIs x timepoints; may be empty
  std::vector<Bfn> networks;    // per scale; may be empty

  /// 0 = HC, 1 = BD (any disorder)
  int binary_label() const { return diagnosis == Diagnosis::HC ? 0 : 1; }

  void validate() const {
    require(!subject_id.empty(), "subject", "empty subject_id");
    require(!site_id.empty(), "subject", "empty site_id for " + subject_id);
    require(!scanner_id.empty(), "subject", "empty scanner_id for " + subject_id);
    require(age > 0.0, "subject", "non-positive age for " + subject_id);
  }
};

struct Cohort {
  std::vector<SubjectRecord> subjects;
  std::vector<int> scales;

  std::size_t size() const { return subjects.size(); }

  void validate(bool require_networks = false) const {
    std::set<std::string> ids;
    for (const auto& s : subjects) {
      s.validate();
      require(ids.insert(s.subject_id).second, "duplicate-id",
              "duplicate subject_id " + s.subject_id);
      if (!s.signals.empty()) {
        require(s.signals.size() == scales.size(), "shape-mismatch",
                "signal scale count mismatch for " + s.subject_id);
        for (std::size_t k = 0; k < scales.size(); ++k)
          require(s.signals[k].rows() == scales[k], "shape-mismatch",
                  "signals at scale " + std::to_string(scales[k]) +
                      " have wrong row count for " + s.subject_id);
      }
      if (require_networks || !s.networks.empty()) {
        require(s.networks.size() == scales.size(), "shape-mismatch",
                "network scale count mismatch for " + s.subject_id);
        for (std::size_t k = 0; k < scales.size(); ++k)
          require(s.networks[k].scale == scales[k], "shape-mismatch",
                  "network scale mismatch for " + s.subject_id);
      }
    }
  }
};

struct SyntheticSpec {
  int n_sites = 1;
  int subjects_per_site = 10;
  double class_ratio_per_site = 0.5;  // fraction HC
  std::vector<int> scales;
  double site_shift_magnitude = 0.0;
  double site_noise_scale = 0.0;
  int planted_rsn = 0;
  double planted_effect_size = 0.0;
  bool severity_continuum = false;
  std::uint64_t rng_seed = 0;
  // diagnoses assigned to BD subjects, cycled over sites
  std::vector<Diagnosis> bd_diagnoses = {Diagnosis::ASD, Diagnosis::ADHD,
                                         Diagnosis::MCI};

  void validate() const {
    require(n_sites >= 1 && subjects_per_site >= 1, "spec", "counts must be >= 1");
    require(class_ratio_per_site > 0.0 && class_ratio_per_site < 1.0, "spec",
            "class ratio must be in (0,1)");
    require(!scales.empty(), "spec", "no scales");
    for (std::size_t i = 1; i < scales.size(); ++i)
      require(scales[i] > scales[i - 1], "spec", "scales must be strictly increasing");
    require(planted_effect_size >= 0.0, "spec", "negative effect size");
    require(!bd_diagnoses.empty(), "spec", "no BD diagnoses");
  }
};

namespace detail {

/// Low-rank latent factor correlation matrix: cov = F F^T + sigma2 I,
/// normalized to unit diagonal. Valid by construction.
inline Matrix random_correlation(int n, int rank, double sigma2, Rng& rng) {
  Matrix f = rng.gaussian_matrix(n, rank);
  Matrix cov = f * f.transpose();
  cov.diagonal().array() += sigma2;
  Vector inv_sd = cov.diagonal().array().sqrt().inverse();
  return inv_sd.asDiagonal() * cov * inv_sd.asDiagonal();
}

}  // namespace detail

/// Deterministic synthetic cohort with planted site and disease effects.
/// The atlas supplies per-scale RSN labels for the planted block.
inline Cohort generate_synthetic(const SyntheticSpec& spec,
                                 const MultiscaleAtlasSet& atlas) {
  spec.validate();
  require(atlas.n_scales() == static_cast<int>(spec.scales.size()), "spec",
          "atlas scale count mismatch");
  for (int s = 0; s < atlas.n_scales(); ++s)
    require(atlas.scales[static_cast<std::size_t>(s)].n_rois == spec.scales[static_cast<std::size_t>(s)],
            "spec", "atlas ROI counts must match spec scales");

  Cohort cohort;
  cohort.scales = spec.scales;

  constexpr int kRank = 4;
  constexpr double kSigma2 = 12.0;  // keeps base edge spread ~0.12

  for (int site = 0; site < spec.n_sites; ++site) {
    Rng rng = Rng::stream(spec.rng_seed, 1000 + static_cast<std::uint64_t>(site));
    double unit = spec.n_sites == 1
                      ? 0.0
                      : -1.0 + 2.0 * site / static_cast<double>(spec.n_sites - 1);
    double site_offset = spec.site_shift_magnitude * unit;
    double site_noise_sd = 0.05 * (1.0 + spec.site_noise_scale * (unit + 1.0) / 2.0);
    double age_lo = 8.0 + 10.0 * site, age_hi = age_lo + 15.0;
    Diagnosis bd_diag = spec.bd_diagnoses[static_cast<std::size_t>(site) %
                                          spec.bd_diagnoses.size()];

    int n = spec.subjects_per_site;
    int n_hc = static_cast<int>(
        std::ceil(spec.class_ratio_per_site * static_cast<double>(n)));
    n_hc = std::min(n_hc, n - 1);  // keep both classes present
    std::vector<int> is_bd(static_cast<std::size_t>(n), 0);
    for (int i = n_hc; i < n; ++i) is_bd[static_cast<std::size_t>(i)] = 1;
    rng.shuffle(is_bd);

    for (int i = 0; i < n; ++i) {
      SubjectRecord rec;
      rec.subject_id = "s" + std::to_string(site) + "_" + std::to_string(i);
      rec.site_id = "site" + std::to_string(site);
      rec.scanner_id = "scanner" + std::to_string(site);
      bool bd = is_bd[static_cast<std::size_t>(i)] != 0;
      rec.diagnosis = bd ? bd_diag : Diagnosis::HC;
      rec.age = rng.uniform(age_lo, age_hi);
      rec.gender = rng.bernoulli(0.5) ? Gender::F : Gender::M;
      rec.severity = bd ? (spec.severity_continuum ? rng.uniform() : 1.0) : 0.0;

      double effect = spec.planted_effect_size * rec.severity;
      for (std::size_t k = 0; k < spec.scales.size(); ++k) {
        int s = spec.scales[k];
        Matrix w = detail::random_correlation(s, kRank, kSigma2, rng);
        const auto& labels = atlas.scales[k].rsn_label;
        for (Index a = 0; a < s; ++a) {
          for (Index b = 0; b < a; ++b) {
            double v = w(a, b) + site_offset + site_noise_sd * rng.normal();
            if (bd && labels[static_cast<std::size_t>(a)] == spec.planted_rsn &&
                labels[static_cast<std::size_t>(b)] == spec.planted_rsn)
              v += effect;
            v = std::clamp(v, -1.0, 1.0);
            w(a, b) = v;
            w(b, a) = v;
          }
          w(a, a) = 1.0;
        }
        Bfn bfn;
        bfn.scale = s;
        bfn.weights = std::move(w);
        rec.networks.push_back(std::move(bfn));
      }
      cohort.subjects.push_back(std::move(rec));
    }
  }
  cohort.validate(true);
  return cohort;
}

/// Shuffled (unstratified) k-fold partition; fold sizes differ by at most 1.
struct FoldSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

inline std::vector<FoldSplit> split_kfold(std::size_t n, int k, std::uint64_t seed) {
  require(k >= 2 && static_cast<std::size_t>(k) <= n, "split", "k out of range");
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng = Rng::stream(seed, 0xf01d);
  rng.shuffle(idx);

  std::vector<FoldSplit> folds(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < n; ++i)
    folds[i % static_cast<std::size_t>(k)].test.push_back(idx[i]);
  for (int f = 0; f < k; ++f) {
    auto& fold = folds[static_cast<std::size_t>(f)];
    std::set<std::size_t> in_test(fold.test.begin(), fold.test.end());
    for (std::size_t i = 0; i < n; ++i)
      if (!in_test.count(i)) fold.train.push_back(i);
  }
  return folds;
}

inline std::vector<FoldSplit> split_kfold(const Cohort& cohort, int k,
                                          std::uint64_t seed) {
  return split_kfold(cohort.size(), k, seed);
}

// ---------------------------------------------------------------------------
// Manifest ingestion
// ---------------------------------------------------------------------------
// Format:
//   cohort v1
//   kind timeseries|network
//   scales <s1> <s2> ...
//   <subject_id> <site_id> <scanner_id> <diagnosis> <age> <gender> <path per scale>
// Paths are resolved relative to the manifest's directory.

inline Cohort load_cohort(const std::string& manifest_path) {
  std::ifstream in(manifest_path);
  require(in.good(), "missing-file", "cannot open manifest " + manifest_path);
  auto dir = std::filesystem::path(manifest_path).parent_path();

  std::string line;
  auto next_line = [&]() {
    while (std::getline(in, line))
      if (!line.empty() && line[0] != '#') return true;
    return false;
  };
  require(next_line() && line == "cohort v1", "parse", "bad manifest header");
  require(next_line(), "parse", "truncated manifest");
  std::istringstream ks(line);
  std::string key, kind;
  ks >> key >> kind;
  require(key == "kind" && (kind == "timeseries" || kind == "network"), "parse",
          "bad kind line");
  require(next_line(), "parse", "truncated manifest");
  Cohort cohort;
  {
    std::istringstream ss(line);
    ss >> key;
    require(key == "scales", "parse", "expected scales line");
    int s;
    while (ss >> s) cohort.scales.push_back(s);
    require(!cohort.scales.empty(), "parse", "empty scale list");
  }

  while (next_line()) {
    auto fields = io::split_fields(line);
    require(fields.size() == 6 + cohort.scales.size(), "parse",
            "manifest row needs 6 covariate fields plus one path per scale: " + line);
    SubjectRecord rec;
    rec.subject_id = fields[0];
    rec.site_id = fields[1];
    rec.scanner_id = fields[2];
    rec.diagnosis = parse_diagnosis(fields[3]);
    try {
      rec.age = std::stod(fields[4]);
    } catch (const std::exception&) {
      fail("parse", "unparseable age for subject " + rec.subject_id);
    }
    require(rec.age > 0.0, "parse", "non-positive age for subject " + rec.subject_id);
    if (fields[5] == "M")
      rec.gender = Gender::M;
    else if (fields[5] == "F")
      rec.gender = Gender::F;
    else
      fail("parse", "unparseable gender for subject " + rec.subject_id);

    for (std::size_t k = 0; k < cohort.scales.size(); ++k) {
      auto path = (dir / fields[6 + k]).string();
      Matrix m;
      try {
        m = io::read_matrix(path);
      } catch (const Error& e) {
        fail(e.kind(), "subject " + rec.subject_id + ": " + e.what());
      }
      require(m.rows() == cohort.scales[k], "shape-mismatch",
              "subject " + rec.subject_id + ": file " + fields[6 + k] + " has " +
                  std::to_string(m.rows()) + " rows, expected " +
                  std::to_string(cohort.scales[k]));
      if (kind == "timeseries") {
        rec.signals.push_back(std::move(m));
      } else {
        require(m.cols() == cohort.scales[k], "shape-mismatch",
                "subject " + rec.subject_id + ": network must be square");
        Bfn bfn;
        bfn.scale = cohort.scales[k];
        bfn.weights = std::move(m);
        rec.networks.push_back(std::move(bfn));
      }
    }
    cohort.subjects.push_back(std::move(rec));
  }
  cohort.validate();
  return cohort;
}

/// Computes per-scale networks from loaded signals.
inline void build_networks(Cohort& cohort) {
  for (auto& s : cohort.subjects) {
    if (!s.networks.empty()) continue;
    require(!s.signals.empty(), "bfn",
            "subject " + s.subject_id + " has no signals to build networks from");
    for (const auto& ts : s.signals) s.networks.push_back(build_bfn(ts));
  }
  cohort.validate(true);
}

}  // namespace mahgcn
