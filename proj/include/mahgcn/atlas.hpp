#pragma once

#include "mahgcn/common.hpp"
#include "mahgcn/io.hpp"

#include <array>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace mahgcn {

inline constexpr std::array<const char*, 7> kRsnNames = {
    "VIS", "SM", "DAN", "SAL", "LIM", "ECN", "DMN"};

struct AtlasScale {
  int n_rois = 0;
  std::vector<int> rsn_label;   // per ROI, index into kRsnNames (or fewer)
  std::vector<double> roi_size; // voxel counts, used only for overlap ratios
};

/// Binary fine-to-coarse node mapping (rows: fine ROIs, cols: coarse ROIs).
struct MappingMatrix {
  Matrix entries;
};

struct MultiscaleAtlasSet {
  std::vector<AtlasScale> scales;  // ordered coarse to fine
  // overlaps[k]: voxel-overlap counts between scales[k+1] (finer, rows)
  // and scales[k] (coarser, cols)
  std::vector<Matrix> overlaps;

  int n_scales() const { return static_cast<int>(scales.size()); }

  void validate() const {
    require(!scales.empty(), "atlas", "no scales");
    for (std::size_t s = 0; s < scales.size(); ++s) {
      const auto& sc = scales[s];
      require(sc.n_rois >= 1, "atlas", "scale with no ROIs");
      require(static_cast<int>(sc.rsn_label.size()) == sc.n_rois, "atlas",
              "rsn_label length mismatch");
      require(static_cast<int>(sc.roi_size.size()) == sc.n_rois, "atlas",
              "roi_size length mismatch");
      for (double v : sc.roi_size)
        require(v > 0.0, "atlas", "roi_size must be positive");
      if (s > 0)
        require(scales[s].n_rois > scales[s - 1].n_rois, "atlas",
                "scales must be strictly increasing in ROI count");
    }
    require(overlaps.size() + 1 == scales.size(), "atlas",
            "need one overlap matrix per adjacent scale pair");
    for (std::size_t k = 0; k < overlaps.size(); ++k) {
      const auto& ov = overlaps[k];
      const auto& fine = scales[k + 1];
      const auto& coarse = scales[k];
      require(ov.rows() == fine.n_rois && ov.cols() == coarse.n_rois, "atlas",
              "overlap matrix shape mismatch");
      for (int i = 0; i < fine.n_rois; ++i) {
        double row_sum = ov.row(i).sum();
        require(std::abs(row_sum - fine.roi_size[i]) < 1e-6 * fine.roi_size[i] + 1e-9,
                "atlas", "overlap row sum must equal fine roi_size");
      }
    }
  }
};

/// Eq.-style thresholded mapping from the finer scale P to the adjacent
/// coarser scale Q: entry(i,j) = 1 iff overlap(i,j)/size_P(i) > th.
inline MappingMatrix compute_mapping(const MultiscaleAtlasSet& atlas, int p_index,
                                     int q_index, double th) {
  require(p_index == q_index + 1, "atlas",
          "mapping is defined between adjacent scales (P = Q + 1)");
  require(q_index >= 0 && p_index < atlas.n_scales(), "atlas",
          "scale index out of range");
  const Matrix& ov = atlas.overlaps[static_cast<std::size_t>(q_index)];
  const auto& fine = atlas.scales[static_cast<std::size_t>(p_index)];
  MappingMatrix m;
  m.entries = Matrix::Zero(ov.rows(), ov.cols());
  for (Index i = 0; i < ov.rows(); ++i) {
    double size = fine.roi_size[static_cast<std::size_t>(i)];
    for (Index j = 0; j < ov.cols(); ++j)
      if (ov(i, j) / size > th) m.entries(i, j) = 1.0;
  }
  return m;
}

/// Strictly nested synthetic hierarchy: each fine ROI lies wholly inside one
/// coarse ROI, RSN labels are assigned at the coarsest scale and inherited.
inline MultiscaleAtlasSet synth_hierarchy(const std::vector<int>& scales,
                                          int rsn_count, std::uint64_t seed) {
  require(!scales.empty(), "atlas", "empty scale list");
  require(rsn_count >= 1 && rsn_count <= static_cast<int>(kRsnNames.size()),
          "atlas", "rsn_count out of range");
  for (std::size_t s = 1; s < scales.size(); ++s)
    require(scales[s] > scales[s - 1], "atlas", "scales must be strictly increasing");
  require(scales.front() >= rsn_count, "atlas",
          "coarsest scale must have at least rsn_count ROIs");

  Rng rng = Rng::stream(seed, 0x0a71a5);
  MultiscaleAtlasSet atlas;

  // coarsest scale: ROIs dealt round-robin over RSNs, then sizes randomized
  AtlasScale coarsest;
  coarsest.n_rois = scales.front();
  for (int i = 0; i < coarsest.n_rois; ++i) {
    coarsest.rsn_label.push_back(i % rsn_count);
    coarsest.roi_size.push_back(0.0);  // filled after children are known
  }
  atlas.scales.push_back(coarsest);

  for (std::size_t s = 1; s < scales.size(); ++s) {
    const AtlasScale& parent = atlas.scales.back();
    int n_fine = scales[s];
    // deal fine ROIs to parents as evenly as possible
    std::vector<int> parent_of(static_cast<std::size_t>(n_fine));
    for (int i = 0; i < n_fine; ++i)
      parent_of[static_cast<std::size_t>(i)] = i % parent.n_rois;

    AtlasScale fine;
    fine.n_rois = n_fine;
    for (int i = 0; i < n_fine; ++i) {
      int parent_idx = parent_of[static_cast<std::size_t>(i)];
      fine.rsn_label.push_back(parent.rsn_label[static_cast<std::size_t>(parent_idx)]);
      fine.roi_size.push_back(static_cast<double>(20 + rng.below(30)));
    }
    Matrix ov = Matrix::Zero(n_fine, parent.n_rois);
    for (int i = 0; i < n_fine; ++i)
      ov(i, parent_of[static_cast<std::size_t>(i)]) = fine.roi_size[static_cast<std::size_t>(i)];
    atlas.overlaps.push_back(std::move(ov));
    atlas.scales.push_back(std::move(fine));
  }

  // finest scale is already sized; propagate sizes upward so that every
  // coarse ROI's size is the sum of its children
  if (atlas.scales.size() == 1) {
    for (auto& v : atlas.scales[0].roi_size) v = static_cast<double>(20 + rng.below(30));
  } else {
    for (std::size_t s = atlas.scales.size() - 1; s > 0; --s) {
      Matrix& ov = atlas.overlaps[s - 1];
      const auto& fine = atlas.scales[s];
      auto& coarse = atlas.scales[s - 1];
      // refresh overlap entries: fine sizes below may have been re-summed
      for (int i = 0; i < fine.n_rois; ++i)
        for (int j = 0; j < coarse.n_rois; ++j)
          if (ov(i, j) != 0.0) ov(i, j) = fine.roi_size[static_cast<std::size_t>(i)];
      for (int j = 0; j < coarse.n_rois; ++j)
        coarse.roi_size[static_cast<std::size_t>(j)] = ov.col(j).sum();
    }
  }
  atlas.validate();
  return atlas;
}

// ---------------------------------------------------------------------------
// Atlas file format: one "scale" section per scale (coarse to fine), then one
// "overlap" section per adjacent pair.
// ---------------------------------------------------------------------------

inline void save_atlas(const std::string& path, const MultiscaleAtlasSet& atlas) {
  std::ofstream out(path);
  require(out.good(), "io", "cannot write " + path);
  out << "atlas v1\n";
  out << "n_scales " << atlas.n_scales() << "\n";
  for (const auto& sc : atlas.scales) {
    out << "scale " << sc.n_rois << "\n";
    out << "rsn";
    for (int r : sc.rsn_label) out << ' ' << kRsnNames[static_cast<std::size_t>(r)];
    out << "\nsize";
    for (double v : sc.roi_size) out << ' ' << io::format_double(v);
    out << "\n";
  }
  for (std::size_t k = 0; k < atlas.overlaps.size(); ++k) {
    out << "overlap " << k + 1 << " " << k << "\n";
    const Matrix& ov = atlas.overlaps[k];
    for (Index i = 0; i < ov.rows(); ++i) {
      for (Index j = 0; j < ov.cols(); ++j) {
        if (j) out << ' ';
        out << io::format_double(ov(i, j));
      }
      out << "\n";
    }
  }
}

inline MultiscaleAtlasSet load_atlas(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "missing-file", "cannot open atlas " + path);
  std::string line;
  auto next_line = [&]() {
    while (std::getline(in, line))
      if (!line.empty() && line[0] != '#') return true;
    return false;
  };
  require(next_line() && line == "atlas v1", "parse", "bad atlas header");
  require(next_line(), "parse", "truncated atlas file");
  std::istringstream hs(line);
  std::string key;
  int n_scales = 0;
  hs >> key >> n_scales;
  require(key == "n_scales" && n_scales >= 1, "parse", "bad n_scales line");

  auto rsn_index = [&](const std::string& name) {
    for (std::size_t i = 0; i < kRsnNames.size(); ++i)
      if (name == kRsnNames[i]) return static_cast<int>(i);
    fail("parse", "unknown RSN label " + name);
  };

  MultiscaleAtlasSet atlas;
  for (int s = 0; s < n_scales; ++s) {
    require(next_line(), "parse", "truncated atlas file");
    std::istringstream ss(line);
    int n = 0;
    ss >> key >> n;
    require(key == "scale" && n >= 1, "parse", "bad scale line");
    AtlasScale sc;
    sc.n_rois = n;
    require(next_line(), "parse", "truncated atlas file");
    {
      std::istringstream rs(line);
      rs >> key;
      require(key == "rsn", "parse", "expected rsn line");
      std::string name;
      while (rs >> name) sc.rsn_label.push_back(rsn_index(name));
    }
    require(next_line(), "parse", "truncated atlas file");
    {
      std::istringstream zs(line);
      zs >> key;
      require(key == "size", "parse", "expected size line");
      double v;
      while (zs >> v) sc.roi_size.push_back(v);
    }
    atlas.scales.push_back(std::move(sc));
  }
  for (int k = 0; k + 1 < n_scales; ++k) {
    require(next_line(), "parse", "truncated atlas file");
    std::istringstream os(line);
    int p = 0, q = 0;
    os >> key >> p >> q;
    require(key == "overlap" && p == k + 1 && q == k, "parse", "bad overlap header");
    const auto& fine = atlas.scales[static_cast<std::size_t>(p)];
    const auto& coarse = atlas.scales[static_cast<std::size_t>(q)];
    Matrix ov(fine.n_rois, coarse.n_rois);
    for (Index i = 0; i < ov.rows(); ++i) {
      require(next_line(), "parse", "truncated overlap matrix");
      std::istringstream ms(line);
      for (Index j = 0; j < ov.cols(); ++j)
        require(static_cast<bool>(ms >> ov(i, j)), "parse", "short overlap row");
    }
    atlas.overlaps.push_back(std::move(ov));
  }
  atlas.validate();
  return atlas;
}

}  // namespace mahgcn
