#pragma once

#include "mahgcn/atlas.hpp"
#include "mahgcn/cohort.hpp"
#include "mahgcn/harmonize.hpp"
#include "mahgcn/interpret.hpp"
#include "mahgcn/io.hpp"
#include "mahgcn/model.hpp"
#include "mahgcn/spectrum.hpp"
#include "mahgcn/stats.hpp"
#include "mahgcn/train.hpp"
#include "mahgcn/transfer.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace mahgcn::pipeline {

inline constexpr const char* kVersion = "1.0.0";

using nlohmann::json;

// ---------------------------------------------------------------------------
// Run configuration: one structured file, command-line overrides for the
// common knobs (seed, output directory).
// ---------------------------------------------------------------------------

inline std::string config_hash(const json& j) {
  // FNV-1a over the canonical (sorted-key) dump
  std::string dump = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : dump) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

struct RunConfig {
  json raw;
  std::filesystem::path base_dir;  // input paths resolve against this
  std::filesystem::path out_dir;
  std::uint64_t seed = 0;

  static RunConfig from_json(json j, const std::filesystem::path& base_dir) {
    RunConfig cfg;
    cfg.raw = std::move(j);
    cfg.base_dir = base_dir;
    require(cfg.raw.is_object(), "config", "configuration must be a JSON object");
    bool seed_ok = cfg.raw.contains("seed") &&
                   (cfg.raw["seed"].is_number_unsigned() ||
                    (cfg.raw["seed"].is_number_integer() &&
                     cfg.raw["seed"].get<long long>() >= 0));
    require(seed_ok, "config", "field 'seed' (non-negative integer) is required");
    require(cfg.raw.contains("out") && cfg.raw["out"].is_string(), "config",
            "field 'out' (output directory) is required");
    cfg.seed = cfg.raw["seed"].get<std::uint64_t>();
    cfg.out_dir = base_dir / cfg.raw["out"].get<std::string>();
    return cfg;
  }

  static RunConfig load(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), "missing-file", "cannot open config " + path);
    json j;
    try {
      in >> j;
    } catch (const json::exception& e) {
      fail("config", std::string("cannot parse ") + path + ": " + e.what());
    }
    return from_json(std::move(j), std::filesystem::path(path).parent_path());
  }

  std::string hash() const { return config_hash(raw); }

  const json& section(const std::string& key) const {
    require(raw.contains(key) && raw[key].is_object(), "config",
            "missing config section '" + key + "'");
    return raw[key];
  }
  bool has_section(const std::string& key) const {
    return raw.contains(key) && raw[key].is_object();
  }

  std::filesystem::path input_path(const std::string& key) const {
    require(raw.contains(key) && raw[key].is_string(), "config",
            "missing config field '" + key + "' (path)");
    return base_dir / raw[key].get<std::string>();
  }
};

template <typename T>
inline T field(const json& j, const std::string& key) {
  require(j.contains(key), "config", "missing config field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    fail("config", "config field '" + key + "' has the wrong type");
  }
}

template <typename T>
inline T field_or(const json& j, const std::string& key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    fail("config", "config field '" + key + "' has the wrong type");
  }
}

// ---------------------------------------------------------------------------
// Provenance and artifact bookkeeping
// ---------------------------------------------------------------------------

struct StageWriter {
  const RunConfig& cfg;
  std::string command;
  std::vector<std::string> written;  // relative to out_dir

  StageWriter(const RunConfig& c, std::string cmd) : cfg(c), command(std::move(cmd)) {
    std::filesystem::create_directories(cfg.out_dir);
  }

  std::string header_line() const {
    return "mahgcn " + std::string(kVersion) + " command " + command +
           " config " + cfg.hash() + " seed " + std::to_string(cfg.seed);
  }

  json provenance() const {
    return json{{"version", kVersion},
                {"command", command},
                {"config", cfg.hash()},
                {"seed", cfg.seed}};
  }

  std::filesystem::path track(const std::string& rel) {
    written.push_back(rel);
    auto path = cfg.out_dir / rel;
    std::filesystem::create_directories(path.parent_path());
    return path;
  }

  std::ofstream text_file(const std::string& rel) {
    auto path = track(rel);
    std::ofstream out(path);
    require(out.good(), "io", "cannot write " + path.string());
    out << "# " << header_line() << "\n";
    return out;
  }

  void json_file(const std::string& rel, json body) {
    body["provenance"] = provenance();
    auto path = track(rel);
    std::ofstream out(path);
    require(out.good(), "io", "cannot write " + path.string());
    out << body.dump(2) << "\n";
  }

  void matrix_file(const std::string& rel, const Matrix& m) {
    io::write_matrix(track(rel).string(), m, header_line());
  }

  void checkpoint_file(const std::string& rel, const io::NamedTensors& tensors) {
    io::write_checkpoint(track(rel).string(), tensors);
  }

  /// Machine-readable run manifest, written last.
  void finish() {
    json manifest;
    manifest["command"] = command;
    manifest["outputs"] = written;
    json_file(command + "_manifest.json", std::move(manifest));
  }
};

// ---------------------------------------------------------------------------
// Shared loading helpers
// ---------------------------------------------------------------------------

inline ModelConfig model_config(const RunConfig& cfg, const std::vector<int>& scales) {
  const json& m = cfg.section("model");
  ModelConfig out;
  out.scales = scales;
  out.hidden_dim = field_or<int>(m, "hidden_dim", 64);
  out.fl_widths = field_or<std::vector<int>>(m, "fl_widths", {256, 64, 16, 2});
  out.dropout_rate = field_or<double>(m, "dropout", 0.3);
  out.validate();
  return out;
}

inline TrainConfig train_config(const RunConfig& cfg, const std::string& section) {
  const json& t = cfg.section(section);
  TrainConfig out;
  out.epochs = field_or<int>(t, "epochs", 150);
  out.lr_initial = field_or<double>(t, "lr_initial", 0.01);
  out.lr_later = field_or<double>(t, "lr_later", 0.001);
  out.lr_switch_epoch = field_or<int>(t, "lr_switch_epoch", 50);
  out.weight_decay = field_or<double>(t, "weight_decay", 0.01);
  out.per_site_batch = field_or<int>(t, "per_site_batch", 100);
  out.k_folds = field_or<int>(t, "k_folds", 10);
  out.seed = cfg.seed;
  out.validate();
  return out;
}

inline std::vector<MappingMatrix> atlas_mappings(const MultiscaleAtlasSet& atlas,
                                                 double th = 0.0) {
  std::vector<MappingMatrix> mappings;
  for (int k = 0; k + 1 < atlas.n_scales(); ++k)
    mappings.push_back(compute_mapping(atlas, k + 1, k, th));
  return mappings;
}

/// Severity ground truth written by synth and consumed by embed.
inline std::map<std::string, double> load_severity(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "missing-file", "cannot open covariates " + path);
  std::map<std::string, double> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    auto fields = io::split_fields(line);
    require(fields.size() == 7, "parse", "bad covariates row: " + line);
    out[fields[0]] = std::stod(fields[6]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// synth: atlas + cohort with planted ground truth
// ---------------------------------------------------------------------------

inline void run_synth(const RunConfig& cfg) {
  const json& s = cfg.section("synth");
  auto scales = field<std::vector<int>>(s, "scales");
  int rsn_count = field_or<int>(s, "rsn_count", 7);
  MultiscaleAtlasSet atlas = synth_hierarchy(scales, rsn_count, cfg.seed);

  SyntheticSpec spec;
  spec.scales = scales;
  spec.n_sites = field<int>(s, "sites");
  spec.subjects_per_site = field<int>(s, "subjects_per_site");
  spec.class_ratio_per_site = field_or<double>(s, "class_ratio", 0.5);
  spec.site_shift_magnitude = field_or<double>(s, "site_shift", 0.0);
  spec.site_noise_scale = field_or<double>(s, "site_noise", 0.0);
  spec.planted_rsn = field_or<int>(s, "planted_rsn", 0);
  spec.planted_effect_size = field_or<double>(s, "effect_size", 0.0);
  spec.severity_continuum = field_or<bool>(s, "severity_continuum", false);
  spec.rng_seed = cfg.seed;
  Cohort cohort = generate_synthetic(spec, atlas);

  StageWriter w(cfg, "synth");
  save_atlas(w.track("atlas.txt").string(), atlas);

  auto manifest = w.text_file("cohort.txt");
  manifest << "cohort v1\nkind network\nscales";
  for (int sc : scales) manifest << ' ' << sc;
  manifest << "\n";
  for (const auto& subj : cohort.subjects) {
    manifest << subj.subject_id << ' ' << subj.site_id << ' ' << subj.scanner_id
             << ' ' << diagnosis_name(subj.diagnosis) << ' '
             << io::format_double(subj.age) << ' '
             << (subj.gender == Gender::F ? 'F' : 'M');
    for (std::size_t k = 0; k < scales.size(); ++k) {
      std::string rel = "networks/" + subj.subject_id + "_" +
                        std::to_string(scales[k]) + ".txt";
      w.matrix_file(rel, subj.networks[k].weights);
      manifest << ' ' << rel;
    }
    manifest << "\n";
  }

  auto cov = w.text_file("covariates.txt");
  cov << "# subject_id site_id scanner_id diagnosis age gender severity\n";
  for (const auto& subj : cohort.subjects)
    cov << subj.subject_id << ' ' << subj.site_id << ' ' << subj.scanner_id << ' '
        << diagnosis_name(subj.diagnosis) << ' ' << io::format_double(subj.age)
        << ' ' << (subj.gender == Gender::F ? 'F' : 'M') << ' '
        << io::format_double(subj.severity) << "\n";
  w.finish();
}

// ---------------------------------------------------------------------------
// build-bfn: timeseries manifest -> network files
// ---------------------------------------------------------------------------

inline void run_build_bfn(const RunConfig& cfg) {
  Cohort cohort = load_cohort(cfg.input_path("cohort_file").string());
  require(!cohort.subjects.empty() && !cohort.subjects.front().signals.empty(),
          "config", "build-bfn expects a timeseries cohort");
  build_networks(cohort);

  StageWriter w(cfg, "build-bfn");
  auto manifest = w.text_file("cohort.txt");
  manifest << "cohort v1\nkind network\nscales";
  for (int sc : cohort.scales) manifest << ' ' << sc;
  manifest << "\n";
  for (const auto& subj : cohort.subjects) {
    manifest << subj.subject_id << ' ' << subj.site_id << ' ' << subj.scanner_id
             << ' ' << diagnosis_name(subj.diagnosis) << ' '
             << io::format_double(subj.age) << ' '
             << (subj.gender == Gender::F ? 'F' : 'M');
    for (std::size_t k = 0; k < cohort.scales.size(); ++k) {
      std::string rel = "networks/" + subj.subject_id + "_" +
                        std::to_string(cohort.scales[k]) + ".txt";
      w.matrix_file(rel, subj.networks[k].weights);
      manifest << ' ' << rel;
    }
    manifest << "\n";
  }
  w.finish();
}

// ---------------------------------------------------------------------------
// harmonize: fit + apply ComBat per scale, write audit
// ---------------------------------------------------------------------------

inline void run_harmonize(const RunConfig& cfg) {
  Cohort cohort = load_cohort(cfg.input_path("cohort_file").string());
  require(!cohort.subjects.empty() && !cohort.subjects.front().networks.empty(),
          "config", "harmonize expects a network cohort");
  auto models = harmonize_cohort(cohort);

  StageWriter w(cfg, "harmonize");
  auto manifest = w.text_file("cohort.txt");
  manifest << "cohort v1\nkind network\nscales";
  for (int sc : cohort.scales) manifest << ' ' << sc;
  manifest << "\n";
  for (const auto& subj : cohort.subjects) {
    manifest << subj.subject_id << ' ' << subj.site_id << ' ' << subj.scanner_id
             << ' ' << diagnosis_name(subj.diagnosis) << ' '
             << io::format_double(subj.age) << ' '
             << (subj.gender == Gender::F ? 'F' : 'M');
    for (std::size_t k = 0; k < cohort.scales.size(); ++k) {
      std::string rel = "networks/" + subj.subject_id + "_" +
                        std::to_string(cohort.scales[k]) + ".txt";
      w.matrix_file(rel, subj.networks[k].weights);
      manifest << ' ' << rel;
    }
    manifest << "\n";
  }
  write_combat_audit(w.track("combat_audit.txt").string(), models, cohort.scales);
  w.finish();
}

// ---------------------------------------------------------------------------
// train: cross-validated training, checkpoints, Table-1-shaped report
// ---------------------------------------------------------------------------

namespace detail {

inline double sample_sd(const std::vector<double>& v, double mean) {
  if (v.size() < 2) return 0.0;
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

struct ModelReport {
  std::string name;
  CvResult cv;
  stats::ChanceResult chance;
};

inline json metrics_row(const CvResult& cv, const stats::ChanceResult& chance) {
  auto collect = [&](auto pick) {
    std::vector<double> vals;
    for (const auto& f : cv.folds) {
      auto v = pick(f.site_averaged);
      if (v) vals.push_back(*v);
    }
    json out;
    if (vals.empty()) return out;
    double mean = 0.0;
    for (double x : vals) mean += x;
    mean /= static_cast<double>(vals.size());
    out["mean"] = mean;
    out["sd"] = sample_sd(vals, mean);
    return out;
  };
  json row;
  row["acc"] = collect([](const MetricsRecord& m) { return m.acc; });
  row["sen"] = collect([](const MetricsRecord& m) { return m.sen; });
  row["spe"] = collect([](const MetricsRecord& m) { return m.spe; });
  row["auc"] = collect([](const MetricsRecord& m) { return m.auc; });
  row["p_acc"] = chance.p.at("acc");
  row["p_auc"] = chance.p.at("auc");
  return row;
}

inline std::vector<stats::FoldPredictions> fold_predictions(const CvResult& cv) {
  std::vector<stats::FoldPredictions> out;
  for (const auto& f : cv.folds) {
    stats::FoldPredictions fp;
    fp.scores = f.test_scores;
    fp.labels = f.test_labels;
    out.push_back(std::move(fp));
  }
  return out;
}

}  // namespace detail

inline void run_train(const RunConfig& cfg) {
  MultiscaleAtlasSet atlas = load_atlas(cfg.input_path("atlas_file").string());
  Cohort cohort = load_cohort(cfg.input_path("cohort_file").string());
  require(atlas.n_scales() == static_cast<int>(cohort.scales.size()), "config",
          "atlas and cohort scale counts differ");

  const json& t = cfg.section("train");
  TrainConfig tc = train_config(cfg, "train");
  int permutations = field_or<int>(t, "permutations", 100);
  bool baselines = field_or<bool>(t, "baselines", false);
  ModelConfig mc = model_config(cfg, cohort.scales);
  auto mappings = atlas_mappings(atlas);

  std::vector<detail::ModelReport> reports;
  {
    detail::ModelReport rep;
    rep.name = "mahgcn";
    rep.cv = cross_validate(cohort, tc, [&](std::uint64_t seed) {
      return init_model(mc, mappings, seed);
    });
    rep.chance = stats::permutation_chance(detail::fold_predictions(rep.cv),
                                           permutations, cfg.seed);
    reports.push_back(std::move(rep));
  }
  if (baselines) {
    for (int scale : cohort.scales) {
      detail::ModelReport rep;
      rep.name = "gcn" + std::to_string(scale);
      rep.cv = cross_validate(cohort, tc, [&](std::uint64_t seed) {
        return init_single_scale_model(scale, mc.hidden_dim, mc.fl_widths,
                                       mc.dropout_rate, seed);
      });
      rep.chance = stats::permutation_chance(detail::fold_predictions(rep.cv),
                                             permutations, cfg.seed);
      reports.push_back(std::move(rep));
    }
  }

  StageWriter w(cfg, "train");
  for (auto& rep : reports)
    for (auto& fold : rep.cv.folds)
      w.checkpoint_file("checkpoints/" + rep.name + "_fold" +
                            std::to_string(fold.fold) + ".ckpt",
                        fold.checkpoint);

  auto preds = w.text_file("predictions.txt");
  preds << "# model fold subject_id site label score\n";
  for (const auto& rep : reports)
    for (const auto& fold : rep.cv.folds)
      for (std::size_t i = 0; i < fold.test_indices.size(); ++i)
        preds << rep.name << ' ' << fold.fold << ' '
              << cohort.subjects[fold.test_indices[i]].subject_id << ' '
              << fold.test_sites[i] << ' ' << fold.test_labels[i] << ' '
              << io::format_double(fold.test_scores[i]) << "\n";

  auto txt = w.text_file("train_report.txt");
  txt << "# model acc_mean acc_sd sen_mean sen_sd spe_mean spe_sd auc_mean"
         " auc_sd p_acc p_auc\n";
  json jreport;
  for (const auto& rep : reports) {
    json row = detail::metrics_row(rep.cv, rep.chance);
    jreport["models"][rep.name] = row;
    txt << rep.name;
    for (const char* m : {"acc", "sen", "spe", "auc"}) {
      if (row[m].contains("mean"))
        txt << ' ' << io::format_double(row[m]["mean"].get<double>()) << ' '
            << io::format_double(row[m]["sd"].get<double>());
      else
        txt << " nan nan";
    }
    txt << ' ' << io::format_double(row["p_acc"].get<double>()) << ' '
        << io::format_double(row["p_auc"].get<double>()) << "\n";
  }
  w.json_file("train_report.json", std::move(jreport));
  w.finish();
}

// ---------------------------------------------------------------------------
// transfer: pretrain on source sites, K-shot fine-tuning at each level
// ---------------------------------------------------------------------------

inline void run_transfer(const RunConfig& cfg) {
  MultiscaleAtlasSet atlas = load_atlas(cfg.input_path("atlas_file").string());
  Cohort cohort = load_cohort(cfg.input_path("cohort_file").string());

  const json& t = cfg.section("transfer");
  auto target_names = field<std::vector<std::string>>(t, "target_sites");
  std::set<std::string> target_set(target_names.begin(), target_names.end());
  auto shots = field<std::vector<int>>(t, "shots");
  auto levels = field_or<std::vector<int>>(t, "levels", {1, 2, 3, 4});
  int repetitions = field_or<int>(t, "repetitions", 10);
  int pool_size = field_or<int>(t, "pool_size", 100);

  Cohort source = transfer::exclude_sites(cohort, target_set);
  Cohort target = transfer::only_sites(cohort, target_set);
  require(!source.subjects.empty() && !target.subjects.empty(), "config",
          "transfer needs nonempty source and target groups");

  ModelConfig mc = model_config(cfg, cohort.scales);
  auto mappings = atlas_mappings(atlas);
  TrainConfig pre_tc = train_config(cfg, "train");
  TrainConfig ft_tc = train_config(cfg, "transfer");

  Model pretrained = init_model(mc, mappings, cfg.seed);
  Rng pre_rng = Rng::stream(cfg.seed, 0x9e7);
  transfer::pretrain(pretrained, source, pre_tc, pre_rng);

  struct Cell {
    std::vector<double> acc, sen, spe, auc;
  };
  std::map<std::string, std::map<int, Cell>> table;  // scheme -> shots -> reps

  auto eval_into = [&](Cell& cell, Model& model,
                       const std::vector<std::size_t>& test_idx) {
    auto scores = predict(model, target, test_idx);
    std::vector<int> labels;
    for (std::size_t i : test_idx)
      labels.push_back(target.subjects[i].binary_label());
    auto m = compute_metrics(scores, labels);
    if (m.acc) cell.acc.push_back(*m.acc);
    if (m.sen) cell.sen.push_back(*m.sen);
    if (m.spe) cell.spe.push_back(*m.spe);
    if (m.auc) cell.auc.push_back(*m.auc);
  };

  for (int k : shots) {
    for (int rep = 0; rep < repetitions; ++rep) {
      auto split = transfer::kshot_protocol(target.size(), k, cfg.seed, rep,
                                            pool_size);
      {
        Model scratch = init_model(mc, mappings, cfg.seed + 7919);
        Rng rng = Rng::stream(cfg.seed, 0xba5e + static_cast<std::uint64_t>(rep));
        train_model(scratch, target, split.train, ft_tc, rng);
        eval_into(table["baseline"][k], scratch, split.test);
      }
      for (int level : levels) {
        Model tuned = pretrained.clone();
        Rng rng = Rng::stream(cfg.seed, 0xf17e + static_cast<std::uint64_t>(
                                                    100 * rep + level));
        transfer::finetune(tuned, static_cast<transfer::FinetuneLevel>(level),
                           target, split.train, ft_tc, rng);
        eval_into(table["L" + std::to_string(level)][k], tuned, split.test);
      }
    }
  }

  StageWriter w(cfg, "transfer");
  auto txt = w.text_file("transfer_report.txt");
  txt << "# scheme shots acc_mean acc_sd sen_mean sen_sd spe_mean spe_sd"
         " auc_mean auc_sd p_auc_vs_baseline\n";
  json jreport;
  for (const auto& [scheme, by_shots] : table) {
    for (const auto& [k, cell] : by_shots) {
      auto put = [&](const std::vector<double>& v, const char* name, json& row,
                     std::string& line) {
        double mean = 0.0;
        for (double x : v) mean += x;
        mean = v.empty() ? std::nan("") : mean / static_cast<double>(v.size());
        double sd = detail::sample_sd(v, mean);
        row[name] = {{"mean", mean}, {"sd", sd}};
        line += ' ' + io::format_double(mean) + ' ' + io::format_double(sd);
      };
      json row;
      std::string line = scheme + ' ' + std::to_string(k);
      put(cell.acc, "acc", row, line);
      put(cell.sen, "sen", row, line);
      put(cell.spe, "spe", row, line);
      put(cell.auc, "auc", row, line);
      double p = std::nan("");
      if (scheme != "baseline") {
        const auto& base = table["baseline"][k].auc;
        if (base.size() == cell.auc.size() && base.size() >= 5) {
          bool all_equal = true;
          for (std::size_t i = 0; i < base.size(); ++i)
            if (base[i] != cell.auc[i]) all_equal = false;
          p = all_equal ? 1.0
                        : stats::wilcoxon_signed_rank(cell.auc, base,
                                                      stats::Side::TwoSided);
        }
      }
      row["p_auc_vs_baseline"] = p;
      line += ' ' + io::format_double(p);
      jreport["schemes"][scheme][std::to_string(k)] = row;
      txt << line << "\n";
    }
  }
  w.json_file("transfer_report.json", std::move(jreport));
  w.finish();
}

// ---------------------------------------------------------------------------
// explain: consensus Grad-CAM over trained fold models
// ---------------------------------------------------------------------------

namespace detail {

struct PredRow {
  std::string model;
  int fold = 0;
  std::string subject_id, site;
  int label = 0;
  double score = 0.0;
};

inline std::vector<PredRow> load_predictions(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "missing-file", "cannot open predictions " + path);
  std::vector<PredRow> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    auto f = io::split_fields(line);
    require(f.size() == 6, "parse", "bad predictions row: " + line);
    PredRow r;
    r.model = f[0];
    r.fold = std::stoi(f[1]);
    r.subject_id = f[2];
    r.site = f[3];
    r.label = std::stoi(f[4]);
    r.score = std::stod(f[5]);
    rows.push_back(std::move(r));
  }
  return rows;
}

inline Model load_fold_model(const RunConfig& cfg, const ModelConfig& mc,
                             const std::vector<MappingMatrix>& mappings,
                             int fold) {
  Model model = init_model(mc, mappings, 0);
  auto path = cfg.input_path("train_dir") /
              ("checkpoints/mahgcn_fold" + std::to_string(fold) + ".ckpt");
  model.from_tensors(io::read_checkpoint(path.string()));
  return model;
}

}  // namespace detail

inline void run_explain(const RunConfig& cfg) {
  MultiscaleAtlasSet atlas = load_atlas(cfg.input_path("atlas_file").string());
  Cohort cohort = load_cohort(cfg.input_path("cohort_file").string());
  const json& e = cfg.section("explain");
  int target_class = field_or<int>(e, "target_class", 1);
  auto groups = field_or<std::vector<std::string>>(e, "groups", {});

  ModelConfig mc = model_config(cfg, cohort.scales);
  auto mappings = atlas_mappings(atlas);
  auto preds = detail::load_predictions(
      (cfg.input_path("train_dir") / "predictions.txt").string());

  std::map<std::string, std::size_t> index_of;
  for (std::size_t i = 0; i < cohort.size(); ++i)
    index_of[cohort.subjects[i].subject_id] = i;

  std::map<int, std::vector<detail::PredRow>> by_fold;
  for (const auto& r : preds)
    if (r.model == "mahgcn") by_fold[r.fold].push_back(r);
  require(!by_fold.empty(), "explain", "no mahgcn predictions found");

  std::vector<interpret::FoldCams> folds;
  for (const auto& [fold, rows] : by_fold) {
    Model model = detail::load_fold_model(cfg, mc, mappings, fold);
    interpret::FoldCams fc;
    std::vector<double> scores;
    std::vector<int> labels;
    for (const auto& r : rows) {
      scores.push_back(r.score);
      labels.push_back(r.label);
    }
    auto auc = auc_score(scores, labels);
    fc.auc = auc ? *auc : 0.0;
    for (const auto& r : rows) {
      // attribution evidence: correctly predicted BD test subjects
      if (r.label != 1 || r.score < 0.5) continue;
      auto it = index_of.find(r.subject_id);
      require(it != index_of.end(), "explain",
              "predictions reference unknown subject " + r.subject_id);
      fc.by_group[r.site].push_back(interpret::gradcam_subject(
          model, cohort.subjects[it->second], target_class));
    }
    if (!fc.by_group.empty()) folds.push_back(std::move(fc));
  }
  require(!folds.empty(), "explain", "no correctly predicted BD subjects");

  interpret::CamMap consensus = interpret::consensus_map(folds, groups);
  Matrix by_rsn = interpret::rsn_aggregate(consensus, atlas);

  StageWriter w(cfg, "explain");
  for (int s = 0; s < atlas.n_scales(); ++s)
    w.matrix_file("cam_scale_" + std::to_string(cohort.scales[static_cast<std::size_t>(s)]) +
                      ".txt",
                  consensus.scale_scores[static_cast<std::size_t>(s)]);
  w.matrix_file("cam_rsn.txt", by_rsn);

  json jreport;
  for (int s = 0; s < atlas.n_scales(); ++s) {
    json row;
    for (std::size_t r = 0; r < kRsnNames.size(); ++r) {
      double v = by_rsn(s, static_cast<Index>(r));
      if (!std::isnan(v)) row[kRsnNames[r]] = v;
    }
    jreport["rsn_scores"][std::to_string(cohort.scales[static_cast<std::size_t>(s)])] =
        row;
  }
  w.json_file("explain_report.json", std::move(jreport));
  w.finish();
}

// ---------------------------------------------------------------------------
// embed: consensus relation matrix -> diffusion-map gradients + statistics
// ---------------------------------------------------------------------------

inline void run_embed(const RunConfig& cfg) {
  MultiscaleAtlasSet atlas = load_atlas(cfg.input_path("atlas_file").string());
  Cohort cohort = load_cohort(cfg.input_path("cohort_file").string());
  const json& sp = cfg.section("spectrum");
  double alpha = field_or<double>(sp, "alpha", 0.5);
  double sparsity = field_or<double>(sp, "sparsity", 0.9);
  int n_components = field_or<int>(sp, "n_components", 2);

  ModelConfig mc = model_config(cfg, cohort.scales);
  auto mappings = atlas_mappings(atlas);
  auto preds = detail::load_predictions(
      (cfg.input_path("train_dir") / "predictions.txt").string());
  std::map<int, std::vector<detail::PredRow>> by_fold;
  for (const auto& r : preds)
    if (r.model == "mahgcn") by_fold[r.fold].push_back(r);
  require(!by_fold.empty(), "embed", "no mahgcn predictions found");

  std::vector<std::size_t> all(cohort.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;

  std::vector<Matrix> relations;
  std::vector<double> aucs;
  for (const auto& [fold, rows] : by_fold) {
    Model model = detail::load_fold_model(cfg, mc, mappings, fold);
    Matrix features = spectrum::deep_features(model, cohort, all);
    relations.push_back(spectrum::relation_matrix(features));
    std::vector<double> scores;
    std::vector<int> labels;
    for (const auto& r : rows) {
      scores.push_back(r.score);
      labels.push_back(r.label);
    }
    auto auc = auc_score(scores, labels);
    aucs.push_back(auc ? *auc : 0.0);
  }
  Matrix rel = spectrum::consensus_relation(relations, aucs);
  spectrum::Embedding emb = spectrum::diffusion_embed(rel, n_components, alpha,
                                                      sparsity);

  StageWriter w(cfg, "embed");
  auto coords = w.text_file("embedding.txt");
  coords << "# subject_id diagnosis embedded";
  for (int c = 0; c < n_components; ++c) coords << " g" << c + 1;
  coords << "\n";
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    coords << cohort.subjects[i].subject_id << ' '
           << diagnosis_name(cohort.subjects[i].diagnosis) << ' '
           << (emb.embedded[i] ? 1 : 0);
    for (int c = 0; c < n_components; ++c)
      coords << ' ' << io::format_double(emb.coordinates(static_cast<Index>(i), c));
    coords << "\n";
  }
  {
    auto lam = w.text_file("lambdas.txt");
    for (double l : emb.lambdas) lam << io::format_double(l) << "\n";
  }

  // group statistics on gradient 1: HC vs BD rank test, severity correlation
  json jstats;
  std::vector<double> g1_hc, g1_bd;
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    if (!emb.embedded[i]) continue;
    double g1 = emb.coordinates(static_cast<Index>(i), 0);
    (cohort.subjects[i].binary_label() == 0 ? g1_hc : g1_bd).push_back(g1);
  }
  if (!g1_hc.empty() && !g1_bd.empty()) {
    jstats["hc_vs_bd"] = {
        {"p", stats::mann_whitney_u(g1_hc, g1_bd, stats::Side::TwoSided)},
        {"n_hc", g1_hc.size()},
        {"n_bd", g1_bd.size()}};
  }
  if (cfg.raw.contains("covariates_file")) {
    auto severity = load_severity(cfg.input_path("covariates_file").string());
    std::vector<double> g1_all, sev_all, g1_bd_only, sev_bd_only;
    for (std::size_t i = 0; i < cohort.size(); ++i) {
      if (!emb.embedded[i]) continue;
      auto it = severity.find(cohort.subjects[i].subject_id);
      if (it == severity.end()) continue;
      double g1 = emb.coordinates(static_cast<Index>(i), 0);
      g1_all.push_back(g1);
      sev_all.push_back(it->second);
      if (cohort.subjects[i].binary_label() == 1) {
        g1_bd_only.push_back(g1);
        sev_bd_only.push_back(it->second);
      }
    }
    if (g1_all.size() >= 3)
      jstats["severity"]["all"]["spearman"] =
          spectrum::spearman_rho(g1_all, sev_all);
    if (g1_bd_only.size() >= 3)
      jstats["severity"]["bd"]["spearman"] =
          spectrum::spearman_rho(g1_bd_only, sev_bd_only);
  }
  w.json_file("embed_stats.json", std::move(jstats));
  w.finish();
}

// ---------------------------------------------------------------------------
// report: consolidate stage outputs into one structured summary
// ---------------------------------------------------------------------------

inline void run_report(const RunConfig& cfg) {
  json summary;
  for (const char* name : {"train_report.json", "transfer_report.json",
                           "explain_report.json", "embed_stats.json"}) {
    auto path = cfg.out_dir / name;
    if (!std::filesystem::exists(path)) continue;
    std::ifstream in(path);
    json j;
    in >> j;
    j.erase("provenance");
    std::string key = std::filesystem::path(name).stem().string();
    summary[key] = std::move(j);
  }
  require(!summary.empty(), "report", "no stage reports found in " +
                                          cfg.out_dir.string());
  StageWriter w(cfg, "report");
  w.json_file("report.json", std::move(summary));
  w.finish();
}

inline void run_command(const std::string& command, const RunConfig& cfg) {
  if (command == "synth")
    run_synth(cfg);
  else if (command == "build-bfn")
    run_build_bfn(cfg);
  else if (command == "harmonize")
    run_harmonize(cfg);
  else if (command == "train")
    run_train(cfg);
  else if (command == "transfer")
    run_transfer(cfg);
  else if (command == "explain")
    run_explain(cfg);
  else if (command == "embed")
    run_embed(cfg);
  else if (command == "report")
    run_report(cfg);
  else
    fail("config", "unknown command " + command);
}

}  // namespace mahgcn::pipeline
