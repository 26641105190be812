#include "kdse/report.hpp"

#include <algorithm>
#include <map>
#include <sstream>
#include <stdexcept>

#include "kdse/checkpoint.hpp"

namespace kdse::inline KDSE_PRECISION {

namespace {

const char* kColumns[] = {"strategy", "seed", "params_M", "val_backbone_loss", "si_snr_db", "delta_vs_student"};

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::stringstream ss(line);
  while (std::getline(ss, cur, sep)) out.push_back(cur);
  return out;
}

double params_millions(const ParamSet& ps) { return static_cast<double>(ps.count()) / 1e6; }

}  // namespace

std::string AblationReport::format_tsv() const {
  std::string out;
  for (const auto& [k, v] : provenance.items()) out += "# " + k + "=" + v + "\n";
  for (std::size_t i = 0; i < std::size(kColumns); ++i) out += std::string(i ? "\t" : "") + kColumns[i];
  out += "\n";
  for (const auto& r : rows) {
    out += r.strategy + "\t" + r.seed + "\t" + io::format_number(r.params_m) + "\t" +
           io::format_number(r.val_backbone_loss) + "\t" + io::format_number(r.si_snr_db) + "\t" +
           io::format_number(r.delta_vs_student) + "\n";
  }
  return out;
}

AblationReport AblationReport::parse_tsv(const std::string& text) {
  AblationReport rep;
  std::stringstream ss(text);
  std::string line;
  bool header = false;
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    if (line.rfind("# ", 0) == 0) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw std::runtime_error("report: bad provenance line '" + line + "'");
      rep.provenance.set(line.substr(2, eq - 2), line.substr(eq + 1));
      continue;
    }
    const auto f = split(line, '\t');
    if (!header) {
      if (f.size() != std::size(kColumns) || !std::equal(f.begin(), f.end(), std::begin(kColumns))) {
        throw std::runtime_error("report: unexpected header row");
      }
      header = true;
      continue;
    }
    if (f.size() != std::size(kColumns)) throw std::runtime_error("report: row has " + std::to_string(f.size()) + " fields");
    rep.rows.push_back({f[0], f[1], std::stod(f[2]), std::stod(f[3]), std::stod(f[4]), std::stod(f[5])});
  }
  if (!header) throw std::runtime_error("report: missing header row");
  return rep;
}

const AblationRow& AblationReport::find(const std::string& strategy, const std::string& seed) const {
  for (const auto& r : rows) {
    if (r.strategy == strategy && r.seed == seed) return r;
  }
  throw std::out_of_range("report has no row for strategy " + strategy + ", seed " + seed);
}

AblationReport ablation_compare(const std::vector<StrategyId>& strategies, const TrainConfig& cfg,
                                const Model& teacher, const MixManifest& train, const MixManifest& val,
                                const std::vector<std::uint64_t>& seeds, const DatasetConfig& data,
                                const std::function<void(const AblationRun&)>& on_run) {
  if (strategies.size() < 2) throw std::invalid_argument("ablation_compare needs at least two strategies");
  if (seeds.empty()) throw std::invalid_argument("ablation_compare needs at least one seed");
  std::vector<StrategyId> order{StrategyId::None};
  for (StrategyId s : strategies) {
    if (std::find(order.begin(), order.end(), s) == order.end()) order.push_back(s);
  }
  AblationReport rep;
  rep.provenance.set("format_version", 1);
  rep.provenance.set("train_manifest_hash", manifest_hash(train));
  rep.provenance.set("val_manifest_hash", manifest_hash(val));
  rep.provenance.set("teacher_params_hash", params_hash(teacher.params()));
  std::string seed_list;
  for (auto s : seeds) seed_list += (seed_list.empty() ? "" : ",") + std::to_string(s);
  rep.provenance.set("seeds", seed_list);
  const io::KvRecord cfg_kv = cfg.to_kv();
  for (const auto& [k, v] : cfg_kv.items()) {
    if (k != "format_version" && k != "seed" && k != "strategy") rep.provenance.set("cfg." + k, v);
  }

  const ValidationMetrics tm = validate(teacher, val, data, cfg.stft, cfg.mrstft);
  std::map<StrategyId, std::vector<AblationRow>> per_strategy;
  std::vector<AblationRow> seed_rows;
  for (std::uint64_t seed : seeds) {
    double student_snr = 0;
    for (StrategyId s : order) {
      TrainConfig c = cfg;
      c.seed = seed;
      c.strategy = s;
      const TrainResult res = train_student(c, teacher, train, val, data);
      if (s == StrategyId::None) student_snr = res.best_metrics.si_snr_mean;
      AblationRow row{strategy_name(s), std::to_string(seed), params_millions(res.model->params()),
                      res.best_metrics.backbone_loss, res.best_metrics.si_snr_mean,
                      res.best_metrics.si_snr_mean - student_snr};
      per_strategy[s].push_back(row);
      seed_rows.push_back(row);
      if (on_run) on_run({s, seed, res});
    }
  }
  rep.rows.push_back({"teacher", "-", params_millions(teacher.params()), tm.backbone_loss, tm.si_snr_mean,
                      0.0});
  rep.rows.insert(rep.rows.end(), seed_rows.begin(), seed_rows.end());
  double student_mean = 0;
  for (StrategyId s : order) {
    const auto& rows = per_strategy[s];
    AblationRow mean{strategy_name(s), "mean", rows.front().params_m, 0, 0, 0};
    for (const auto& r : rows) {
      mean.val_backbone_loss += r.val_backbone_loss;
      mean.si_snr_db += r.si_snr_db;
      mean.delta_vs_student += r.delta_vs_student;
    }
    const double n = static_cast<double>(rows.size());
    mean.val_backbone_loss /= n;
    mean.si_snr_db /= n;
    mean.delta_vs_student /= n;
    if (s == StrategyId::None) student_mean = mean.si_snr_db;
    rep.rows.push_back(mean);
  }
  rep.rows.front().delta_vs_student = tm.si_snr_mean - student_mean;
  return rep;
}

}  // namespace kdse::inline KDSE_PRECISION
