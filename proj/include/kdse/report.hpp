#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "kdse/trainer.hpp"

namespace kdse::inline KDSE_PRECISION {

struct AblationRow {
  std::string strategy;  // "teacher", "none", "base_mse", "m1" .. "m4"
  /// Decimal seed, or "mean" for the per-strategy average.
  std::string seed;
  double params_m = 0;
  double val_backbone_loss = 0;
  double si_snr_db = 0;
  /// SI-SNR gain over the undistilled student of the same seed.
  double delta_vs_student = 0;
};

struct AblationReport {
  io::KvRecord provenance;
  std::vector<AblationRow> rows;

  /// Tab-separated table with a header row, preceded by `#` provenance lines.
  std::string format_tsv() const;
  static AblationReport parse_tsv(const std::string& text);
  const AblationRow& find(const std::string& strategy, const std::string& seed) const;
};

struct AblationRun {
  StrategyId strategy;
  std::uint64_t seed;
  const TrainResult& result;
};

/// Trains every strategy (plus the undistilled student) for every seed under
/// one config and tabulates validation metrics.
AblationReport ablation_compare(const std::vector<StrategyId>& strategies, const TrainConfig& cfg,
                                const Model& teacher, const MixManifest& train, const MixManifest& val,
                                const std::vector<std::uint64_t>& seeds, const DatasetConfig& data = {},
                                const std::function<void(const AblationRun&)>& on_run = {});

}  // namespace kdse::inline KDSE_PRECISION
