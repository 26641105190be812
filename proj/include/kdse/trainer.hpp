#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "kdse/dataset.hpp"
#include "kdse/distill.hpp"
#include "kdse/io/kv.hpp"

namespace kdse::inline KDSE_PRECISION {

struct TrainConfig {
  double lr = 6e-4;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  /// Global gradient-norm clip; 0 disables it.
  double clip_norm = 0;
  Index batch_size = 8;
  int epochs = 20;
  /// <= 0 trains on whole utterances.
  double chunk_s = 2.5;
  StrategyId strategy = StrategyId::M4;
  std::uint64_t seed = 1;
  LossWeights loss_weights;
  /// "S", "M" or "L".
  std::string student_size = "M";
  Index embed_factor = 4;
  Index teacher_recursive_channels = 128;
  Index student_recursive_channels = 64;
  int channels = 1;
  StftConfig stft;
  MrstftConfig mrstft;

  void validate() const;
  io::KvRecord to_kv() const;
  /// Missing keys keep their defaults; unknown keys are rejected.
  static TrainConfig from_kv(const io::KvRecord& rec);
  bool operator==(const TrainConfig&) const = default;
};

TrainConfig load_train_config(const std::string& path);
void save_train_config(const std::string& path, const TrainConfig& cfg);

/// STFT fields as `stft.*` keys; missing keys keep the defaults.
void stft_to_kv(const StftConfig& cfg, io::KvRecord& rec);
StftConfig stft_from_kv(const io::KvRecord& rec);

class Adam {
 public:
  Adam(std::vector<Var> params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  /// Applies one update from the accumulated gradients; parameters without a
  /// gradient are left alone.
  void step();
  void zero_grad();
  long long steps() const { return t_; }

 private:
  std::vector<Var> params_;
  std::vector<Tensor> m_, v_;
  double lr_, b1_, b2_, eps_;
  long long t_ = 0;
};

/// Global l2 norm of all gradients.
double grad_norm(const std::vector<Var>& params);
/// Rescales gradients so their global norm is at most max_norm.
void clip_grad_norm(const std::vector<Var>& params, double max_norm);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0, train_backbone = 0, train_intra = 0, train_inter = 0;
  double val_backbone_loss = 0, val_si_snr = 0;
  double wall_s = 0;
};

/// Header record plus one record per epoch.
struct RunLog {
  io::KvRecord header;
  std::vector<EpochRecord> epochs;

  /// Epoch indices must increase.
  void append(const EpochRecord& rec);
  std::string format() const;
  static RunLog parse(const std::string& text);
  void write(const std::string& path) const;
  static RunLog read(const std::string& path);
};

struct ValidationMetrics {
  double backbone_loss = 0;
  double si_snr_mean = 0;
  double noisy_si_snr_mean = 0;
  std::vector<double> si_snr_per_item;
};

/// Whole-utterance evaluation, one item at a time.
ValidationMetrics validate(const MaskEstimator& model, MixtureCache& cache, const StftConfig& stft,
                           const MrstftConfig& mrstft);
ValidationMetrics validate(const MaskEstimator& model, const MixManifest& manifest, const DatasetConfig& data,
                           const StftConfig& stft, const MrstftConfig& mrstft);

struct TrainOutputs {
  /// Best-validation checkpoint; empty skips writing.
  std::string checkpoint_path;
  /// Rewritten after every epoch; empty skips writing.
  std::string runlog_path;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  std::unique_ptr<Model> model;  // best validation epoch
  std::unique_ptr<DistillState> distill;
  RunLog log;
  ValidationMetrics best_metrics;
  int best_epoch = 0;
  std::string teacher_hash_before, teacher_hash_after;
};

TrainResult train_teacher(const TrainConfig& cfg, const MixManifest& train, const MixManifest& val,
                          const DatasetConfig& data = {}, const TrainOutputs& outputs = {});

/// The teacher is never written to; its parameter hash is checked before and
/// after training.
TrainResult train_student(const TrainConfig& cfg, const Model& teacher, const MixManifest& train,
                          const MixManifest& val, const DatasetConfig& data = {}, const TrainOutputs& outputs = {});

/// Seeds of the independent random streams of a run.
std::uint64_t teacher_init_seed(std::uint64_t seed);
std::uint64_t student_init_seed(std::uint64_t seed);
std::uint64_t distill_init_seed(std::uint64_t seed);
std::uint64_t epoch_data_seed(std::uint64_t seed, int epoch);

}  // namespace kdse::inline KDSE_PRECISION
