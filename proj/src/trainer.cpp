#include "kdse/trainer.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "kdse/checkpoint.hpp"

namespace kdse::inline KDSE_PRECISION {

namespace {

std::string resolutions_text(const MrstftConfig& m) {
  std::string out;
  for (const auto& r : m.resolutions) {
    if (!out.empty()) out += ',';
    out += std::to_string(r.fft_size) + '/' + std::to_string(r.hop) + '/' + std::to_string(r.win_len);
  }
  return out;
}

std::vector<MrstftResolution> parse_resolutions(const std::string& text) {
  std::vector<MrstftResolution> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    MrstftResolution r{};
    char s1 = 0, s2 = 0;
    std::stringstream is(item);
    if (!(is >> r.fft_size >> s1 >> r.hop >> s2 >> r.win_len) || s1 != '/' || s2 != '/') {
      throw std::invalid_argument("bad MRSTFT resolution '" + item + "' (expected fft/hop/win)");
    }
    out.push_back(r);
  }
  return out;
}

struct Snapshot {
  std::vector<Tensor> values;

  static Snapshot of(const ParamSet& ps) {
    Snapshot s;
    for (const auto& p : ps.items()) s.values.push_back(p.var.value().clone());
    return s;
  }
  void restore(ParamSet& ps) const {
    for (std::size_t i = 0; i < values.size(); ++i) {
      Tensor& dst = ps.items()[i].var.mutable_value();
      std::copy(values[i].values().begin(), values[i].values().end(), dst.values().begin());
    }
  }
};

std::vector<Var> vars_of(const ParamSet& ps) {
  std::vector<Var> out;
  for (const auto& p : ps.items()) out.push_back(p.var);
  return out;
}

Index training_samples(const TrainConfig& cfg, const MixManifest& train) {
  if (cfg.chunk_s > 0) return samples_for(cfg.chunk_s);
  return samples_for(train.entries.front().duration_s);
}

BackboneConfig student_config(const TrainConfig& cfg) {
  BackboneConfig c = BackboneConfig::student_variant(cfg.student_size);
  c.in_channels = 2 * cfg.channels;
  return c;
}

BackboneConfig teacher_config(const TrainConfig& cfg) {
  BackboneConfig c = BackboneConfig::teacher();
  c.in_channels = 2 * cfg.channels;
  return c;
}

void check_inputs(const TrainConfig& cfg, const MixManifest& train, const MixManifest& val,
                  const DatasetConfig& data) {
  cfg.validate();
  train.validate();
  val.validate();
  require_sources(train, data);
  require_sources(val, data);
  if (batches_per_epoch(train, cfg.batch_size) < 1) {
    throw std::invalid_argument("training manifest has " + std::to_string(train.size()) +
                                " entries, fewer than the batch size " + std::to_string(cfg.batch_size));
  }
}

io::KvRecord log_header(const TrainConfig& cfg, const std::string& kind, const MixManifest& train,
                        const MixManifest& val, Index params) {
  io::KvRecord h;
  h.set("format_version", 1);
  h.set("kind", kind);
  h.set("train_manifest_hash", manifest_hash(train));
  h.set("val_manifest_hash", manifest_hash(val));
  h.set("params", static_cast<long long>(params));
  const io::KvRecord cfg_kv = cfg.to_kv();
  for (const auto& [k, v] : cfg_kv.items()) {
    if (k != "format_version") h.set("cfg." + k, v);
  }
  return h;
}

/// Shared epoch loop. step() returns (total, backbone, intra, inter) after
/// running backward on the total.
struct LoopResult {
  RunLog log;
  ValidationMetrics best;
  int best_epoch = 0;
  Snapshot model_snapshot, distill_snapshot;
};

template <typename StepFn>
LoopResult run_epochs(const TrainConfig& cfg, Model& model, DistillState* distill, const MixManifest& train,
                      const MixManifest& val, const DatasetConfig& data, const TrainOutputs& outputs,
                      io::KvRecord header, StepFn&& step_fn) {
  MixtureCache train_cache(train, data), val_cache(val, data);
  std::vector<Var> params = vars_of(model.params());
  if (distill) {
    const auto extra = vars_of(distill->params());
    params.insert(params.end(), extra.begin(), extra.end());
  }
  Adam adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
  LoopResult out;
  out.log.header = std::move(header);
  double best_loss = std::numeric_limits<double>::infinity();
  const Index nb = batches_per_epoch(train, cfg.batch_size);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::uint64_t es = epoch_data_seed(cfg.seed, epoch);
    EpochRecord rec;
    rec.epoch = epoch;
    for (Index i = 0; i < nb; ++i) {
      const Batch batch = load_batch(train_cache, cfg.batch_size, cfg.chunk_s, es, i);
      const std::array<double, 4> l = step_fn(batch);
      if (!std::isfinite(l[0])) {
        throw std::runtime_error("non-finite training loss at epoch " + std::to_string(epoch) + ", step " +
                                 std::to_string(i + 1));
      }
      if (cfg.clip_norm > 0) clip_grad_norm(params, cfg.clip_norm);
      adam.step();
      adam.zero_grad();
      rec.train_loss += l[0];
      rec.train_backbone += l[1];
      rec.train_intra += l[2];
      rec.train_inter += l[3];
    }
    const double inv = 1.0 / static_cast<double>(nb);
    rec.train_loss *= inv;
    rec.train_backbone *= inv;
    rec.train_intra *= inv;
    rec.train_inter *= inv;
    const ValidationMetrics vm = validate(model, val_cache, cfg.stft, cfg.mrstft);
    rec.val_backbone_loss = vm.backbone_loss;
    rec.val_si_snr = vm.si_snr_mean;
    rec.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (vm.backbone_loss < best_loss) {
      best_loss = vm.backbone_loss;
      out.best = vm;
      out.best_epoch = epoch;
      out.model_snapshot = Snapshot::of(model.params());
      if (distill) out.distill_snapshot = Snapshot::of(distill->params());
      if (!outputs.checkpoint_path.empty()) {
        io::KvRecord extra;
        extra.set("epoch", epoch);
        extra.set("val_backbone_loss", vm.backbone_loss);
        extra.set("val_si_snr", vm.si_snr_mean);
        extra.set("seed", static_cast<long long>(cfg.seed));
        extra.set("strategy", strategy_name(cfg.strategy));
        stft_to_kv(cfg.stft, extra);
        save_model(outputs.checkpoint_path, model, distill ? &distill->params() : nullptr, extra);
      }
    }
    out.log.append(rec);
    if (!outputs.runlog_path.empty()) out.log.write(outputs.runlog_path);
    if (outputs.on_epoch) outputs.on_epoch(rec);
  }
  return out;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr > 0) || !std::isfinite(lr)) throw std::invalid_argument("lr must be positive");
  if (epochs < 1) throw std::invalid_argument("epochs must be at least 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be positive");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw std::invalid_argument("Adam betas must be in [0, 1)");
  if (!(adam_eps > 0)) throw std::invalid_argument("adam_eps must be positive");
  if (clip_norm < 0) throw std::invalid_argument("clip_norm must be non-negative");
  if (channels < 1) throw std::invalid_argument("channels must be positive");
  if (loss_weights.backbone < 0 || loss_weights.intra < 0 || loss_weights.inter < 0) {
    throw std::invalid_argument("loss weights must be non-negative");
  }
  BackboneConfig::student_variant(student_size);
  stft.validate();
  stft.check_reconstructible();
  mrstft.validate();
}

io::KvRecord TrainConfig::to_kv() const {
  io::KvRecord r;
  r.set("format_version", 1);
  r.set("lr", lr);
  r.set("beta1", beta1);
  r.set("beta2", beta2);
  r.set("adam_eps", adam_eps);
  r.set("clip_norm", clip_norm);
  r.set("batch_size", static_cast<long long>(batch_size));
  r.set("epochs", epochs);
  r.set("chunk_s", chunk_s);
  r.set("strategy", strategy_name(strategy));
  r.set("seed", std::to_string(seed));
  r.set("w_backbone", static_cast<double>(loss_weights.backbone));
  r.set("w_intra", static_cast<double>(loss_weights.intra));
  r.set("w_inter", static_cast<double>(loss_weights.inter));
  r.set("student_size", student_size);
  r.set("embed_factor", static_cast<long long>(embed_factor));
  r.set("teacher_recursive_channels", static_cast<long long>(teacher_recursive_channels));
  r.set("student_recursive_channels", static_cast<long long>(student_recursive_channels));
  r.set("channels", channels);
  r.set("sample_rate_hz", stft.sample_rate_hz);
  r.set("win_len", static_cast<long long>(stft.win_len_samples));
  r.set("hop", static_cast<long long>(stft.hop_samples));
  r.set("fft_size", static_cast<long long>(stft.fft_size));
  r.set("window", window_name(stft.window));
  r.set("mrstft_resolutions", resolutions_text(mrstft));
  r.set("mrstft_sc_weight", static_cast<double>(mrstft.sc_weight));
  r.set("mrstft_mag_weight", static_cast<double>(mrstft.mag_weight));
  return r;
}

TrainConfig TrainConfig::from_kv(const io::KvRecord& rec) {
  TrainConfig c;
  for (const auto& [k, v] : rec.items()) {
    if (k == "format_version") {
      if (rec.integer(k) != 1) throw std::invalid_argument("unsupported config format_version " + v);
    } else if (k == "lr") c.lr = rec.number(k);
    else if (k == "beta1") c.beta1 = rec.number(k);
    else if (k == "beta2") c.beta2 = rec.number(k);
    else if (k == "adam_eps") c.adam_eps = rec.number(k);
    else if (k == "clip_norm") c.clip_norm = rec.number(k);
    else if (k == "batch_size") c.batch_size = rec.integer(k);
    else if (k == "epochs") c.epochs = static_cast<int>(rec.integer(k));
    else if (k == "chunk_s") c.chunk_s = rec.number(k);
    else if (k == "strategy") c.strategy = parse_strategy(v);
    else if (k == "seed") c.seed = std::stoull(v);
    else if (k == "w_backbone") c.loss_weights.backbone = static_cast<Real>(rec.number(k));
    else if (k == "w_intra") c.loss_weights.intra = static_cast<Real>(rec.number(k));
    else if (k == "w_inter") c.loss_weights.inter = static_cast<Real>(rec.number(k));
    else if (k == "student_size") c.student_size = v;
    else if (k == "embed_factor") c.embed_factor = rec.integer(k);
    else if (k == "teacher_recursive_channels") c.teacher_recursive_channels = rec.integer(k);
    else if (k == "student_recursive_channels") c.student_recursive_channels = rec.integer(k);
    else if (k == "channels") c.channels = static_cast<int>(rec.integer(k));
    else if (k == "sample_rate_hz") c.stft.sample_rate_hz = static_cast<int>(rec.integer(k));
    else if (k == "win_len") c.stft.win_len_samples = rec.integer(k);
    else if (k == "hop") c.stft.hop_samples = rec.integer(k);
    else if (k == "fft_size") c.stft.fft_size = rec.integer(k);
    else if (k == "window") c.stft.window = parse_window(v);
    else if (k == "mrstft_resolutions") c.mrstft.resolutions = parse_resolutions(v);
    else if (k == "mrstft_sc_weight") c.mrstft.sc_weight = static_cast<Real>(rec.number(k));
    else if (k == "mrstft_mag_weight") c.mrstft.mag_weight = static_cast<Real>(rec.number(k));
    else throw std::invalid_argument("unknown config key '" + k + "'");
  }
  c.validate();
  return c;
}

void stft_to_kv(const StftConfig& cfg, io::KvRecord& rec) {
  rec.set("stft.sample_rate_hz", cfg.sample_rate_hz);
  rec.set("stft.win_len", static_cast<long long>(cfg.win_len_samples));
  rec.set("stft.hop", static_cast<long long>(cfg.hop_samples));
  rec.set("stft.fft_size", static_cast<long long>(cfg.fft_size));
  rec.set("stft.window", window_name(cfg.window));
}

StftConfig stft_from_kv(const io::KvRecord& rec) {
  StftConfig c;
  if (rec.has("stft.sample_rate_hz")) c.sample_rate_hz = static_cast<int>(rec.integer("stft.sample_rate_hz"));
  if (rec.has("stft.win_len")) c.win_len_samples = rec.integer("stft.win_len");
  if (rec.has("stft.hop")) c.hop_samples = rec.integer("stft.hop");
  if (rec.has("stft.fft_size")) c.fft_size = rec.integer("stft.fft_size");
  if (rec.has("stft.window")) c.window = parse_window(rec.at("stft.window"));
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::string& path) {
  return TrainConfig::from_kv(io::parse_kv_lines(io::read_text_file(path)));
}

void save_train_config(const std::string& path, const TrainConfig& cfg) {
  io::write_text_file(path, io::format_kv_lines(cfg.to_kv()));
}

Adam::Adam(std::vector<Var> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
  for (const Var& p : params_) {
    m_.emplace_back(p.shape());
    v_.emplace_back(p.shape());
  }
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  const double step = lr_ / c1, root_c2 = std::sqrt(c2);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Var& p = params_[i];
    if (!p.has_grad()) continue;
    const Real* g = p.grad().data();
    Real* w = p.mutable_value().data();
    Real* m = m_[i].data();
    Real* v = v_[i].data();
    const Index n = p.numel();
    for (Index j = 0; j < n; ++j) {
      const double gj = g[j];
      const double mj = b1_ * m[j] + (1.0 - b1_) * gj;
      const double vj = b2_ * v[j] + (1.0 - b2_) * gj * gj;
      m[j] = static_cast<Real>(mj);
      v[j] = static_cast<Real>(vj);
      w[j] = static_cast<Real>(w[j] - step * mj / (std::sqrt(vj) / root_c2 + eps_));
    }
  }
}

void Adam::zero_grad() {
  for (Var& p : params_) p.zero_grad();
}

double grad_norm(const std::vector<Var>& params) {
  double ss = 0;
  for (const Var& p : params) {
    if (!p.has_grad()) continue;
    for (Real g : p.grad().values()) ss += static_cast<double>(g) * g;
  }
  return std::sqrt(ss);
}

void clip_grad_norm(const std::vector<Var>& params, double max_norm) {
  const double norm = grad_norm(params);
  if (!(norm > max_norm) || norm == 0) return;
  const Real s = static_cast<Real>(max_norm / norm);
  for (const Var& p : params) {
    if (!p.has_grad()) continue;
    Real* g = p.node()->grad.data();
    for (Index j = 0; j < p.numel(); ++j) g[j] *= s;
  }
}

void RunLog::append(const EpochRecord& rec) {
  if (!epochs.empty() && rec.epoch <= epochs.back().epoch) {
    throw std::invalid_argument("run log epochs must increase (got " + std::to_string(rec.epoch) + " after " +
                                std::to_string(epochs.back().epoch) + ")");
  }
  epochs.push_back(rec);
}

std::string RunLog::format() const {
  io::KvRecord h = header;
  if (!h.has("format_version")) h.set("format_version", 1);
  std::string out = "record=header\t" + io::format_kv_tsv(h) + "\n";
  for (const auto& e : epochs) {
    io::KvRecord r;
    r.set("record", "epoch");
    r.set("epoch", e.epoch);
    r.set("train_loss", e.train_loss);
    r.set("train_backbone", e.train_backbone);
    r.set("train_intra", e.train_intra);
    r.set("train_inter", e.train_inter);
    r.set("val_backbone_loss", e.val_backbone_loss);
    r.set("val_si_snr", e.val_si_snr);
    r.set("wall_s", e.wall_s);
    out += io::format_kv_tsv(r) + "\n";
  }
  return out;
}

RunLog RunLog::parse(const std::string& text) {
  RunLog log;
  std::stringstream ss(text);
  std::string line;
  bool have_header = false;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    if (line.empty()) continue;
    const io::KvRecord r = io::parse_kv_tsv(line);
    const std::string kind = r.has("record") ? r.at("record") : "";
    if (kind == "header") {
      for (const auto& [k, v] : r.items()) {
        if (k != "record") log.header.set(k, v);
      }
      if (log.header.integer("format_version") != 1) {
        throw std::runtime_error("unsupported run log format_version " + log.header.at("format_version"));
      }
      have_header = true;
    } else if (kind == "epoch") {
      if (!have_header) throw std::runtime_error("run log: epoch record before header");
      EpochRecord e;
      e.epoch = static_cast<int>(r.integer("epoch"));
      e.train_loss = r.number("train_loss");
      e.train_backbone = r.number("train_backbone");
      e.train_intra = r.number("train_intra");
      e.train_inter = r.number("train_inter");
      e.val_backbone_loss = r.number("val_backbone_loss");
      e.val_si_snr = r.number("val_si_snr");
      e.wall_s = r.number("wall_s");
      log.append(e);
    } else {
      throw std::runtime_error("run log line " + std::to_string(lineno) + ": unknown record");
    }
  }
  if (!have_header) throw std::runtime_error("run log has no header record");
  return log;
}

void RunLog::write(const std::string& path) const { io::write_text_file(path, format()); }

RunLog RunLog::read(const std::string& path) { return parse(io::read_text_file(path)); }

ValidationMetrics validate(const MaskEstimator& model, MixtureCache& cache, const StftConfig& stft,
                           const MrstftConfig& mrstft) {
  NoGradGuard guard;
  ValidationMetrics out;
  const std::size_t n = cache.manifest().size();
  if (n == 0) throw std::invalid_argument("validation manifest is empty");
  double loss = 0, noisy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto mix = cache.get(i);
    const Index c = mix->noisy.dim(0), s = mix->noisy.dim(1);
    const BackbonePass pass =
        backbone_pass(model, mix->noisy.reshape({1, c, s}), mix->clean.reshape({1, c, s}), stft, mrstft);
    loss += pass.loss.item();
    const std::span<const Real> ref(mix->clean.data(), static_cast<std::size_t>(s));
    const double v = si_snr(pass.estimate.value().values(), ref);
    out.si_snr_per_item.push_back(v);
    noisy += si_snr(std::span<const Real>(mix->noisy.data(), static_cast<std::size_t>(s)), ref);
  }
  out.backbone_loss = loss / static_cast<double>(n);
  double sum = 0;
  for (double v : out.si_snr_per_item) sum += v;
  out.si_snr_mean = sum / static_cast<double>(n);
  out.noisy_si_snr_mean = noisy / static_cast<double>(n);
  return out;
}

ValidationMetrics validate(const MaskEstimator& model, const MixManifest& manifest, const DatasetConfig& data,
                           const StftConfig& stft, const MrstftConfig& mrstft) {
  require_sources(manifest, data);
  MixtureCache cache(manifest, data);
  return validate(model, cache, stft, mrstft);
}

std::uint64_t teacher_init_seed(std::uint64_t seed) { return derive_seed(seed, 0x7eac); }
std::uint64_t student_init_seed(std::uint64_t seed) { return derive_seed(seed, 0x57d); }
std::uint64_t distill_init_seed(std::uint64_t seed) { return derive_seed(seed, 0xd157); }
std::uint64_t epoch_data_seed(std::uint64_t seed, int epoch) {
  return derive_seed(seed, 0xda7a, static_cast<std::uint64_t>(epoch));
}

TrainResult train_teacher(const TrainConfig& cfg, const MixManifest& train, const MixManifest& val,
                          const DatasetConfig& data, const TrainOutputs& outputs) {
  check_inputs(cfg, train, val, data);
  if (data.channels != cfg.channels) throw std::invalid_argument("dataset and training channel counts differ");
  TrainResult res;
  res.model = std::make_unique<Model>(teacher_config(cfg), teacher_init_seed(cfg.seed));
  Model& model = *res.model;
  auto header = log_header(cfg, "teacher", train, val, model.params().count());
  LoopResult lr = run_epochs(cfg, model, nullptr, train, val, data, outputs, std::move(header),
                             [&](const Batch& b) -> std::array<double, 4> {
                               const BackbonePass pass = backbone_pass(model, b.noisy, b.clean, cfg.stft, cfg.mrstft);
                               const double l = pass.loss.item();
                               if (std::isfinite(l)) backward(pass.loss);
                               return {l, l, 0, 0};
                             });
  lr.model_snapshot.restore(model.params());
  res.log = std::move(lr.log);
  res.best_metrics = std::move(lr.best);
  res.best_epoch = lr.best_epoch;
  return res;
}

TrainResult train_student(const TrainConfig& cfg, const Model& teacher, const MixManifest& train,
                          const MixManifest& val, const DatasetConfig& data, const TrainOutputs& outputs) {
  check_inputs(cfg, train, val, data);
  if (data.channels != cfg.channels) throw std::invalid_argument("dataset and training channel counts differ");
  const BackboneConfig scfg = student_config(cfg);
  if (teacher.in_channels() != scfg.in_channels) {
    throw std::invalid_argument("teacher expects " + std::to_string(teacher.in_channels() / 2) +
                                " channel(s), training uses " + std::to_string(cfg.channels));
  }
  TrainResult res;
  res.teacher_hash_before = params_hash(teacher.params());
  res.model = std::make_unique<Model>(scfg, student_init_seed(cfg.seed));
  Model& model = *res.model;
  if (cfg.strategy != StrategyId::None) {
    DistillConfig dc;
    dc.strategy = cfg.strategy;
    dc.batch_size = cfg.batch_size;
    dc.frames = cfg.stft.frames(training_samples(cfg, train));
    dc.factor = cfg.embed_factor;
    dc.teacher_recursive_channels = cfg.teacher_recursive_channels;
    dc.student_recursive_channels = cfg.student_recursive_channels;
    res.distill = std::make_unique<DistillState>(scfg, teacher.config(), dc, distill_init_seed(cfg.seed));
  }
  DistillState* ds = res.distill.get();
  auto header = log_header(cfg, "student", train, val, model.params().count());
  header.set("teacher_params_hash", res.teacher_hash_before);
  header.set("distill_params", static_cast<long long>(ds ? ds->params().count() : 0));
  LoopResult lr = run_epochs(cfg, model, ds, train, val, data, outputs, std::move(header),
                             [&](const Batch& b) -> std::array<double, 4> {
                               const StudentLoss sl = total_student_loss(b.noisy, b.clean, model, teacher, ds,
                                                                         cfg.strategy, cfg.loss_weights, cfg.stft,
                                                                         cfg.mrstft);
                               const double l = sl.total.item();
                               if (std::isfinite(l)) backward(sl.total);
                               return {l, sl.backbone.item(), sl.intra.item(), sl.inter.item()};
                             });
  lr.model_snapshot.restore(model.params());
  if (ds) lr.distill_snapshot.restore(ds->params());
  res.teacher_hash_after = params_hash(teacher.params());
  if (res.teacher_hash_after != res.teacher_hash_before) {
    throw std::logic_error("teacher parameters changed during student training");
  }
  res.log = std::move(lr.log);
  res.best_metrics = std::move(lr.best);
  res.best_epoch = lr.best_epoch;
  return res;
}

}  // namespace kdse::inline KDSE_PRECISION
