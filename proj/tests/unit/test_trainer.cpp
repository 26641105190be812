#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "helpers.hpp"
#include "kdse/checkpoint.hpp"
#include "kdse/trainer.hpp"

using namespace kdse;

namespace {

MixManifest tiny_manifest(std::size_t count, std::uint64_t seed) {
  SyntheticManifestConfig c;
  c.count = count;
  c.duration_s = 0.5;
  c.seed = seed;
  c.snr_choices = {0, 5};
  return make_synthetic_manifest(c);
}

TrainConfig tiny_config(StrategyId s = StrategyId::None) {
  TrainConfig c;
  c.batch_size = 2;
  c.epochs = 1;
  c.chunk_s = 0.25;
  c.strategy = s;
  c.seed = 11;
  return c;
}

struct Fixture {
  MixManifest train = tiny_manifest(4, 1), val = tiny_manifest(2, 2);
};

}  // namespace

TEST_CASE("train config key-value round trip") {
  TrainConfig c;
  c.lr = 1.25e-3;
  c.clip_norm = 5;
  c.batch_size = 3;
  c.epochs = 7;
  c.chunk_s = 0;
  c.strategy = StrategyId::M3;
  c.seed = 18446744073709551557ull;
  c.loss_weights = {1, 0.5, 0.25};
  c.student_size = "L";
  c.embed_factor = 2;
  c.channels = 3;
  c.stft.window = WindowKind::SqrtHann;
  c.mrstft.resolutions = {{256, 64, 256}, {1024, 256, 1024}};
  CHECK(TrainConfig::from_kv(c.to_kv()) == c);
  CHECK(TrainConfig::from_kv(io::parse_kv_lines(io::format_kv_lines(c.to_kv()))) == c);

  testutil::TempDir dir("kdse_cfg");
  save_train_config(dir.file("c.cfg"), c);
  CHECK(load_train_config(dir.file("c.cfg")) == c);

  io::KvRecord partial;
  partial.set("epochs", 3);
  const TrainConfig p = TrainConfig::from_kv(partial);
  CHECK(p.epochs == 3);
  CHECK(p.lr == TrainConfig{}.lr);

  io::KvRecord bad = c.to_kv();
  bad.set("learning_rate", 1.0);
  CHECK_THROWS_WITH(TrainConfig::from_kv(bad), doctest::Contains("learning_rate"));
  io::KvRecord neg;
  neg.set("lr", -1.0);
  CHECK_THROWS(TrainConfig::from_kv(neg));
  io::KvRecord hop;
  hop.set("hop", 512ll);
  CHECK_THROWS(TrainConfig::from_kv(hop));
}

TEST_CASE("default training hyperparameters") {
  const TrainConfig c;
  CHECK(c.lr == 6e-4);
  CHECK(c.batch_size == 8);
  CHECK(c.epochs == 20);
  CHECK(c.chunk_s == 2.5);
  CHECK(c.strategy == StrategyId::M4);
  CHECK(c.loss_weights == LossWeights{1, 1, 1});
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("stft settings round trip through a header") {
  StftConfig s;
  s.win_len_samples = 400;
  s.hop_samples = 100;
  s.window = WindowKind::SqrtHann;
  io::KvRecord r;
  stft_to_kv(s, r);
  const StftConfig back = stft_from_kv(r);
  CHECK(back.win_len_samples == 400);
  CHECK(back.hop_samples == 100);
  CHECK(back.fft_size == s.fft_size);
  CHECK(back.window == WindowKind::SqrtHann);
  CHECK(stft_from_kv(io::KvRecord{}).hop_samples == StftConfig{}.hop_samples);
}

TEST_CASE("Adam follows the bias-corrected update") {
  const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  Var p = parameter(Tensor(Shape{2}, {Real(1), Real(-2)}));
  Var idle = parameter(Tensor(Shape{1}, Real(4)));
  Adam opt({p, idle}, lr, b1, b2, eps);
  double x[2] = {1, -2}, m[2] = {0, 0}, v[2] = {0, 0};
  for (int t = 1; t <= 5; ++t) {
    // loss = sum(c * p^2) with a changing coefficient
    const double c = 0.5 + 0.3 * t;
    backward(sum(scale(square(p), static_cast<Real>(c))));
    opt.step();
    opt.zero_grad();
    for (int i = 0; i < 2; ++i) {
      const double g = 2 * c * x[i];
      m[i] = b1 * m[i] + (1 - b1) * g;
      v[i] = b2 * v[i] + (1 - b2) * g * g;
      const double mh = m[i] / (1 - std::pow(b1, t)), vh = v[i] / (1 - std::pow(b2, t));
      x[i] -= lr * mh / (std::sqrt(vh) + eps);
      CHECK(p.value()[i] == doctest::Approx(x[i]).epsilon(1e-5));
    }
  }
  CHECK(opt.steps() == 5);
  CHECK(idle.value()[0] == 4);
  CHECK_FALSE(p.has_grad());
}

TEST_CASE("gradient norm and clipping") {
  Var a = parameter(Tensor(Shape{2}, {Real(3), Real(0)}));
  Var b = parameter(Tensor(Shape{1}, Real(4)));
  Var none = parameter(Tensor(Shape{1}, Real(1)));
  backward(add(sum(mul(a, constant(Tensor(Shape{2}, {Real(3), Real(0)})))), scale(sum(b), 4)));
  const std::vector<Var> ps{a, b, none};
  CHECK(grad_norm(ps) == doctest::Approx(5));
  clip_grad_norm(ps, 10);
  CHECK(grad_norm(ps) == doctest::Approx(5));
  clip_grad_norm(ps, 1);
  CHECK(grad_norm(ps) == doctest::Approx(1));
  CHECK(a.grad()[0] == doctest::Approx(0.6));
  CHECK(b.grad()[0] == doctest::Approx(0.8));
}

TEST_CASE("run log round trip and ordering") {
  RunLog log;
  log.header.set("kind", "teacher");
  log.header.set("cfg.lr", 6e-4);
  for (int e = 1; e <= 3; ++e) {
    EpochRecord r;
    r.epoch = e;
    r.train_loss = 1.0 / e;
    r.train_backbone = 0.7 / e;
    r.train_intra = 0.2 / e;
    r.train_inter = 0.1 / e;
    r.val_backbone_loss = 0.9 / 3.0 / e;
    r.val_si_snr = 3.3 * e;
    r.wall_s = 0.123;
    log.append(r);
  }
  const RunLog back = RunLog::parse(log.format());
  CHECK(back.header.at("kind") == "teacher");
  CHECK(back.header.integer("format_version") == 1);
  REQUIRE(back.epochs.size() == 3);
  for (int i = 0; i < 3; ++i) {
    CHECK(back.epochs[i].epoch == log.epochs[i].epoch);
    CHECK(back.epochs[i].train_loss == log.epochs[i].train_loss);
    CHECK(back.epochs[i].val_backbone_loss == log.epochs[i].val_backbone_loss);
    CHECK(back.epochs[i].val_si_snr == log.epochs[i].val_si_snr);
  }
  EpochRecord dup;
  dup.epoch = 3;
  CHECK_THROWS(log.append(dup));
  CHECK_THROWS(RunLog::parse("record=epoch\tepoch=1\n"));
  CHECK_THROWS(RunLog::parse(""));
  CHECK_THROWS(RunLog::parse("record=header\tformat_version=2\n"));
  CHECK_THROWS(RunLog::parse("record=header\tformat_version=1\nrecord=other\n"));
}

TEST_CASE("derived seeds are distinct streams") {
  CHECK(teacher_init_seed(1) != student_init_seed(1));
  CHECK(student_init_seed(1) != distill_init_seed(1));
  CHECK(epoch_data_seed(1, 1) != epoch_data_seed(1, 2));
  CHECK(epoch_data_seed(1, 1) != epoch_data_seed(2, 1));
  CHECK(epoch_data_seed(5, 3) == epoch_data_seed(5, 3));
}

TEST_CASE("teacher training is deterministic and reloads exactly") {
  Fixture f;
  TrainConfig cfg = tiny_config();
  cfg.epochs = 2;
  testutil::TempDir dir("kdse_train");
  TrainOutputs out;
  out.checkpoint_path = dir.file("teacher.ckpt");
  out.runlog_path = dir.file("teacher.log");
  int seen = 0;
  out.on_epoch = [&](const EpochRecord& r) { CHECK(r.epoch == ++seen); };
  const TrainResult a = train_teacher(cfg, f.train, f.val, {}, out);
  const TrainResult b = train_teacher(cfg, f.train, f.val);
  CHECK(seen == 2);
  REQUIRE(a.log.epochs.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(a.log.epochs[i].train_loss == b.log.epochs[i].train_loss);
    CHECK(a.log.epochs[i].val_backbone_loss == b.log.epochs[i].val_backbone_loss);
    CHECK(std::isfinite(a.log.epochs[i].train_loss));
  }
  CHECK(params_hash(a.model->params()) == params_hash(b.model->params()));
  CHECK(a.best_epoch >= 1);
  CHECK(a.log.header.at("kind") == "teacher");
  CHECK(a.log.header.at("train_manifest_hash") == manifest_hash(f.train));

  const RunLog disk = RunLog::read(out.runlog_path);
  CHECK(disk.epochs.size() == 2);

  const LoadedModel lm = load_model(out.checkpoint_path);
  CHECK(params_hash(lm.model->params()) == params_hash(a.model->params()));
  CHECK(lm.header.integer("epoch") == a.best_epoch);
  const ValidationMetrics vm = validate(*lm.model, f.val, {}, StftConfig{}, MrstftConfig{});
  CHECK(vm.backbone_loss == a.best_metrics.backbone_loss);
  CHECK(vm.si_snr_mean == a.best_metrics.si_snr_mean);
  CHECK(lm.header.number("val_backbone_loss") == a.best_metrics.backbone_loss);

  // A different seed takes a different path.
  cfg.seed = 12;
  const TrainResult c = train_teacher(cfg, f.train, f.val);
  CHECK(c.log.epochs[0].train_loss != a.log.epochs[0].train_loss);
}

TEST_CASE("validation is deterministic and the identity mask reproduces the noisy input") {
  Fixture f;
  const Model m(BackboneConfig::student(), 3);
  const ValidationMetrics a = validate(m, f.val, {}, StftConfig{}, MrstftConfig{});
  const ValidationMetrics b = validate(m, f.val, {}, StftConfig{}, MrstftConfig{});
  CHECK(a.si_snr_per_item == b.si_snr_per_item);
  CHECK(a.backbone_loss == b.backbone_loss);
  CHECK(a.si_snr_per_item.size() == 2);

  const ValidationMetrics id = validate(IdentityMask{}, f.val, {}, StftConfig{}, MrstftConfig{});
  CHECK(id.si_snr_mean == doctest::Approx(id.noisy_si_snr_mean).epsilon(1e-3));
  CHECK(id.noisy_si_snr_mean == a.noisy_si_snr_mean);
  CHECK_THROWS(validate(m, MixManifest{}, {}, StftConfig{}, MrstftConfig{}));
}

TEST_CASE("student training leaves the teacher untouched") {
  Fixture f;
  const Model teacher(BackboneConfig::teacher(), 5);
  const std::string before = params_hash(teacher.params());
  const TrainResult r = train_student(tiny_config(StrategyId::M4), teacher, f.train, f.val);
  CHECK(r.teacher_hash_before == before);
  CHECK(r.teacher_hash_after == before);
  CHECK(params_hash(teacher.params()) == before);
  REQUIRE(r.distill);
  CHECK(r.log.epochs[0].train_inter > 0);
  CHECK(r.log.header.at("teacher_params_hash") == before);
}

TEST_CASE("zero distillation weights train like the plain student") {
  Fixture f;
  const Model teacher(BackboneConfig::teacher(), 5);
  TrainConfig m4 = tiny_config(StrategyId::M4);
  m4.loss_weights = {1, 0, 0};
  const TrainResult a = train_student(m4, teacher, f.train, f.val);
  const TrainResult b = train_student(tiny_config(StrategyId::None), teacher, f.train, f.val);
  CHECK(a.log.epochs[0].train_loss == b.log.epochs[0].train_loss);
  CHECK(a.best_metrics.backbone_loss == b.best_metrics.backbone_loss);
  CHECK(params_hash(a.model->params()) == params_hash(b.model->params()));
  CHECK_FALSE(b.distill);
}

TEST_CASE("student checkpoints carry the distillation parameters") {
  Fixture f;
  const Model teacher(BackboneConfig::teacher(), 6);
  testutil::TempDir dir("kdse_student");
  TrainOutputs out;
  out.checkpoint_path = dir.file("s.ckpt");
  const TrainResult r = train_student(tiny_config(StrategyId::M3), teacher, f.train, f.val, {}, out);
  const LoadedModel lm = load_model(out.checkpoint_path);
  CHECK(lm.header.at("strategy") == "m3");
  CHECK(static_cast<Index>(lm.distill.size()) == static_cast<Index>(r.distill->params().items().size()));
  CHECK(params_hash(lm.model->params()) == params_hash(r.model->params()));
}

TEST_CASE("training input checks") {
  Fixture f;
  TrainConfig cfg = tiny_config();
  cfg.batch_size = 5;
  CHECK_THROWS_WITH(train_teacher(cfg, f.train, f.val), doctest::Contains("batch size"));
  cfg = tiny_config();
  DatasetConfig three;
  three.channels = 3;
  CHECK_THROWS(train_teacher(cfg, f.train, f.val, three));
  const Model teacher(BackboneConfig::teacher(), 1);
  cfg.channels = 3;
  CHECK_THROWS_WITH(train_student(cfg, teacher, f.train, f.val, three), doctest::Contains("channel"));
}

TEST_CASE("a diverging run stops with an error") {
  Fixture f;
  TrainConfig cfg = tiny_config();
  cfg.lr = 1e30;
  cfg.epochs = 3;
  CHECK_THROWS_WITH(train_teacher(cfg, f.train, f.val), doctest::Contains("non-finite"));
}
