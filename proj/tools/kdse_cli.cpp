// kdse: dataset building, training, enhancement and reporting.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "kdse/checkpoint.hpp"
#include "kdse/io/plot.hpp"
#include "kdse/io/wav.hpp"
#include "kdse/report.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

using namespace kdse;
namespace fs = std::filesystem;

namespace {

struct CommonOpts {
  std::string config_path;
  std::uint64_t seed = 1;
  std::string strategy;
  int threads = 0;
};

struct TrainOpts {
  std::string train, val, out, runlog, teacher;
  int epochs = 0;
  Index batch_size = 0;
  double chunk_s = -1;
  double lr = 0;
  std::string student_size;
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

DatasetConfig dataset_for(const std::string& manifest_path, int channels) {
  DatasetConfig d;
  d.channels = channels;
  d.base_dir = fs::absolute(manifest_path).parent_path().string();
  return d;
}

/// Config file first, then explicit flags.
TrainConfig effective_config(const CLI::App& sub, const CommonOpts& c, const TrainOpts& t) {
  TrainConfig cfg = c.config_path.empty() ? TrainConfig{} : load_train_config(c.config_path);
  const CLI::App& root = *sub.get_parent();
  if (root.count("--seed")) cfg.seed = c.seed;
  if (!c.strategy.empty()) cfg.strategy = parse_strategy(c.strategy);
  if (t.epochs > 0) cfg.epochs = t.epochs;
  if (t.batch_size > 0) cfg.batch_size = t.batch_size;
  if (sub.count("--chunk")) cfg.chunk_s = t.chunk_s;
  if (t.lr > 0) cfg.lr = t.lr;
  if (!t.student_size.empty()) cfg.student_size = t.student_size;
  cfg.validate();
  return cfg;
}

void echo_config(const TrainConfig& cfg) {
  std::cout << "# effective config (save as a --config file to re-run)\n" << io::format_kv_lines(cfg.to_kv());
}

void print_epoch(const EpochRecord& e) {
  std::printf("epoch %d  train %.5f  val_loss %.5f  val_si_snr %.3f dB  (%.1f s)\n", e.epoch, e.train_loss,
              e.val_backbone_loss, e.val_si_snr, e.wall_s);
  std::fflush(stdout);
}

int cmd_mix(const CommonOpts& c, const std::string& out, std::size_t count, double duration, double snr_min,
            double snr_max, const std::string& snrs, const std::string& noises, const std::string& from_dir,
            bool render, int channels) {
  MixManifest m;
  if (!from_dir.empty()) {
    m = make_directory_manifest(from_dir, snr_min, snr_max, c.seed);
  } else {
    SyntheticManifestConfig sc;
    sc.count = count;
    sc.duration_s = duration;
    sc.snr_min = snr_min;
    sc.snr_max = snr_max;
    sc.seed = c.seed;
    for (const auto& s : split_list(snrs)) sc.snr_choices.push_back(std::stod(s));
    if (!noises.empty()) {
      sc.noise_kinds.clear();
      for (const auto& n : split_list(noises)) sc.noise_kinds.push_back(parse_noise(n));
    }
    m = make_synthetic_manifest(sc);
  }
  save_manifest(out, m);
  std::printf("wrote %zu entries to %s (hash %s)\n", m.size(), out.c_str(), manifest_hash(m).c_str());
  if (render) {
    const fs::path dir = fs::path(out).parent_path() / "audio";
    fs::create_directories(dir);
    const DatasetConfig d = dataset_for(out, channels);
    for (std::size_t i = 0; i < m.size(); ++i) {
      const Mixture mix = render_entry(m.entries[i], d);
      for (const auto& [name, t] : {std::pair{"noisy", &mix.noisy}, std::pair{"clean", &mix.clean}}) {
        io::Audio a;
        a.channels = static_cast<int>(t->dim(0));
        a.frames = t->dim(1);
        a.samples.assign(t->data(), t->data() + t->numel());
        char buf[64];
        std::snprintf(buf, sizeof buf, "%04zu_%s.wav", i, name);
        io::write_wav((dir / buf).string(), a);
      }
    }
    std::printf("rendered %zu mixtures to %s\n", m.size(), dir.string().c_str());
  }
  return 0;
}

int cmd_train_teacher(const CLI::App& sub, const CommonOpts& c, const TrainOpts& t) {
  const TrainConfig cfg = effective_config(sub, c, t);
  echo_config(cfg);
  const MixManifest train = load_manifest(t.train), val = load_manifest(t.val);
  TrainOutputs outs{t.out, t.runlog, print_epoch};
  const TrainResult r = train_teacher(cfg, train, val, dataset_for(t.train, cfg.channels), outs);
  std::printf("best epoch %d  val_loss %.5f  val_si_snr %.3f dB  noisy %.3f dB\n", r.best_epoch,
              r.best_metrics.backbone_loss, r.best_metrics.si_snr_mean, r.best_metrics.noisy_si_snr_mean);
  return 0;
}

int cmd_train_student(const CLI::App& sub, const CommonOpts& c, const TrainOpts& t) {
  const TrainConfig cfg = effective_config(sub, c, t);
  echo_config(cfg);
  const LoadedModel teacher = load_model(t.teacher);
  const MixManifest train = load_manifest(t.train), val = load_manifest(t.val);
  TrainOutputs outs{t.out, t.runlog, print_epoch};
  const TrainResult r = train_student(cfg, *teacher.model, train, val, dataset_for(t.train, cfg.channels), outs);
  std::printf("best epoch %d  val_loss %.5f  val_si_snr %.3f dB  teacher hash %s (unchanged)\n", r.best_epoch,
              r.best_metrics.backbone_loss, r.best_metrics.si_snr_mean, r.teacher_hash_after.c_str());
  return 0;
}

int cmd_enhance(const std::string& in, const std::string& ckpt, const std::string& out, bool as_float) {
  const LoadedModel lm = load_model(ckpt);
  const io::Audio a = io::read_wav(in);
  Tensor wave(Shape{a.channels, a.frames}, std::vector<Real>(a.samples.begin(), a.samples.end()));
  const Tensor est = enhance(*lm.model, wave, stft_from_kv(lm.header));
  io::Audio o;
  o.channels = 1;
  o.frames = est.numel();
  o.samples.assign(est.data(), est.data() + est.numel());
  io::write_wav(out, o, as_float ? io::WavEncoding::Float32 : io::WavEncoding::Pcm16);
  std::printf("wrote %s (%lld samples)\n", out.c_str(), static_cast<long long>(o.frames));
  return 0;
}

int cmd_validate(const std::string& ckpt, const std::string& manifest, bool identity, int channels,
                 const std::string& out) {
  const MixManifest m = load_manifest(manifest);
  ValidationMetrics vm;
  std::unique_ptr<MaskEstimator> stub;
  LoadedModel lm;
  const MaskEstimator* model = nullptr;
  if (identity) {
    stub = std::make_unique<IdentityMask>(2 * channels);
    model = stub.get();
  } else {
    lm = load_model(ckpt);
    model = lm.model.get();
  }
  vm = validate(*model, m, dataset_for(manifest, model->in_channels() / 2), stft_from_kv(lm.header),
                MrstftConfig{});
  io::KvRecord r;
  r.set("format_version", 1);
  r.set("backbone_loss", vm.backbone_loss);
  r.set("si_snr_mean", vm.si_snr_mean);
  r.set("noisy_si_snr_mean", vm.noisy_si_snr_mean);
  std::string items;
  for (double v : vm.si_snr_per_item) items += (items.empty() ? "" : ",") + io::format_number(v);
  r.set("si_snr_per_item", items);
  const std::string text = io::format_kv_lines(r);
  std::cout << text;
  if (!out.empty()) io::write_text_file(out, text);
  return 0;
}

int cmd_compare(const CLI::App& sub, const CommonOpts& c, const TrainOpts& t, const std::string& strategies,
                const std::string& seeds, const std::string& out) {
  const TrainConfig cfg = effective_config(sub, c, t);
  echo_config(cfg);
  std::vector<StrategyId> ids;
  for (const auto& s : split_list(strategies)) ids.push_back(parse_strategy(s));
  std::vector<std::uint64_t> seed_list;
  for (const auto& s : split_list(seeds)) seed_list.push_back(std::stoull(s));
  if (seed_list.empty()) seed_list.push_back(cfg.seed);
  const LoadedModel teacher = load_model(t.teacher);
  const MixManifest train = load_manifest(t.train), val = load_manifest(t.val);
  const AblationReport rep =
      ablation_compare(ids, cfg, *teacher.model, train, val, seed_list, dataset_for(t.train, cfg.channels),
                       [](const AblationRun& r) {
                         std::printf("trained %s seed %llu: val_si_snr %.3f dB\n", strategy_name(r.strategy).c_str(),
                                     static_cast<unsigned long long>(r.seed), r.result.best_metrics.si_snr_mean);
                         std::fflush(stdout);
                       });
  const std::string text = rep.format_tsv();
  if (out.empty()) {
    std::cout << text;
  } else {
    io::write_text_file(out, text);
    std::printf("wrote %s\n", out.c_str());
  }
  return 0;
}

int cmd_plot(const std::vector<std::string>& logs, const std::string& out) {
  static const io::Rgb palette[] = {{31, 119, 180}, {255, 127, 14}, {44, 160, 44}, {214, 39, 40},
                                    {148, 103, 189}, {140, 86, 75}, {227, 119, 194}};
  io::Panel loss{"BACKBONE LOSS", "EPOCH", {}}, snr{"VAL SI-SNR (DB)", "EPOCH", {}};
  for (std::size_t i = 0; i < logs.size(); ++i) {
    const RunLog log = RunLog::read(logs[i]);
    std::string label = fs::path(logs[i]).stem().string();
    if (const auto s = log.header.find("cfg.strategy"); s && log.header.at("kind") == "student") label += " " + *s;
    io::Series tr{label + " train", {}, {}, palette[(2 * i) % std::size(palette)]};
    io::Series va{label + " val", {}, {}, palette[(2 * i + 1) % std::size(palette)]};
    io::Series sn{label, {}, {}, palette[(2 * i + 1) % std::size(palette)]};
    for (const auto& e : log.epochs) {
      tr.x.push_back(e.epoch);
      tr.y.push_back(e.train_backbone);
      va.x.push_back(e.epoch);
      va.y.push_back(e.val_backbone_loss);
      sn.x.push_back(e.epoch);
      sn.y.push_back(e.val_si_snr);
    }
    loss.series.push_back(std::move(tr));
    loss.series.push_back(std::move(va));
    snr.series.push_back(std::move(sn));
  }
  io::render_panels({loss, snr}).write_png(out);
  std::printf("wrote %s\n", out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Teacher-student distillation toolkit for causal speech enhancement"};
  app.require_subcommand(1);
  app.fallthrough();
  CommonOpts common;
  app.add_option("--config", common.config_path, "key=value training config file")->check(CLI::ExistingFile);
  app.add_option("--seed", common.seed, "random seed");
  app.add_option("--strategy", common.strategy, "distillation strategy: none, base, m1, m2, m3, m4");
  app.add_option("--threads", common.threads, "OpenMP thread count (0 keeps the default)");

  std::string mix_out = "manifest.tsv", snrs, noises, from_dir;
  std::size_t mix_count = 20;
  double mix_duration = 1.0, snr_min = -5, snr_max = 15;
  bool mix_render = false;
  int channels = 1;
  auto* mix = app.add_subcommand("mix", "build a mixture manifest");
  mix->add_option("--out", mix_out, "manifest path");
  mix->add_option("--count", mix_count, "number of synthetic mixtures");
  mix->add_option("--duration", mix_duration, "seconds per mixture");
  mix->add_option("--snr-min", snr_min, "lowest SNR in dB");
  mix->add_option("--snr-max", snr_max, "highest SNR in dB");
  mix->add_option("--snrs", snrs, "comma-separated SNR choices (overrides the range)");
  mix->add_option("--noise", noises, "comma-separated noise kinds: white, pink, babble, tonal");
  mix->add_option("--from-dir", from_dir, "pair DIR/clean/*.wav with DIR/noise/*.wav")->check(CLI::ExistingDirectory);
  mix->add_flag("--render", mix_render, "also write noisy/clean WAV files next to the manifest");
  mix->add_option("--channels", channels, "channels when rendering");

  TrainOpts topts;
  auto add_train_opts = [&](CLI::App* sub, bool needs_teacher) {
    sub->add_option("--train", topts.train, "training manifest")->required()->check(CLI::ExistingFile);
    sub->add_option("--val", topts.val, "validation manifest")->required()->check(CLI::ExistingFile);
    sub->add_option("--epochs", topts.epochs, "epochs");
    sub->add_option("--batch-size", topts.batch_size, "batch size");
    sub->add_option("--chunk", topts.chunk_s, "chunk seconds (0 = whole utterances)");
    sub->add_option("--lr", topts.lr, "learning rate");
    sub->add_option("--student-size", topts.student_size, "student variant S, M or L");
    if (needs_teacher) {
      sub->add_option("--teacher", topts.teacher, "teacher checkpoint")->required()->check(CLI::ExistingFile);
    }
  };
  auto* tt = app.add_subcommand("train-teacher", "pretrain the teacher with the MRSTFT loss");
  add_train_opts(tt, false);
  tt->add_option("--out", topts.out, "best checkpoint path")->required();
  tt->add_option("--runlog", topts.runlog, "run log path");

  auto* ts = app.add_subcommand("train-student", "train a student against a frozen teacher");
  add_train_opts(ts, true);
  ts->add_option("--out", topts.out, "best checkpoint path")->required();
  ts->add_option("--runlog", topts.runlog, "run log path");

  std::string enh_in, enh_ckpt, enh_out;
  bool enh_float = false;
  auto* en = app.add_subcommand("enhance", "enhance one WAV file");
  en->add_option("--in", enh_in, "noisy WAV")->required()->check(CLI::ExistingFile);
  en->add_option("--ckpt", enh_ckpt, "model checkpoint")->required()->check(CLI::ExistingFile);
  en->add_option("--out", enh_out, "output WAV")->required();
  en->add_flag("--float", enh_float, "write 32-bit float samples");

  std::string val_ckpt, val_manifest, val_out;
  bool val_identity = false;
  auto* va = app.add_subcommand("validate", "evaluate a checkpoint on a manifest");
  va->add_option("--ckpt", val_ckpt, "model checkpoint")->check(CLI::ExistingFile);
  va->add_option("--manifest", val_manifest, "manifest")->required()->check(CLI::ExistingFile);
  va->add_flag("--identity", val_identity, "evaluate the pass-through mask instead of a checkpoint");
  va->add_option("--channels", channels, "channels for --identity");
  va->add_option("--out", val_out, "also write the metrics record here");

  std::string cmp_strategies = "m1,m2,m3,m4", cmp_seeds, cmp_out;
  auto* cm = app.add_subcommand("compare", "train several strategies and tabulate them");
  add_train_opts(cm, true);
  cm->add_option("--strategies", cmp_strategies, "comma-separated strategies");
  cm->add_option("--seeds", cmp_seeds, "comma-separated seeds (default: --seed)");
  cm->add_option("--out", cmp_out, "report path (default: stdout)");

  std::vector<std::string> plot_logs;
  std::string plot_out;
  auto* pl = app.add_subcommand("plot", "draw loss and SI-SNR curves from run logs");
  pl->add_option("--runlog", plot_logs, "run log (repeatable)")->required()->check(CLI::ExistingFile);
  pl->add_option("--out", plot_out, "PNG path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 2;
  }

  try {
#ifdef _OPENMP
    if (common.threads > 0) omp_set_num_threads(common.threads);
#endif
    if (mix->parsed()) {
      return cmd_mix(common, mix_out, mix_count, mix_duration, snr_min, snr_max, snrs, noises, from_dir, mix_render,
                     channels);
    }
    if (tt->parsed()) return cmd_train_teacher(*tt, common, topts);
    if (ts->parsed()) return cmd_train_student(*ts, common, topts);
    if (en->parsed()) return cmd_enhance(enh_in, enh_ckpt, enh_out, enh_float);
    if (va->parsed()) {
      if (!val_identity && val_ckpt.empty()) {
        std::cerr << "validate: --ckpt or --identity is required\n";
        return 2;
      }
      return cmd_validate(val_ckpt, val_manifest, val_identity, channels, val_out);
    }
    if (cm->parsed()) return cmd_compare(*cm, common, topts, cmp_strategies, cmp_seeds, cmp_out);
    if (pl->parsed()) return cmd_plot(plot_logs, plot_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
