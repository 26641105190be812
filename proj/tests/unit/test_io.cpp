#include <png.h>

#include <cmath>
#include <cstring>
#include <fstream>

#include "doctest.h"
#include "helpers.hpp"
#include "kdse/checkpoint.hpp"
#include "kdse/io/hash.hpp"
#include "kdse/io/kv.hpp"
#include "kdse/io/plot.hpp"
#include "kdse/io/wav.hpp"

using namespace kdse;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void le(std::string& s, std::uint32_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

/// Minimal WAV writer for headers the library refuses to produce.
std::string wav_bytes(std::uint32_t rate, std::uint16_t format, std::uint16_t bits, std::uint16_t channels,
                      const std::string& payload) {
  std::string s = "RIFF";
  le(s, 36 + static_cast<std::uint32_t>(payload.size()), 4);
  s += "WAVEfmt ";
  le(s, 16, 4);
  le(s, format, 2);
  le(s, channels, 2);
  le(s, rate, 4);
  le(s, rate * channels * bits / 8, 4);
  le(s, channels * bits / 8, 2);
  le(s, bits, 2);
  s += "data";
  le(s, static_cast<std::uint32_t>(payload.size()), 4);
  return s + payload;
}

void write_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream(path, std::ios::binary) << bytes;
}

struct Decoded {
  int width = 0, height = 0;
  std::vector<std::uint8_t> rgb;
};

Decoded decode_png(const std::string& path) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  REQUIRE(png_image_begin_read_from_file(&img, path.c_str()) != 0);
  img.format = PNG_FORMAT_RGB;
  Decoded d;
  d.width = static_cast<int>(img.width);
  d.height = static_cast<int>(img.height);
  d.rgb.resize(PNG_IMAGE_SIZE(img));
  REQUIRE(png_image_finish_read(&img, nullptr, d.rgb.data(), 0, nullptr) != 0);
  return d;
}

}  // namespace

TEST_CASE("key-value records") {
  io::KvRecord r;
  r.set("a", "x y");
  r.set("n", 0.1);
  r.set("i", 42);
  r.set("a", "z");
  CHECK(r.items().size() == 3);
  CHECK(r.at("a") == "z");
  CHECK(r.number("n") == 0.1);
  CHECK(r.integer("i") == 42);
  CHECK_FALSE(r.has("b"));
  CHECK_THROWS_WITH(r.at("b"), doctest::Contains("'b'"));
  CHECK_THROWS(r.integer("n"));
  CHECK_THROWS(r.number("a"));
  CHECK_THROWS(r.set("bad=key", "v"));

  const io::KvRecord lines = io::parse_kv_lines("# comment\n\n a = 1 \nb=two words\n");
  CHECK(lines.at("a") == "1");
  CHECK(lines.at("b") == "two words");
  CHECK(io::parse_kv_lines(io::format_kv_lines(r)).items() == r.items());
  CHECK(io::parse_kv_tsv(io::format_kv_tsv(r)).items() == r.items());
  CHECK_THROWS(io::parse_kv_lines("novalue\n"));
  CHECK_THROWS(io::parse_kv_tsv("a=1\t=2"));
}

TEST_CASE("numbers format to the shortest exact decimal") {
  for (double v : {0.1, 1.0 / 3.0, 6e-4, -2.5e-300, 1e22, 123456789.0}) {
    CHECK(std::stod(io::format_number(v)) == v);
  }
  CHECK(io::format_number(0.5) == "0.5");
  CHECK(io::format_number(3) == "3");
}

TEST_CASE("text files") {
  testutil::TempDir dir("kdse_text");
  io::write_text_file(dir.file("t.txt"), "hello\nworld");
  CHECK(io::read_text_file(dir.file("t.txt")) == "hello\nworld");
  CHECK_THROWS(io::read_text_file(dir.file("none.txt")));
}

TEST_CASE("sha1 and git blob hashes") {
  CHECK(io::sha1_hex("") == "da39a3ee5e6b4b0d3255bfef95601890afd80709");
  CHECK(io::sha1_hex("abc") == "a9993e364706816aba3e25717850c26c9cd0d89d");
  CHECK(io::git_blob_hash("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a");
  CHECK(io::git_blob_hash("") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
}

TEST_CASE("float WAV round trip is exact") {
  testutil::TempDir dir("kdse_wav");
  io::Audio a;
  a.channels = 2;
  a.frames = 300;
  for (int i = 0; i < 600; ++i) a.samples.push_back(static_cast<float>(std::sin(0.01 * i) * 1.5));
  io::write_wav(dir.file("f.wav"), a, io::WavEncoding::Float32);
  const io::Audio b = io::read_wav(dir.file("f.wav"));
  CHECK(b.channels == 2);
  CHECK(b.frames == 300);
  CHECK(b.sample_rate == 16000);
  CHECK(b.samples == a.samples);
}

TEST_CASE("PCM16 WAV quantizes to the nearest step and clips") {
  testutil::TempDir dir("kdse_pcm");
  io::Audio a;
  a.frames = 6;
  a.samples = {0.0f, 0.5f, -0.5f, 1.0f, -1.0f, -2.0f};
  io::write_wav(dir.file("p.wav"), a);
  const std::string raw = slurp(dir.file("p.wav"));
  REQUIRE(raw.size() == 44 + 12);
  CHECK(raw.substr(0, 4) == "RIFF");
  CHECK(raw.substr(8, 8) == "WAVEfmt ");
  const io::Audio b = io::read_wav(dir.file("p.wav"));
  CHECK(b.samples[0] == 0.0f);
  CHECK(b.samples[1] == 0.5f);
  CHECK(b.samples[2] == -0.5f);
  CHECK(b.samples[3] == 32767.0f / 32768.0f);
  CHECK(b.samples[4] == -1.0f);
  CHECK(b.samples[5] == -1.0f);

  io::Audio noise;
  noise.frames = 1000;
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) noise.samples.push_back(static_cast<float>(rng.uniform(-0.9, 0.9)));
  io::write_wav(dir.file("n.wav"), noise);
  const io::Audio nb = io::read_wav(dir.file("n.wav"));
  for (int i = 0; i < 1000; ++i) CHECK(std::abs(nb.samples[i] - noise.samples[i]) <= 0.5f / 32768.0f + 1e-7f);
}

TEST_CASE("WAV reader rejects unsupported files") {
  testutil::TempDir dir("kdse_badwav");
  std::string two(4, '\0');
  write_bytes(dir.file("r44.wav"), wav_bytes(44100, 1, 16, 1, two));
  CHECK_THROWS_WITH(io::read_wav(dir.file("r44.wav")), doctest::Contains("44100"));
  write_bytes(dir.file("b24.wav"), wav_bytes(16000, 1, 24, 1, std::string(6, '\0')));
  CHECK_THROWS(io::read_wav(dir.file("b24.wav")));
  write_bytes(dir.file("ok.wav"), wav_bytes(16000, 1, 16, 1, two));
  CHECK(io::read_wav(dir.file("ok.wav")).frames == 2);
  write_bytes(dir.file("junk.wav"), "not a wav file at all, just text");
  CHECK_THROWS(io::read_wav(dir.file("junk.wav")));
  CHECK_THROWS(io::read_wav(dir.file("missing.wav")));

  io::Audio a;
  a.sample_rate = 8000;
  a.frames = 1;
  a.samples = {0};
  CHECK_THROWS(io::write_wav(dir.file("w.wav"), a));
  a.sample_rate = 16000;
  a.frames = 2;
  CHECK_THROWS(io::write_wav(dir.file("w.wav"), a));
}

TEST_CASE("canvas drawing and PNG output") {
  testutil::TempDir dir("kdse_png");
  io::Canvas c(40, 20, {255, 255, 255});
  c.fill_rect(2, 3, 6, 8, {200, 0, 0});
  c.line(0, 19, 39, 19, {0, 0, 255});
  c.text(10, 2, "ab", {0, 0, 0});
  CHECK(c.pixel(3, 4).r == 200);
  CHECK(c.pixel(30, 10).g == 255);
  CHECK(io::Canvas::text_width("abc", 2) == 36);
  c.set(-1, 100, {0, 0, 0});  // off-canvas writes are ignored
  c.write_png(dir.file("c.png"));

  const std::string raw = slurp(dir.file("c.png"));
  CHECK(raw.substr(0, 8) == std::string("\x89PNG\r\n\x1a\n", 8));
  const Decoded d = decode_png(dir.file("c.png"));
  CHECK(d.width == 40);
  CHECK(d.height == 20);
  for (int y = 0; y < 20; ++y)
    for (int x = 0; x < 40; ++x) {
      const io::Rgb p = c.pixel(x, y);
      const std::size_t at = static_cast<std::size_t>(3 * (y * 40 + x));
      REQUIRE(d.rgb[at] == p.r);
      REQUIRE(d.rgb[at + 1] == p.g);
      REQUIRE(d.rgb[at + 2] == p.b);
    }
  bool dark = false;
  for (int y = 2; y < 9; ++y)
    for (int x = 10; x < 22; ++x) dark |= c.pixel(x, y).r == 0;
  CHECK(dark);
}

TEST_CASE("panel rendering draws every series") {
  testutil::TempDir dir("kdse_panels");
  io::Panel p;
  p.title = "loss";
  p.x_label = "epoch";
  p.series.push_back({"a", {1, 2, 3}, {3, 2, 1}, {255, 0, 0}});
  p.series.push_back({"b", {1, 2, 3}, {1, 1.5, 2}, {0, 160, 0}});
  const io::Canvas c = io::render_panels({p, p}, 200, 150);
  CHECK(c.width() == 400);
  CHECK(c.height() == 150);
  int red = 0, green = 0;
  for (int y = 0; y < c.height(); ++y)
    for (int x = 0; x < c.width(); ++x) {
      const io::Rgb px = c.pixel(x, y);
      red += px.r == 255 && px.g == 0 && px.b == 0;
      green += px.r == 0 && px.g == 160 && px.b == 0;
    }
  CHECK(red > 20);
  CHECK(green > 20);
  c.write_png(dir.file("p.png"));
  CHECK(decode_png(dir.file("p.png")).width == 400);
  CHECK_THROWS(io::render_panels({}));
}

TEST_CASE("backbone configs round trip through a header") {
  BackboneConfig c = BackboneConfig::student_variant("S");
  c.in_channels = 6;
  c.tap_plan = {"enc.conv1", "ft.0"};
  io::KvRecord r;
  config_to_kv(c, r);
  CHECK(config_from_kv(r) == c);
}

TEST_CASE("model checkpoints restore every parameter") {
  testutil::TempDir dir("kdse_ckpt");
  const Model m(BackboneConfig::student(), 4);
  ParamSet extra;
  extra.add("x.weight", testutil::random_tensor({3, 2}, 5));
  io::KvRecord info;
  info.set("epoch", 7);
  save_model(dir.file("m.ckpt"), m, &extra, info);
  const LoadedModel lm = load_model(dir.file("m.ckpt"));
  CHECK(lm.model->config() == m.config());
  CHECK(lm.header.integer("epoch") == 7);
  CHECK(params_hash(lm.model->params()) == params_hash(m.params()));
  REQUIRE(lm.distill.size() == 1);
  CHECK(lm.distill[0].name == "x.weight");
  CHECK(testutil::max_abs_diff(lm.distill[0].value, extra.items()[0].var.value()) == 0);

  ParamSet restored;
  restored.add("x.weight", Tensor(Shape{3, 2}));
  assign_params(restored, lm.distill);
  CHECK(params_hash(restored) == params_hash(extra));
  ParamSet wrong;
  wrong.add("x.weight", Tensor(Shape{2, 3}));
  CHECK_THROWS(assign_params(wrong, lm.distill));
  ParamSet missing;
  missing.add("y.weight", Tensor(Shape{3, 2}));
  CHECK_THROWS_WITH(assign_params(missing, lm.distill), doctest::Contains("y.weight"));

  // Truncated and foreign files are rejected.
  const std::string raw = slurp(dir.file("m.ckpt"));
  write_bytes(dir.file("cut.ckpt"), raw.substr(0, raw.size() / 2));
  CHECK_THROWS(load_model(dir.file("cut.ckpt")));
  write_bytes(dir.file("txt.ckpt"), "hello");
  CHECK_THROWS(load_model(dir.file("txt.ckpt")));
}

TEST_CASE("raw checkpoint containers") {
  testutil::TempDir dir("kdse_raw");
  CheckpointData d;
  d.header.set("k", "v");
  d.tensors.push_back({"a", testutil::random_tensor({2, 3, 4}, 1)});
  d.tensors.push_back({"b", Tensor(Shape{1}, Real(-0.0f))});
  write_checkpoint(dir.file("c.bin"), d);
  const CheckpointData back = read_checkpoint(dir.file("c.bin"));
  CHECK(back.header.at("k") == "v");
  REQUIRE(back.tensors.size() == 2);
  CHECK(back.tensors[0].value.shape() == Shape{2, 3, 4});
  CHECK(testutil::max_abs_diff(back.tensors[0].value, d.tensors[0].value) == 0);
}

TEST_CASE("parameter hashes see names, shapes and values") {
  ParamSet a, b, c, e;
  a.add("w", Tensor(Shape{2}, {Real(1), Real(2)}));
  b.add("w", Tensor(Shape{2}, {Real(1), Real(2)}));
  c.add("v", Tensor(Shape{2}, {Real(1), Real(2)}));
  e.add("w", Tensor(Shape{1, 2}, {Real(1), Real(2)}));
  CHECK(params_hash(a) == params_hash(b));
  CHECK(params_hash(a) != params_hash(c));
  CHECK(params_hash(a) != params_hash(e));
  b.items()[0].var.mutable_value()[1] = Real(2.0001);
  CHECK(params_hash(a) != params_hash(b));
  CHECK(params_hash(a).size() == 40);
}
