#include "kdse/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "kdse/io/hash.hpp"

namespace kdse::inline KDSE_PRECISION {

namespace {

constexpr const char* kMagic = "KDSE-CHECKPOINT";
constexpr const char* kEndHeader = "end_header";
constexpr long long kFormatVersion = 1;

std::string join(const std::vector<Index>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  if (s.empty()) return out;
  std::size_t start = 0;
  for (;;) {
    const auto c = s.find(',', start);
    out.push_back(s.substr(start, c == std::string::npos ? std::string::npos : c - start));
    if (c == std::string::npos) break;
    start = c + 1;
  }
  return out;
}

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::string& path) {
  T v;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw std::runtime_error(path + ": truncated checkpoint");
  return v;
}

}  // namespace

void config_to_kv(const BackboneConfig& cfg, io::KvRecord& rec) {
  rec.set("in_channels", static_cast<long long>(cfg.in_channels));
  rec.set("conv_channels", static_cast<long long>(cfg.conv_channels));
  rec.set("n_ft_blocks", static_cast<long long>(cfg.n_ft_blocks));
  rec.set("ft_hidden", static_cast<long long>(cfg.ft_hidden));
  rec.set("dilations", join(cfg.dilations));
  rec.set("attention_heads", static_cast<long long>(cfg.attention_heads));
  rec.set("bins", static_cast<long long>(cfg.bins));
  std::string taps;
  for (std::size_t i = 0; i < cfg.tap_plan.size(); ++i) taps += (i ? "," : "") + cfg.tap_plan[i];
  rec.set("tap_plan", taps);
}

BackboneConfig config_from_kv(const io::KvRecord& rec) {
  BackboneConfig c;
  c.in_channels = rec.integer("in_channels");
  c.conv_channels = rec.integer("conv_channels");
  c.n_ft_blocks = rec.integer("n_ft_blocks");
  c.ft_hidden = rec.integer("ft_hidden");
  c.dilations.clear();
  for (const auto& d : split_commas(rec.at("dilations"))) c.dilations.push_back(std::stoll(d));
  c.attention_heads = rec.integer("attention_heads");
  c.bins = rec.integer("bins");
  c.tap_plan = split_commas(rec.find("tap_plan").value_or(""));
  c.validate();
  return c;
}

void write_checkpoint(const std::string& path, const CheckpointData& data) {
  static_assert(std::endian::native == std::endian::little, "checkpoints are little-endian");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  io::KvRecord header;
  header.set("format_version", kFormatVersion);
  for (const auto& [k, v] : data.header.items())
    if (k != "format_version" && k != "tensor_count") header.set(k, v);
  header.set("tensor_count", static_cast<long long>(data.tensors.size()));
  out << kMagic << "\n" << io::format_kv_lines(header) << kEndHeader << "\n";
  for (const auto& t : data.tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.value.rank()));
    for (Index d : t.value.shape()) put<std::int64_t>(out, d);
    for (Real v : t.value.values()) put<float>(out, static_cast<float>(v));
  }
  if (!out) throw std::runtime_error("failed writing checkpoint " + path);
}

CheckpointData read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  std::string line;
  if (!std::getline(in, line) || line != kMagic) throw std::runtime_error(path + ": not a checkpoint file");
  std::string header_text;
  for (;;) {
    if (!std::getline(in, line)) throw std::runtime_error(path + ": unterminated checkpoint header");
    if (line == kEndHeader) break;
    header_text += line + "\n";
  }
  CheckpointData data;
  data.header = io::parse_kv_lines(header_text);
  if (data.header.integer("format_version") != kFormatVersion) {
    throw std::runtime_error(path + ": unsupported checkpoint format_version " + data.header.at("format_version"));
  }
  const long long count = data.header.integer("tensor_count");
  for (long long i = 0; i < count; ++i) {
    const auto len = get<std::uint32_t>(in, path);
    if (len > 4096) throw std::runtime_error(path + ": corrupt tensor name");
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw std::runtime_error(path + ": truncated checkpoint");
    const auto rank = get<std::uint32_t>(in, path);
    if (rank > 8) throw std::runtime_error(path + ": corrupt tensor rank for " + name);
    Shape shape(rank);
    for (auto& d : shape) {
      d = get<std::int64_t>(in, path);
      if (d < 0) throw std::runtime_error(path + ": negative dimension for " + name);
    }
    Tensor t(shape);
    for (Real& v : t.values()) v = static_cast<Real>(get<float>(in, path));
    data.tensors.push_back({std::move(name), std::move(t)});
  }
  return data;
}

void save_model(const std::string& path, const Model& model, const ParamSet* distill, const io::KvRecord& extra) {
  CheckpointData data;
  for (const auto& [k, v] : extra.items()) data.header.set(k, v);
  config_to_kv(model.config(), data.header);
  for (const auto& p : model.params().items()) data.tensors.push_back({p.name, p.var.value()});
  if (distill) {
    for (const auto& p : distill->items()) data.tensors.push_back({"distill/" + p.name, p.var.value()});
  }
  write_checkpoint(path, data);
}

void assign_params(ParamSet& params, const std::vector<NamedTensor>& tensors, const std::string& prefix) {
  std::vector<std::string> problems;
  for (auto& p : params.items()) {
    const std::string key = prefix + p.name;
    const NamedTensor* found = nullptr;
    for (const auto& t : tensors)
      if (t.name == key) found = &t;
    if (!found) {
      problems.push_back("missing " + key);
      continue;
    }
    if (found->value.shape() != p.var.shape()) {
      problems.push_back(key + " has shape " + shape_str(found->value.shape()) + ", expected " + shape_str(p.var.shape()));
      continue;
    }
    std::copy_n(found->value.data(), found->value.numel(), p.var.mutable_value().data());
  }
  if (!problems.empty()) {
    std::string msg = "checkpoint does not match model:";
    for (const auto& s : problems) msg += "\n  " + s;
    throw std::runtime_error(msg);
  }
}

LoadedModel load_model(const std::string& path) {
  CheckpointData data = read_checkpoint(path);
  LoadedModel lm;
  lm.model = std::make_unique<Model>(config_from_kv(data.header), 0);
  std::vector<NamedTensor> own;
  for (auto& t : data.tensors) {
    if (t.name.rfind("distill/", 0) == 0) {
      lm.distill.push_back({t.name.substr(8), std::move(t.value)});
    } else {
      own.push_back(std::move(t));
    }
  }
  if (own.size() != lm.model->params().items().size()) {
    std::string extra;
    for (const auto& t : own) {
      bool known = false;
      for (const auto& p : lm.model->params().items()) known = known || p.name == t.name;
      if (!known) extra += " " + t.name;
    }
    if (!extra.empty()) throw std::runtime_error(path + ": unexpected tensors:" + extra);
  }
  assign_params(lm.model->params(), own);
  lm.header = std::move(data.header);
  return lm;
}

std::string params_hash(const ParamSet& params) {
  std::string bytes;
  for (const auto& p : params.items()) {
    bytes += p.name + "|" + shape_str(p.var.shape()) + "|";
    bytes.append(reinterpret_cast<const char*>(p.var.value().data()), static_cast<std::size_t>(p.var.numel()) * sizeof(Real));
  }
  return io::sha1_hex(bytes);
}

}  // namespace kdse::inline KDSE_PRECISION
