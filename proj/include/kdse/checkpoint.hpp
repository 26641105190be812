#pragma once

#include <memory>
#include <string>
#include <vector>

#include "kdse/backbone.hpp"
#include "kdse/io/kv.hpp"

namespace kdse::inline KDSE_PRECISION {

struct NamedTensor {
  std::string name;
  Tensor value;
};

void config_to_kv(const BackboneConfig& cfg, io::KvRecord& rec);
BackboneConfig config_from_kv(const io::KvRecord& rec);

/// Container: text header (format_version, config, extra keys) followed by
/// named little-endian float32 arrays.
struct CheckpointData {
  io::KvRecord header;
  std::vector<NamedTensor> tensors;
};

void write_checkpoint(const std::string& path, const CheckpointData& data);
CheckpointData read_checkpoint(const std::string& path);

/// Stores the model and, with a `distill/` prefix, optional training-only parameters.
void save_model(const std::string& path, const Model& model, const ParamSet* distill = nullptr,
                const io::KvRecord& extra = {});

struct LoadedModel {
  std::unique_ptr<Model> model;
  io::KvRecord header;
  std::vector<NamedTensor> distill;
};

/// Rebuilds the model from the header and checks every parameter name and shape.
LoadedModel load_model(const std::string& path);

/// Copies values into params; every name must be present with a matching shape.
void assign_params(ParamSet& params, const std::vector<NamedTensor>& tensors, const std::string& prefix = "");

/// SHA-1 over parameter names, shapes and raw values.
std::string params_hash(const ParamSet& params);

}  // namespace kdse::inline KDSE_PRECISION
