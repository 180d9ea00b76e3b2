#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "hagd/gnn.hpp"
#include "hagd/model.hpp"
#include "hagd/tensor.hpp"
#include "hagd/transcoder.hpp"

namespace hagd {

std::string sha256_hex(const std::string& bytes);

// Weight archive: magic "HAGDARC1", u64 header length, JSON header (kind,
// version, config, tensor table), then raw little-endian doubles.
struct WeightArchive {
  std::string kind;
  nlohmann::json config;
  std::vector<std::pair<std::string, ad::Tensor>> tensors;

  const ad::Tensor& tensor(const std::string& name) const;
};

std::string write_archive(const WeightArchive& a);
// Throws ParseError on truncation, bad magic or a header/table mismatch.
WeightArchive read_archive(const std::string& bytes, const std::string& expected_kind);

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

std::string save_model(const Transformer& model, const nlohmann::json& extra = {});
Transformer load_model(const std::string& bytes);

std::string save_transcoders(const Transcoders& tc, const nlohmann::json& extra = {});
Transcoders load_transcoders(const std::string& bytes);

std::string save_gnn(const GnnParams& p, const nlohmann::json& extra = {});
GnnParams load_gnn(const std::string& bytes);

}  // namespace hagd
