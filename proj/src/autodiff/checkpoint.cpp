#include "dcrn/autodiff/checkpoint.hpp"

#include <openssl/evp.h>

#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace dcrn::ad {

nlohmann::ordered_json checkpoint_to_json(const ParameterStore& params,
                                          const nlohmann::ordered_json& header) {
  nlohmann::ordered_json doc;
  doc["format_version"] = kCheckpointFormatVersion;
  doc["header"] = header.is_null() ? nlohmann::ordered_json::object() : header;
  nlohmann::ordered_json entries = nlohmann::ordered_json::object();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& t = params.value(i);
    entries[params.name(i)] = {{"shape", t.shape()},
                               {"values", std::vector<double>(t.values().begin(), t.values().end())}};
  }
  doc["parameters"] = std::move(entries);
  return doc;
}

Checkpoint checkpoint_from_json(const nlohmann::ordered_json& doc) {
  if (!doc.contains("format_version") || doc["format_version"].get<int>() != kCheckpointFormatVersion) {
    throw std::runtime_error("checkpoint: unsupported or missing format_version");
  }
  Checkpoint ck;
  if (doc.contains("header")) ck.header = doc["header"];
  for (const auto& [name, entry] : doc.at("parameters").items()) {
    Shape shape = entry.at("shape").get<Shape>();
    std::vector<double> values = entry.at("values").get<std::vector<double>>();
    ck.params.add(name, Tensor(std::move(shape), std::move(values)));
  }
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const ParameterStore& params,
                     const nlohmann::ordered_json& header) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("checkpoint: cannot write " + path.string());
  out << checkpoint_to_json(params, header).dump(1) << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("checkpoint: cannot read " + path.string());
  return checkpoint_from_json(nlohmann::ordered_json::parse(in));
}

std::string parameter_checksum(const ParameterStore& params, const std::string& prefix) {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string& name = params.name(i);
    if (name.compare(0, prefix.size(), prefix) != 0) continue;
    EVP_DigestUpdate(ctx, name.data(), name.size());
    for (std::size_t d : params.value(i).shape()) EVP_DigestUpdate(ctx, &d, sizeof d);
    EVP_DigestUpdate(ctx, params.value(i).data(), params.value(i).size() * sizeof(double));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return hex.str();
}

}  // namespace dcrn::ad
