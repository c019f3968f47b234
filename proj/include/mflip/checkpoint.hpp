#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>

#include "mflip/model.hpp"

namespace mflip {

inline constexpr const char* kCheckpointFormat = "mflip.checkpoint.v1";

namespace detail {

inline nlohmann::json mat_to_json(const Mat& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline void mat_from_json(const nlohmann::json& j, Mat& m, const std::string& name) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != m.rows())
    throw std::runtime_error("checkpoint tensor " + name + " has wrong shape");
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const auto& row = j[r];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != m.cols())
      throw std::runtime_error("checkpoint tensor " + name + " has wrong shape");
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = row[c].get<double>();
  }
}

}  // namespace detail

inline nlohmann::json checkpoint_to_json(const ModelParams& p) {
  nlohmann::json j;
  j["format"] = kCheckpointFormat;
  j["dims"] = {{"feature_dim", p.dims.feature_dim},
               {"hidden_dim", p.dims.hidden_dim},
               {"n_layers", p.dims.n_layers},
               {"n_radial", p.dims.n_radial},
               {"n_angular", p.dims.n_angular},
               {"r_atom", p.dims.r_atom},
               {"r_bond", p.dims.r_bond},
               {"max_images", p.dims.max_images}};
  j["fidelity"] = {{"n_fidelities", p.fidelity.n_fidelities},
                   {"fid_embedding", p.fidelity.fid_embedding},
                   {"fid_messages", p.fidelity.fid_messages},
                   {"fid_readout", p.fidelity.fid_readout},
                   {"fid_composition", p.fidelity.fid_composition}};
  nlohmann::json tensors;
  for_each_tensor(p, [&](const std::string& name, const Mat& m) {
    tensors[name] = detail::mat_to_json(m);
  });
  j["tensors"] = std::move(tensors);
  return j;
}

inline ModelParams checkpoint_from_json(const nlohmann::json& j) {
  if (!j.contains("format") || j.at("format").get<std::string>() != kCheckpointFormat)
    throw std::runtime_error("not a recognized checkpoint (format tag mismatch)");
  ModelDims dims;
  const auto& jd = j.at("dims");
  dims.feature_dim = jd.at("feature_dim").get<int>();
  dims.hidden_dim = jd.at("hidden_dim").get<int>();
  dims.n_layers = jd.at("n_layers").get<int>();
  dims.n_radial = jd.at("n_radial").get<int>();
  dims.n_angular = jd.at("n_angular").get<int>();
  dims.r_atom = jd.at("r_atom").get<double>();
  dims.r_bond = jd.at("r_bond").get<double>();
  dims.max_images = jd.at("max_images").get<int>();
  FidelityConfig fc;
  const auto& jf = j.at("fidelity");
  fc.n_fidelities = jf.at("n_fidelities").get<int>();
  fc.fid_embedding = jf.at("fid_embedding").get<bool>();
  fc.fid_messages = jf.at("fid_messages").get<bool>();
  fc.fid_readout = jf.at("fid_readout").get<bool>();
  fc.fid_composition = jf.at("fid_composition").get<bool>();

  ModelParams p = init_params(dims, fc, 0);
  const auto& tensors = j.at("tensors");
  std::size_t seen = 0;
  for_each_tensor(p, [&](const std::string& name, Mat& m) {
    if (!tensors.contains(name))
      throw std::runtime_error("checkpoint is missing tensor " + name);
    detail::mat_from_json(tensors.at(name), m, name);
    ++seen;
  });
  if (tensors.size() != seen)
    throw std::runtime_error("checkpoint contains unknown tensors");
  return p;
}

inline void save_checkpoint(const ModelParams& p, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << checkpoint_to_json(p).dump() << '\n';
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

inline ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw std::runtime_error("corrupt checkpoint " + path.string() + ": " + e.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace mflip
