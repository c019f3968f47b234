#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mflip/structure.hpp"

namespace mflip {

// JSON-lines frame format, one object per line:
//   {"lattice": [[..3],[..3],[..3]], "species": [Z,...],
//    "positions": [[x,y,z],...], "fidelity": f, "energy": E,
//    "forces": [[fx,fy,fz],...], "stress": [[..3]x3],
//    "magmoms": [m,...]}           (magmoms optional)
// Units: Angstrom, eV, eV/A, eV/A^3, mu_B.

namespace detail {

inline nlohmann::json mat3_to_json(const Mat3& m) {
  nlohmann::json j = nlohmann::json::array();
  for (int r = 0; r < 3; ++r) j.push_back({m(r, 0), m(r, 1), m(r, 2)});
  return j;
}

inline Mat3 json_to_mat3(const nlohmann::json& j, const std::string& key) {
  if (!j.is_array() || j.size() != 3)
    throw std::invalid_argument(key + " must be a 3x3 array");
  Mat3 m;
  for (int r = 0; r < 3; ++r) {
    if (!j[r].is_array() || j[r].size() != 3)
      throw std::invalid_argument(key + " must be a 3x3 array");
    for (int c = 0; c < 3; ++c) m(r, c) = j[r][c].get<double>();
  }
  return m;
}

inline nlohmann::json matx3_to_json(const MatX3& m) {
  nlohmann::json j = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    j.push_back({m(r, 0), m(r, 1), m(r, 2)});
  return j;
}

inline MatX3 json_to_matx3(const nlohmann::json& j, const std::string& key) {
  if (!j.is_array()) throw std::invalid_argument(key + " must be an array");
  MatX3 m(static_cast<Eigen::Index>(j.size()), 3);
  for (std::size_t r = 0; r < j.size(); ++r) {
    if (!j[r].is_array() || j[r].size() != 3)
      throw std::invalid_argument(key + " rows must have 3 entries");
    for (int c = 0; c < 3; ++c)
      m(static_cast<Eigen::Index>(r), c) = j[r][c].get<double>();
  }
  return m;
}

}  // namespace detail

inline nlohmann::json frame_to_json(const LabeledFrame& f) {
  nlohmann::json j;
  j["lattice"] = detail::mat3_to_json(f.structure.lattice);
  j["species"] = f.structure.species;
  j["positions"] = detail::matx3_to_json(f.structure.positions);
  j["fidelity"] = f.fidelity;
  j["energy"] = f.energy;
  j["forces"] = detail::matx3_to_json(f.forces);
  j["stress"] = detail::mat3_to_json(f.stress);
  if (f.magmoms) {
    std::vector<double> m(f.magmoms->data(), f.magmoms->data() + f.magmoms->size());
    j["magmoms"] = m;
  }
  return j;
}

inline LabeledFrame frame_from_json(const nlohmann::json& j, int n_fidelities) {
  LabeledFrame f;
  f.structure.lattice = detail::json_to_mat3(j.at("lattice"), "lattice");
  f.structure.species = j.at("species").get<std::vector<int>>();
  f.structure.positions = detail::json_to_matx3(j.at("positions"), "positions");
  f.fidelity = j.at("fidelity").get<int>();
  f.energy = j.at("energy").get<double>();
  f.forces = detail::json_to_matx3(j.at("forces"), "forces");
  f.stress = symmetrize_stress(detail::json_to_mat3(j.at("stress"), "stress"));
  if (j.contains("magmoms")) {
    auto m = j.at("magmoms").get<std::vector<double>>();
    f.magmoms = Eigen::Map<const VecX>(m.data(), static_cast<Eigen::Index>(m.size()));
  }
  f.validate(n_fidelities);
  return f;
}

/// Parse a JSON-lines frame file. Errors carry the 1-based line number.
inline std::vector<LabeledFrame> parse_frames(const std::filesystem::path& path,
                                              int n_fidelities = 2) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<LabeledFrame> frames;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      frames.push_back(frame_from_json(nlohmann::json::parse(line), n_fidelities));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                               ": " + e.what());
    }
  }
  return frames;
}

/// Write frames as JSON lines. nlohmann serializes doubles with
/// shortest-round-trip precision, so parse_frames(write_frames(x)) == x.
inline void write_frames(const std::vector<LabeledFrame>& frames,
                         const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& f : frames) out << frame_to_json(f).dump() << '\n';
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace mflip
