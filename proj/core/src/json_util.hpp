#pragma once

#include <json.hpp>

#include <filesystem>
#include <fstream>

#include "medpeft/error.hpp"
#include "medpeft/volume.hpp"

namespace medpeft::detail {

using nlohmann::json;

inline json affine_to_json(const Affine& a) {
  json rows = json::array();
  for (int r = 0; r < 4; ++r) rows.push_back({a(r, 0), a(r, 1), a(r, 2), a(r, 3)});
  return rows;
}

inline Affine affine_from_json(const json& j) {
  Affine a;
  if (!j.is_array() || j.size() != 4) fail(ErrorKind::SchemaMismatch, "affine must be a 4x4 array");
  for (int r = 0; r < 4; ++r) {
    const json& row = j.at(static_cast<size_t>(r));
    if (!row.is_array() || row.size() != 4) fail(ErrorKind::SchemaMismatch, "affine must be a 4x4 array");
    for (int c = 0; c < 4; ++c) a(r, c) = row.at(static_cast<size_t>(c)).get<double>();
  }
  return a;
}

inline json semantics_to_json(const LabelSemantics& s) {
  json out = json::object();
  for (const auto& [k, v] : s) out[std::to_string(k)] = to_string(v);
  return out;
}

inline LabelSemantics semantics_from_json(const json& j) {
  LabelSemantics s;
  for (const auto& [k, v] : j.items()) s[std::stoi(k)] = label_class_from_string(v.get<std::string>());
  return s;
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::IoError, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorKind::SchemaMismatch, path.string() + ": " + e.what());
  }
}

inline void write_json_file(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::IoError, "cannot write " + path.string());
  out << j.dump(2) << "\n";
  if (!out) fail(ErrorKind::IoError, "short write to " + path.string());
}

}  // namespace medpeft::detail
