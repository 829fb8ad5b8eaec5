#include "medpeft/volume.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <sstream>

namespace medpeft {

namespace {

Eigen::Matrix4d to_eigen(const Affine& a) {
  Eigen::Matrix4d m;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) m(r, c) = a(r, c);
  return m;
}

Affine from_eigen(const Eigen::Matrix4d& m) {
  Affine a;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) a(r, c) = m(r, c);
  return a;
}

}  // namespace

const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::MissingModality: return "MissingModality";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::UnknownLabelValue: return "UnknownLabelValue";
    case ErrorKind::NonInvertibleAffine: return "NonInvertibleAffine";
    case ErrorKind::InvalidTarget: return "InvalidTarget";
    case ErrorKind::LesionDoesNotFit: return "LesionDoesNotFit";
    case ErrorKind::IoError: return "IoError";
    case ErrorKind::ChannelMismatch: return "ChannelMismatch";
    case ErrorKind::InvalidConfig: return "InvalidConfig";
    case ErrorKind::IncompatibleSite: return "IncompatibleSite";
    case ErrorKind::NoAdaptersAttached: return "NoAdaptersAttached";
    case ErrorKind::ArchitectureMismatch: return "ArchitectureMismatch";
    case ErrorKind::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorKind::EmptyCohort: return "EmptyCohort";
    case ErrorKind::LengthMismatch: return "LengthMismatch";
    case ErrorKind::TooFewCases: return "TooFewCases";
    case ErrorKind::NoRunsFound: return "NoRunsFound";
    case ErrorKind::SchemaMismatch: return "SchemaMismatch";
  }
  return "Error";
}

std::string to_string(const Dims3& d) {
  std::ostringstream os;
  os << d.x << "x" << d.y << "x" << d.z;
  return os.str();
}

std::string shape_string(const std::vector<int64_t>& shape) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ")";
  return os.str();
}

Affine Affine::diagonal(double sx, double sy, double sz) {
  Affine a;
  a(0, 0) = sx;
  a(1, 1) = sy;
  a(2, 2) = sz;
  return a;
}

std::array<double, 3> Affine::apply(double i, double j, double k) const noexcept {
  const Affine& a = *this;
  return {a(0, 0) * i + a(0, 1) * j + a(0, 2) * k + a(0, 3),
          a(1, 0) * i + a(1, 1) * j + a(1, 2) * k + a(1, 3),
          a(2, 0) * i + a(2, 1) * j + a(2, 2) * k + a(2, 3)};
}

double Affine::determinant() const { return to_eigen(*this).determinant(); }

bool Affine::invertible() const {
  const Eigen::Matrix4d m = to_eigen(*this);
  if (!m.allFinite()) return false;
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  return std::abs(m.determinant()) > 1e-12 * scale * scale * scale;
}

Affine Affine::inverse() const {
  if (!invertible()) fail(ErrorKind::NonInvertibleAffine, "affine matrix is singular");
  return from_eigen(to_eigen(*this).inverse());
}

Affine Affine::operator*(const Affine& o) const { return from_eigen(to_eigen(*this) * to_eigen(o)); }

std::array<double, 3> Affine::column_norms() const {
  const Affine& a = *this;
  std::array<double, 3> n{};
  for (int c = 0; c < 3; ++c) {
    n[static_cast<size_t>(c)] = std::sqrt(a(0, c) * a(0, c) + a(1, c) * a(1, c) + a(2, c) * a(2, c));
  }
  return n;
}

const char* to_string(LabelClass c) noexcept {
  switch (c) {
    case LabelClass::Background: return "BACKGROUND";
    case LabelClass::NETC: return "NETC";
    case LabelClass::SNFH: return "SNFH";
    case LabelClass::ET: return "ET";
  }
  return "BACKGROUND";
}

LabelClass label_class_from_string(const std::string& s) {
  if (s == "BACKGROUND") return LabelClass::Background;
  if (s == "NETC") return LabelClass::NETC;
  if (s == "SNFH") return LabelClass::SNFH;
  if (s == "ET") return LabelClass::ET;
  fail(ErrorKind::InvalidConfig, "unknown label class '" + s + "'");
}

LabelSemantics default_label_semantics() {
  return {{0, LabelClass::Background}, {1, LabelClass::NETC}, {2, LabelClass::SNFH}, {3, LabelClass::ET}};
}

std::vector<std::string> default_channel_names() { return {"t1c", "t1w", "flair", "t2w"}; }

void Volume::validate() const {
  if (data.rank() != 4) fail(ErrorKind::ShapeMismatch, "volume data must be (C,X,Y,Z)");
  if (data.channels() != static_cast<int64_t>(channel_names.size())) {
    fail(ErrorKind::ShapeMismatch, "volume has " + std::to_string(data.channels()) + " channels but " +
                                       std::to_string(channel_names.size()) + " channel names");
  }
  const Dims3 d = spatial();
  if (d.x < 1 || d.y < 1 || d.z < 1) fail(ErrorKind::ShapeMismatch, "spatial dims must be >= 1");
  if (!affine.invertible()) fail(ErrorKind::NonInvertibleAffine, "volume affine is singular");
}

void LabelMap::validate() const {
  if (static_cast<int64_t>(data.size()) != dims.voxels()) {
    fail(ErrorKind::ShapeMismatch, "label data size does not match dims");
  }
  for (int32_t v : data) {
    if (!label_semantics.contains(v)) {
      fail(ErrorKind::UnknownLabelValue, "label value " + std::to_string(v) + " has no semantics");
    }
  }
}

int LabelMap::label_for(LabelClass c) const {
  for (const auto& [value, cls] : label_semantics) {
    if (cls == c) return value;
  }
  return -1;
}

}  // namespace medpeft
