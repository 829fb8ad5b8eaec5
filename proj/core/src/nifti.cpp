#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "medpeft/volume_io.hpp"

namespace medpeft {

namespace {

constexpr int kHeaderSize = 348;
constexpr int kVoxOffset = 352;

// NIfTI-1 datatype codes.
enum : int16_t {
  kUInt8 = 2,
  kInt16 = 4,
  kInt32 = 8,
  kFloat32 = 16,
  kFloat64 = 64,
  kInt8 = 256,
  kUInt16 = 512,
  kUInt32 = 768,
  kInt64 = 1024,
};

bool has_gz_suffix(const std::filesystem::path& p) { return p.extension() == ".gz"; }

template <typename T>
T read_at(const unsigned char* buf, size_t offset, bool swap) {
  T v;
  std::memcpy(&v, buf + offset, sizeof(T));
  if (swap) {
    auto* b = reinterpret_cast<unsigned char*>(&v);
    std::reverse(b, b + sizeof(T));
  }
  return v;
}

template <typename T>
void write_at(unsigned char* buf, size_t offset, T v) {
  std::memcpy(buf + offset, &v, sizeof(T));
}

std::vector<unsigned char> slurp(const std::filesystem::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) fail(ErrorKind::IoError, "cannot open " + path.string());
  std::vector<unsigned char> out;
  std::vector<unsigned char> chunk(1 << 20);
  for (;;) {
    const int n = gzread(f, chunk.data(), static_cast<unsigned>(chunk.size()));
    if (n < 0) {
      gzclose(f);
      fail(ErrorKind::IoError, "read error in " + path.string());
    }
    if (n == 0) break;
    out.insert(out.end(), chunk.begin(), chunk.begin() + n);
  }
  gzclose(f);
  return out;
}

void spill(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  if (has_gz_suffix(path)) {
    gzFile f = gzopen(path.string().c_str(), "wb6");
    if (!f) fail(ErrorKind::IoError, "cannot write " + path.string());
    const int n = gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
    gzclose(f);
    if (n != static_cast<int>(bytes.size())) fail(ErrorKind::IoError, "short write to " + path.string());
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::IoError, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::IoError, "short write to " + path.string());
}

Affine qform_to_affine(double b, double c, double d, double qx, double qy, double qz,
                       const std::array<double, 3>& pix, double qfac) {
  const double a2 = 1.0 - (b * b + c * c + d * d);
  double a = 0.0;
  if (a2 < 1e-7) {
    const double norm = 1.0 / std::sqrt(b * b + c * c + d * d);
    b *= norm;
    c *= norm;
    d *= norm;
  } else {
    a = std::sqrt(a2);
  }
  const double r[3][3] = {{a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)},
                          {2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)},
                          {2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b}};
  const double scale[3] = {pix[0], pix[1], pix[2] * qfac};
  Affine out;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) out(i, j) = r[i][j] * scale[j];
  out(0, 3) = qx;
  out(1, 3) = qy;
  out(2, 3) = qz;
  return out;
}

}  // namespace

NiftiImage read_nifti(const std::filesystem::path& path) {
  const std::vector<unsigned char> bytes = slurp(path);
  if (bytes.size() < kHeaderSize) fail(ErrorKind::IoError, path.string() + " is too short for a NIfTI header");
  const unsigned char* h = bytes.data();

  bool swap = false;
  if (read_at<int32_t>(h, 0, false) != kHeaderSize) {
    if (read_at<int32_t>(h, 0, true) != kHeaderSize) fail(ErrorKind::IoError, path.string() + " is not NIfTI-1");
    swap = true;
  }
  if (std::memcmp(h + 344, "n+1", 3) != 0 && std::memcmp(h + 344, "ni1", 3) != 0) {
    fail(ErrorKind::IoError, path.string() + " has bad NIfTI magic");
  }

  int16_t dim[8];
  for (int i = 0; i < 8; ++i) dim[i] = read_at<int16_t>(h, 40 + 2 * static_cast<size_t>(i), swap);
  const int ndim = dim[0];
  if (ndim < 1 || ndim > 5) fail(ErrorKind::IoError, "unsupported NIfTI dimensionality in " + path.string());
  auto extent = [&](int i) -> int64_t { return (i <= ndim && dim[i] > 0) ? dim[i] : 1; };
  const Dims3 d{extent(1), extent(2), extent(3)};
  const int64_t comps = extent(4) * extent(5);

  const int16_t datatype = read_at<int16_t>(h, 70, swap);
  float pixdim[8];
  for (int i = 0; i < 8; ++i) pixdim[i] = read_at<float>(h, 76 + 4 * static_cast<size_t>(i), swap);
  const auto vox_offset = static_cast<size_t>(read_at<float>(h, 108, swap));
  float slope = read_at<float>(h, 112, swap);
  const float inter = read_at<float>(h, 116, swap);
  if (slope == 0.0f || !std::isfinite(slope)) slope = 1.0f;

  size_t elem = 0;
  switch (datatype) {
    case kUInt8:
    case kInt8: elem = 1; break;
    case kInt16:
    case kUInt16: elem = 2; break;
    case kInt32:
    case kUInt32:
    case kFloat32: elem = 4; break;
    case kFloat64:
    case kInt64: elem = 8; break;
    default: fail(ErrorKind::IoError, "unsupported NIfTI datatype " + std::to_string(datatype));
  }
  const int64_t n = d.voxels() * comps;
  if (bytes.size() < vox_offset + static_cast<size_t>(n) * elem) {
    fail(ErrorKind::IoError, path.string() + " is truncated");
  }
  const unsigned char* payload = h + vox_offset;
  auto value = [&](int64_t i) -> double {
    const size_t off = static_cast<size_t>(i) * elem;
    switch (datatype) {
      case kUInt8: return payload[off];
      case kInt8: return static_cast<int8_t>(payload[off]);
      case kInt16: return read_at<int16_t>(payload, off, swap);
      case kUInt16: return read_at<uint16_t>(payload, off, swap);
      case kInt32: return read_at<int32_t>(payload, off, swap);
      case kUInt32: return read_at<uint32_t>(payload, off, swap);
      case kFloat32: return read_at<float>(payload, off, swap);
      case kFloat64: return read_at<double>(payload, off, swap);
      case kInt64: return static_cast<double>(read_at<int64_t>(payload, off, swap));
      default: return 0.0;
    }
  };

  NiftiImage img;
  img.data = Tensor<float>::feature_map(comps, d);
  // File order is x fastest; ours is z fastest.
  int64_t i = 0;
  for (int64_t c = 0; c < comps; ++c)
    for (int64_t z = 0; z < d.z; ++z)
      for (int64_t y = 0; y < d.y; ++y)
        for (int64_t x = 0; x < d.x; ++x, ++i) {
          img.data.at(c, x, y, z) = static_cast<float>(value(i) * slope + inter);
        }

  img.pixdim = {std::abs(pixdim[1]) > 0 ? std::abs(pixdim[1]) : 1.0, std::abs(pixdim[2]) > 0 ? std::abs(pixdim[2]) : 1.0,
                std::abs(pixdim[3]) > 0 ? std::abs(pixdim[3]) : 1.0};
  const int16_t qform_code = read_at<int16_t>(h, 252, swap);
  const int16_t sform_code = read_at<int16_t>(h, 254, swap);
  if (sform_code > 0) {
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 4; ++c) img.affine(r, c) = read_at<float>(h, 280 + 16 * static_cast<size_t>(r) + 4 * static_cast<size_t>(c), swap);
  } else if (qform_code > 0) {
    const double qfac = pixdim[0] < 0 ? -1.0 : 1.0;
    img.affine = qform_to_affine(read_at<float>(h, 256, swap), read_at<float>(h, 260, swap), read_at<float>(h, 264, swap),
                                 read_at<float>(h, 268, swap), read_at<float>(h, 272, swap), read_at<float>(h, 276, swap),
                                 img.pixdim, qfac);
  } else {
    img.affine = Affine::diagonal(img.pixdim[0], img.pixdim[1], img.pixdim[2]);
  }
  return img;
}

void write_nifti(const std::filesystem::path& path, const Tensor<float>& data, const Affine& affine, bool as_labels) {
  if (data.rank() != 4) fail(ErrorKind::ShapeMismatch, "write_nifti expects (C,X,Y,Z) data");
  const Dims3 d = data.spatial();
  const int64_t comps = data.channels();
  const size_t elem = as_labels ? 2 : 4;
  std::vector<unsigned char> bytes(kVoxOffset + static_cast<size_t>(d.voxels() * comps) * elem, 0);
  unsigned char* h = bytes.data();

  write_at<int32_t>(h, 0, kHeaderSize);
  const int16_t dims[8] = {static_cast<int16_t>(comps > 1 ? 4 : 3), static_cast<int16_t>(d.x), static_cast<int16_t>(d.y),
                           static_cast<int16_t>(d.z), static_cast<int16_t>(comps), 1, 1, 1};
  for (int i = 0; i < 8; ++i) write_at<int16_t>(h, 40 + 2 * static_cast<size_t>(i), dims[i]);
  write_at<int16_t>(h, 70, as_labels ? kInt16 : kFloat32);
  write_at<int16_t>(h, 72, static_cast<int16_t>(elem * 8));
  const auto spacing = affine.column_norms();
  const float pixdim[8] = {1.0f, static_cast<float>(spacing[0]), static_cast<float>(spacing[1]),
                           static_cast<float>(spacing[2]), 1.0f, 1.0f, 1.0f, 1.0f};
  for (int i = 0; i < 8; ++i) write_at<float>(h, 76 + 4 * static_cast<size_t>(i), pixdim[i]);
  write_at<float>(h, 108, static_cast<float>(kVoxOffset));
  write_at<float>(h, 112, 1.0f);
  write_at<float>(h, 116, 0.0f);
  write_at<char>(h, 123, 2);  // mm
  write_at<int16_t>(h, 252, 0);
  write_at<int16_t>(h, 254, 1);  // scanner anat
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c)
      write_at<float>(h, 280 + 16 * static_cast<size_t>(r) + 4 * static_cast<size_t>(c), static_cast<float>(affine(r, c)));
  std::memcpy(h + 344, "n+1\0", 4);

  unsigned char* payload = h + kVoxOffset;
  size_t off = 0;
  for (int64_t c = 0; c < comps; ++c)
    for (int64_t z = 0; z < d.z; ++z)
      for (int64_t y = 0; y < d.y; ++y)
        for (int64_t x = 0; x < d.x; ++x) {
          const float v = data.at(c, x, y, z);
          if (as_labels) {
            write_at<int16_t>(payload, off, static_cast<int16_t>(std::lround(v)));
          } else {
            write_at<float>(payload, off, v);
          }
          off += elem;
        }
  spill(path, bytes);
}

void write_nifti_labels(const std::filesystem::path& path, const LabelMap& labels, const Affine& affine) {
  Tensor<float> t = Tensor<float>::feature_map(1, labels.dims);
  for (int64_t i = 0; i < labels.dims.voxels(); ++i) t[i] = static_cast<float>(labels[i]);
  write_nifti(path, t, affine, true);
}

}  // namespace medpeft
