#include "relspray/nifti.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>

namespace relspray::nifti {

namespace fs = std::filesystem;

namespace {

template <class T>
T get(const std::vector<char>& buf, std::size_t off) {
  T v;
  std::memcpy(&v, buf.data() + off, sizeof(T));
  return v;
}

template <class T>
void put(std::vector<char>& buf, std::size_t off, T v) {
  std::memcpy(buf.data() + off, &v, sizeof(T));
}

// Header field offsets.
constexpr std::size_t kDim = 40, kDatatype = 70, kBitpix = 72, kPixdim = 76, kVoxOffsetField = 108,
                      kSclSlope = 112, kSclInter = 116, kXyztUnits = 123, kDescrip = 148, kQformCode = 252,
                      kSformCode = 254, kQuatB = 256, kQOffX = 268, kSrowX = 280, kMagic = 344;

int bytes_per_voxel(Datatype dt) {
  switch (dt) {
    case Datatype::UInt8: return 1;
    case Datatype::Int16: return 2;
    case Datatype::Int32: return 4;
    case Datatype::Float32: return 4;
    case Datatype::Float64: return 8;
  }
  return 0;
}

bool supported(std::int16_t code) {
  return code == 2 || code == 4 || code == 8 || code == 16 || code == 64;
}

// Rotation + qfac from the upper 3x3 of an affine (columns normalised).
void mat_to_quatern(const Mat4& m, std::array<float, 3>& quat, std::array<float, 3>& offset, float& qfac) {
  double r[3][3];
  for (int c = 0; c < 3; ++c) {
    double n = 0.0;
    for (int rr = 0; rr < 3; ++rr) n += m[rr][c] * m[rr][c];
    n = std::sqrt(n);
    if (n == 0.0) n = 1.0;
    for (int rr = 0; rr < 3; ++rr) r[rr][c] = m[rr][c] / n;
  }
  const double det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) -
                     r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0]) +
                     r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
  qfac = det < 0 ? -1.0f : 1.0f;
  if (det < 0)
    for (int rr = 0; rr < 3; ++rr) r[rr][2] = -r[rr][2];
  double a = r[0][0] + r[1][1] + r[2][2] + 1.0, b, c, d;
  if (a > 0.5) {
    a = 0.5 * std::sqrt(a);
    b = 0.25 * (r[2][1] - r[1][2]) / a;
    c = 0.25 * (r[0][2] - r[2][0]) / a;
    d = 0.25 * (r[1][0] - r[0][1]) / a;
  } else {
    const double xd = 1.0 + r[0][0] - (r[1][1] + r[2][2]);
    const double yd = 1.0 + r[1][1] - (r[0][0] + r[2][2]);
    const double zd = 1.0 + r[2][2] - (r[0][0] + r[1][1]);
    if (xd > 1.0) {
      b = 0.5 * std::sqrt(xd);
      c = 0.25 * (r[0][1] + r[1][0]) / b;
      d = 0.25 * (r[0][2] + r[2][0]) / b;
      a = 0.25 * (r[2][1] - r[1][2]) / b;
    } else if (yd > 1.0) {
      c = 0.5 * std::sqrt(yd);
      b = 0.25 * (r[0][1] + r[1][0]) / c;
      d = 0.25 * (r[1][2] + r[2][1]) / c;
      a = 0.25 * (r[0][2] - r[2][0]) / c;
    } else {
      d = 0.5 * std::sqrt(zd);
      b = 0.25 * (r[0][2] + r[2][0]) / d;
      c = 0.25 * (r[1][2] + r[2][1]) / d;
      a = 0.25 * (r[1][0] - r[0][1]) / d;
    }
    if (a < 0.0) {
      b = -b;
      c = -c;
      d = -d;
    }
  }
  quat = {float(b), float(c), float(d)};
  offset = {float(m[0][3]), float(m[1][3]), float(m[2][3])};
}

Mat4 quatern_to_mat(double b, double c, double d, double qx, double qy, double qz, double dx, double dy, double dz,
                    double qfac) {
  double a = 1.0 - (b * b + c * c + d * d);
  if (a < 1e-7) {
    a = 1.0 / std::sqrt(b * b + c * c + d * d);
    b *= a;
    c *= a;
    d *= a;
    a = 0.0;
  } else {
    a = std::sqrt(a);
  }
  const double zs = qfac < 0 ? -dz : dz;
  Mat4 m = identity4();
  m[0][0] = (a * a + b * b - c * c - d * d) * dx;
  m[0][1] = 2 * (b * c - a * d) * dy;
  m[0][2] = 2 * (b * d + a * c) * zs;
  m[1][0] = 2 * (b * c + a * d) * dx;
  m[1][1] = (a * a + c * c - b * b - d * d) * dy;
  m[1][2] = 2 * (c * d - a * b) * zs;
  m[2][0] = 2 * (b * d - a * c) * dx;
  m[2][1] = 2 * (c * d + a * b) * dy;
  m[2][2] = (a * a + d * d - c * c - b * b) * zs;
  m[0][3] = qx;
  m[1][3] = qy;
  m[2][3] = qz;
  return m;
}

struct Parsed {
  Grid grid;
  int nvols = 1;
  Datatype dtype = Datatype::Float32;
  double slope = 0.0, inter = 0.0;
  std::size_t vox_offset = kVoxOffset;
};

Parsed parse_header(const std::vector<char>& buf, const fs::path& path) {
  if (buf.size() < static_cast<std::size_t>(kHeaderSize))
    throw NiftiError(NiftiError::Code::Truncated, path.string() + ": file shorter than the 348-byte header");
  const auto sizeof_hdr = get<std::int32_t>(buf, 0);
  if (sizeof_hdr != kHeaderSize) {
    std::int32_t swapped = static_cast<std::int32_t>(__builtin_bswap32(static_cast<std::uint32_t>(sizeof_hdr)));
    if (swapped == kHeaderSize)
      throw NiftiError(NiftiError::Code::BadHeader, path.string() + ": big-endian NIfTI is not supported");
    throw NiftiError(NiftiError::Code::BadHeader, path.string() + ": sizeof_hdr is not 348");
  }
  if (std::memcmp(buf.data() + kMagic, "n+1\0", 4) != 0)
    throw NiftiError(NiftiError::Code::BadMagic, path.string() + ": magic is not \"n+1\" (single-file NIfTI-1)");
  const auto dt = get<std::int16_t>(buf, kDatatype);
  if (!supported(dt))
    throw NiftiError(NiftiError::Code::UnsupportedDatatype,
                     path.string() + ": unsupported datatype code " + std::to_string(dt));

  Parsed p;
  p.dtype = static_cast<Datatype>(dt);
  std::array<std::int16_t, 8> dim{};
  for (int i = 0; i < 8; ++i) dim[i] = get<std::int16_t>(buf, kDim + 2 * i);
  if (dim[0] < 1 || dim[0] > 7) throw NiftiError(NiftiError::Code::BadHeader, path.string() + ": invalid dim[0]");
  for (int a = 0; a < 3; ++a) p.grid.dims[a] = (a + 1 <= dim[0] && dim[a + 1] > 0) ? dim[a + 1] : 1;
  p.nvols = 1;
  for (int a = 4; a <= dim[0]; ++a) p.nvols *= std::max<int>(1, dim[a]);

  std::array<float, 8> pixdim{};
  for (int i = 0; i < 8; ++i) pixdim[i] = get<float>(buf, kPixdim + 4 * i);
  for (int a = 0; a < 3; ++a) {
    const double s = std::abs(pixdim[a + 1]);
    p.grid.spacing[a] = s > 0.0 ? s : 1.0;
  }

  const auto qcode = get<std::int16_t>(buf, kQformCode);
  const auto scode = get<std::int16_t>(buf, kSformCode);
  if (scode > 0) {
    Mat4 m = identity4();
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 4; ++c) m[r][c] = get<float>(buf, kSrowX + 16 * r + 4 * c);
    p.grid.grid_to_world = m;
  } else if (qcode > 0) {
    const double qfac = pixdim[0] < 0 ? -1.0 : 1.0;
    p.grid.grid_to_world =
        quatern_to_mat(get<float>(buf, kQuatB), get<float>(buf, kQuatB + 4), get<float>(buf, kQuatB + 8),
                       get<float>(buf, kQOffX), get<float>(buf, kQOffX + 4), get<float>(buf, kQOffX + 8),
                       p.grid.spacing[0], p.grid.spacing[1], p.grid.spacing[2], qfac);
  } else {
    p.grid.grid_to_world = Grid::make(p.grid.dims, p.grid.spacing).grid_to_world;
  }

  p.slope = get<float>(buf, kSclSlope);
  p.inter = get<float>(buf, kSclInter);
  const float vo = get<float>(buf, kVoxOffsetField);
  p.vox_offset = vo >= kHeaderSize ? static_cast<std::size_t>(vo) : static_cast<std::size_t>(kVoxOffset);
  return p;
}

std::vector<char> slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NiftiError(NiftiError::Code::Io, "cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto n = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<char> buf(n);
  in.read(buf.data(), static_cast<std::streamsize>(n));
  return buf;
}

template <class T>
void decode(const char* src, std::size_t n, double slope, double inter, double* dst) {
  for (std::size_t i = 0; i < n; ++i) {
    T v;
    std::memcpy(&v, src + i * sizeof(T), sizeof(T));
    dst[i] = slope != 0.0 ? static_cast<double>(v) * slope + inter : static_cast<double>(v);
  }
}

template <class T>
void encode(const std::vector<double>& src, char* dst) {
  for (std::size_t i = 0; i < src.size(); ++i) {
    T v;
    if constexpr (std::is_integral_v<T>) {
      const double lo = static_cast<double>(std::numeric_limits<T>::min());
      const double hi = static_cast<double>(std::numeric_limits<T>::max());
      v = static_cast<T>(std::clamp(std::round(src[i]), lo, hi));
    } else {
      v = static_cast<T>(src[i]);
    }
    std::memcpy(dst + i * sizeof(T), &v, sizeof(T));
  }
}

std::vector<char> make_header(const Grid& g, int nvols, Datatype dtype) {
  std::vector<char> h(kVoxOffset, 0);
  put<std::int32_t>(h, 0, kHeaderSize);
  const std::int16_t ndim = nvols > 1 ? 4 : 3;
  put<std::int16_t>(h, kDim, ndim);
  for (int a = 0; a < 3; ++a) put<std::int16_t>(h, kDim + 2 * (a + 1), static_cast<std::int16_t>(g.dims[a]));
  put<std::int16_t>(h, kDim + 8, static_cast<std::int16_t>(nvols));
  for (int a = 5; a < 8; ++a) put<std::int16_t>(h, kDim + 2 * a, 1);
  put<std::int16_t>(h, kDatatype, static_cast<std::int16_t>(dtype));
  put<std::int16_t>(h, kBitpix, static_cast<std::int16_t>(8 * bytes_per_voxel(dtype)));

  std::array<float, 3> quat{}, qoff{};
  float qfac = 1.0f;
  mat_to_quatern(g.grid_to_world, quat, qoff, qfac);
  put<float>(h, kPixdim, qfac);
  for (int a = 0; a < 3; ++a) put<float>(h, kPixdim + 4 * (a + 1), static_cast<float>(g.spacing[a]));
  put<float>(h, kPixdim + 16, 1.0f);
  put<float>(h, kVoxOffsetField, static_cast<float>(kVoxOffset));
  put<float>(h, kSclSlope, 1.0f);
  put<float>(h, kSclInter, 0.0f);
  h[kXyztUnits] = 2 | 8;  // mm, s
  const char descr[] = "relspray";
  std::memcpy(h.data() + kDescrip, descr, sizeof(descr) - 1);
  put<std::int16_t>(h, kQformCode, 2);
  put<std::int16_t>(h, kSformCode, 2);
  for (int i = 0; i < 3; ++i) {
    put<float>(h, kQuatB + 4 * i, quat[i]);
    put<float>(h, kQOffX + 4 * i, qoff[i]);
  }
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) put<float>(h, kSrowX + 16 * r + 4 * c, static_cast<float>(g.grid_to_world[r][c]));
  std::memcpy(h.data() + kMagic, "n+1\0", 4);
  return h;
}

}  // namespace

std::vector<Volume3D> read_series(const fs::path& path) {
  const std::vector<char> buf = slurp(path);
  const Parsed p = parse_header(buf, path);
  const std::size_t nvox = p.grid.voxel_count();
  const std::size_t bpv = static_cast<std::size_t>(bytes_per_voxel(p.dtype));
  const std::size_t need = p.vox_offset + nvox * bpv * static_cast<std::size_t>(p.nvols);
  if (buf.size() < need)
    throw NiftiError(NiftiError::Code::Truncated, path.string() + ": data section truncated (" +
                                                      std::to_string(buf.size()) + " < " + std::to_string(need) +
                                                      " bytes)");
  std::vector<Volume3D> vols;
  vols.reserve(p.nvols);
  for (int v = 0; v < p.nvols; ++v) {
    Volume3D vol(p.grid);
    const char* src = buf.data() + p.vox_offset + static_cast<std::size_t>(v) * nvox * bpv;
    switch (p.dtype) {
      case Datatype::UInt8: decode<std::uint8_t>(src, nvox, p.slope, p.inter, vol.data.data()); break;
      case Datatype::Int16: decode<std::int16_t>(src, nvox, p.slope, p.inter, vol.data.data()); break;
      case Datatype::Int32: decode<std::int32_t>(src, nvox, p.slope, p.inter, vol.data.data()); break;
      case Datatype::Float32: decode<float>(src, nvox, p.slope, p.inter, vol.data.data()); break;
      case Datatype::Float64: decode<double>(src, nvox, p.slope, p.inter, vol.data.data()); break;
    }
    vols.push_back(std::move(vol));
  }
  return vols;
}

Volume3D read(const fs::path& path) {
  auto vols = read_series(path);
  return std::move(vols.front());
}

void write_series(const std::vector<Volume3D>& vols, const fs::path& path, Datatype dtype) {
  if (vols.empty()) throw DataError("write_series: no volumes");
  const Grid& g = vols.front().grid;
  for (const auto& v : vols) {
    v.validate();
    if (!v.grid.same_as(g)) throw DataError("write_series: volumes do not share a grid");
  }
  for (int a = 0; a < 3; ++a)
    if (g.dims[a] > 32767) throw DataError("dimension too large for NIfTI-1");
  std::vector<char> out = make_header(g, static_cast<int>(vols.size()), dtype);
  const std::size_t bpv = static_cast<std::size_t>(bytes_per_voxel(dtype));
  const std::size_t nvox = g.voxel_count();
  out.resize(kVoxOffset + vols.size() * nvox * bpv);
  for (std::size_t v = 0; v < vols.size(); ++v) {
    char* dst = out.data() + kVoxOffset + v * nvox * bpv;
    switch (dtype) {
      case Datatype::UInt8: encode<std::uint8_t>(vols[v].data, dst); break;
      case Datatype::Int16: encode<std::int16_t>(vols[v].data, dst); break;
      case Datatype::Int32: encode<std::int32_t>(vols[v].data, dst); break;
      case Datatype::Float32: encode<float>(vols[v].data, dst); break;
      case Datatype::Float64: encode<double>(vols[v].data, dst); break;
    }
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw NiftiError(NiftiError::Code::Io, "cannot write " + path.string());
  os.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!os) throw NiftiError(NiftiError::Code::Io, "write failed for " + path.string());
}

void write(const Volume3D& vol, const fs::path& path, Datatype dtype) { write_series({vol}, path, dtype); }

DisplacementField read_displacement(const fs::path& path) {
  auto vols = read_series(path);
  if (vols.size() != 3)
    throw DataError(path.string() + ": displacement field needs dim[4] = 3, found " + std::to_string(vols.size()));
  DisplacementField f{std::move(vols[0]), std::move(vols[1]), std::move(vols[2])};
  f.validate();
  return f;
}

void write_displacement(const DisplacementField& field, const fs::path& path) {
  field.validate();
  write_series({field.dx, field.dy, field.dz}, path, Datatype::Float32);
}

}  // namespace relspray::nifti
