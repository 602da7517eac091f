#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "relspray/errors.hpp"
#include "relspray/volume.hpp"

namespace relspray::nifti {

inline constexpr int kHeaderSize = 348;
inline constexpr int kVoxOffset = 352;

enum class Datatype : std::int16_t {
  UInt8 = 2,
  Int16 = 4,
  Int32 = 8,
  Float32 = 16,
  Float64 = 64,
};

class NiftiError : public DataError {
 public:
  enum class Code { Io, BadHeader, BadMagic, UnsupportedDatatype, Truncated };
  NiftiError(Code code, const std::string& what) : DataError(what), code_(code) {}
  Code code() const { return code_; }

 private:
  Code code_;
};

/// Single-file NIfTI-1 (.nii), little-endian. Reads apply scl_slope/scl_inter
/// when the slope is non-zero. Affine comes from sform, then qform, then pixdim.
Volume3D read(const std::filesystem::path& path);

/// All volumes along dim[4] (a 3D file yields one).
std::vector<Volume3D> read_series(const std::filesystem::path& path);

void write(const Volume3D& vol, const std::filesystem::path& path, Datatype dtype = Datatype::Float32);

/// Writes a 4D file; every volume must share a grid.
void write_series(const std::vector<Volume3D>& vols, const std::filesystem::path& path,
                  Datatype dtype = Datatype::Float32);

DisplacementField read_displacement(const std::filesystem::path& path);
void write_displacement(const DisplacementField& field, const std::filesystem::path& path);

}  // namespace relspray::nifti
