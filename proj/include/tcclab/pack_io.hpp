#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include "tcclab/trajectory.hpp"

namespace tcclab {

// Pack file layout (all integers and doubles little-endian):
//   magic "TCCPACK1" (8 bytes), version u32 = 1, fingerprint u64, d u32,
//   window_first i32, window_last i32, alpha f64, variant u8, pooling u8,
//   op count u32  -> 46-byte header.
// Each operator: step i32, layer i32, kind i32, mu_a (d f64), mu_b (d f64),
//   scale f64, rotation (d*d f64)  -> 12 + 8*(2d + 1 + d^2) bytes.

// Structural problems with the file itself (truncation, wrong magic/version,
// out-of-range enum bytes).
class PackFormatError : public std::runtime_error {
  public:
    explicit PackFormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// The file is well-formed but was produced under a different model/schedule/
// cache configuration.
class PackMismatchError : public std::runtime_error {
  public:
    explicit PackMismatchError(const std::string& msg) : std::runtime_error(msg) {}
};

void save_pack(const CalibrationPack& pack, std::size_t d_model, const std::string& path);

// Loads a pack and checks its fingerprint against the current configuration.
CalibrationPack load_pack(const std::string& path, std::uint64_t expected_fingerprint);

}  // namespace tcclab
