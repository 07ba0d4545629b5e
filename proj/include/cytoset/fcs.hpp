#pragma once

#include "cytoset/sample.hpp"
#include "cytoset/tensor.hpp"

#include <cstdint>
#include <vector>

namespace cyto {

/// Parses an FCS 3.0/3.1 byte stream (DATATYPE F float32, or I with
/// 16/32-bit words; both byte orders). Marker names come from $PnS when
/// present, else $PnN.
FcmSample parse_fcs(const std::vector<std::uint8_t>& bytes);

FcmSample parse_fcs_file(const std::string& path);

/// Fixture writer used by tests and the ingest round-trip checks.
struct FcsWriteOptions {
  bool fcs31 = true;        // FCS3.1 vs FCS3.0 header
  bool big_endian = false;
  char datatype = 'F';      // 'F' float32 or 'I' unsigned int
  int int_bits = 32;        // $PnB for 'I'
};

std::vector<std::uint8_t> write_fcs(const FcmSample& sample,
                                    const FcsWriteOptions& opts = {});

}  // namespace cyto
