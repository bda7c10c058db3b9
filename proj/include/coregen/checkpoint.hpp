#pragma once

#include "coregen/model.hpp"

#include <string>

namespace coregen {

// Checkpoint container, one file:
//   bytes 0..3   magic "CGCK"
//   bytes 4..7   header length N, little-endian uint32
//   bytes 8..    UTF-8 JSON header: version, config, stage, seed, step and
//                the ordered name/rows/cols table
//   then one float64 little-endian array per table entry, row-major,
//   in header order.
void save_checkpoint(const ParameterStore& store, const std::string& path);

// Loads and fully validates; never returns a partial store. When `expected`
// is given, the stored config must match it exactly.
ParameterStore load_checkpoint(const std::string& path,
                               const ModelConfig* expected = nullptr);

}  // namespace coregen
