#pragma once

// Weight checkpoint container. Binary little-endian layout:
//   magic "PBKD", format version u32, array count u32, then per array
//   { name length u16, name bytes, rank u8, dims u32 x rank, f32 payload }.
// Arrays are written in network traversal order and matched by name on load.

#include <cstdint>
#include <string>
#include <vector>

#include "pbkd/model.hpp"

namespace pbkd {

// Raised for unreadable or inconsistent weight files.
struct WeightsError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NamedArray {
    std::string name;
    std::vector<uint32_t> dims;
    std::vector<float> data;
};

void save_weights(const std::string& path, const std::vector<NamedArray>& arrays);
std::vector<NamedArray> load_weights(const std::string& path);

// Network round-trip. Loading validates that names and shapes match the
// network exactly (no extras, no gaps) before any tensor is touched.
std::vector<NamedArray> arrays_from_network(const Network& net);
void load_into_network(Network& net, const std::vector<NamedArray>& arrays,
                       const std::string& origin);

// Builds the network a student weight file describes: blocks whose arrays
// match the teacher structure keep it, blocks whose arrays follow the
// replacement naming (depthwise/pointwise units) are rebuilt as replacement
// blocks. Weights are loaded into the result.
Network rebuild_network_from_arrays(const Network& teacher_structure,
                                    const std::vector<NamedArray>& arrays,
                                    const std::string& origin);

// FNV-1a over the file bytes, for cross-run identity checks.
uint64_t file_hash(const std::string& path);

}  // namespace pbkd
