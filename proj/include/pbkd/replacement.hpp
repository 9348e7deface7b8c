#pragma once

// Depthwise-separable stand-ins for full 3x3 convolution blocks. A candidate
// is built from stacked units of depthwise 3x3 -> pointwise 1x1 -> batchnorm
// -> relu; the pointwise convs carry the channel expansion, so each unit
// costs a fraction of the replaced convolution.

#include <cstdint>
#include <string>

#include "pbkd/model.hpp"

namespace pbkd {

enum class CandidateKind { TwoLayer, ThreeLayer, TwoLayerSkip, ThreeLayerSkip };

inline constexpr CandidateKind kAllCandidates[] = {
    CandidateKind::TwoLayer,
    CandidateKind::ThreeLayer,
    CandidateKind::TwoLayerSkip,
    CandidateKind::ThreeLayerSkip,
};

const char* candidate_kind_name(CandidateKind k);
CandidateKind candidate_kind_from_name(const std::string& name);  // throws SpecError

struct ReplacementBlock {
    CandidateKind kind = CandidateKind::TwoLayer;
    int target_block = 0;  // 1-based index of the teacher block this replaces; 0 = unassigned
    Block block;
};

// Builds a candidate shaped to replace a conv with the given channel counts
// and stride. The first unit carries the stride and the expansion to c_out;
// later units are c_out -> c_out at stride 1. Skip variants sum the block
// input into the output before the final relu, through a 1x1 stride-matched
// projection when channel counts or stride differ, else as the identity.
// Weights come from the seeded initializer: equal seeds, equal bits.
ReplacementBlock build_candidate(CandidateKind kind, int c_in, int c_out, int stride, uint64_t seed);

// The shipped default, the two-layer candidate.
ReplacementBlock default_replacement(int c_in, int c_out, int stride, uint64_t seed);

// True for blocks installed from a candidate (used to freeze everything else
// during fine-tuning).
bool is_replacement_block(const Block& b);

}  // namespace pbkd
