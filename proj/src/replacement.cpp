#include "pbkd/replacement.hpp"

#include <random>

namespace pbkd {

namespace {

// One composition unit. The final unit of a skip variant omits its relu; the
// skip sum and the closing relu are appended by the caller.
void append_unit(Block& b, int c_in, int c_out, int stride, bool with_relu) {
    b.layers.push_back(make_conv_layer(LayerKind::DepthwiseConv3x3, c_in, c_in, 3, stride, 1));
    b.layers.push_back(make_conv_layer(LayerKind::PointwiseConv, c_in, c_out, 1, 1, 0));
    b.layers.push_back(make_batchnorm_layer(c_out));
    if (with_relu) b.layers.push_back(make_relu_layer(c_out));
}

}  // namespace

const char* candidate_kind_name(CandidateKind k) {
    switch (k) {
        case CandidateKind::TwoLayer: return "two_layer";
        case CandidateKind::ThreeLayer: return "three_layer";
        case CandidateKind::TwoLayerSkip: return "two_layer_skip";
        case CandidateKind::ThreeLayerSkip: return "three_layer_skip";
    }
    return "unknown";
}

CandidateKind candidate_kind_from_name(const std::string& name) {
    for (CandidateKind k : kAllCandidates)
        if (name == candidate_kind_name(k)) return k;
    throw SpecError("unknown replacement candidate '" + name + "'");
}

ReplacementBlock build_candidate(CandidateKind kind, int c_in, int c_out, int stride,
                                 uint64_t seed) {
    if (c_in < 1 || c_out < 1)
        throw std::invalid_argument("build_candidate: channel counts must be >= 1, got " +
                                    std::to_string(c_in) + "->" + std::to_string(c_out));
    if (stride != 1 && stride != 2)
        throw std::invalid_argument("build_candidate: stride must be 1 or 2, got " +
                                    std::to_string(stride));
    ReplacementBlock r;
    r.kind = kind;
    Block& b = r.block;
    b.name = "replacement";
    b.spec_kind = candidate_kind_name(kind);
    b.replaceable = false;
    b.in_channels = c_in;
    b.out_channels = c_out;
    b.stride = stride;
    b.padding = 1;

    const bool skip = kind == CandidateKind::TwoLayerSkip || kind == CandidateKind::ThreeLayerSkip;
    const int units = (kind == CandidateKind::ThreeLayer || kind == CandidateKind::ThreeLayerSkip)
                          ? 3
                          : 2;
    append_unit(b, c_in, c_out, stride, true);
    for (int u = 1; u < units; ++u) {
        const bool last = u == units - 1;
        append_unit(b, c_out, c_out, 1, !(skip && last));
    }
    if (skip) {
        b.layers.push_back(make_add_layer(c_in, c_out, stride));
        b.layers.push_back(make_relu_layer(c_out));
    }

    std::mt19937_64 rng(seed);
    init_block_weights(b, rng);
    return r;
}

ReplacementBlock default_replacement(int c_in, int c_out, int stride, uint64_t seed) {
    return build_candidate(CandidateKind::TwoLayer, c_in, c_out, stride, seed);
}

bool is_replacement_block(const Block& b) {
    for (CandidateKind k : kAllCandidates)
        if (b.spec_kind == candidate_kind_name(k)) return true;
    return false;
}

}  // namespace pbkd
