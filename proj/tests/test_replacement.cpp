#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "pbkd/model.hpp"
#include "pbkd/replacement.hpp"

using namespace pbkd;

namespace {

// Conv-kernel MACs/params of a block evaluated at a given input size.
std::pair<long long, long long> conv_cost(const Block& b, int c, int h, int w) {
    CostTable t = count_block_cost(b, c, h, w);
    return {t.conv_macs(), t.conv_params()};
}

// The teacher conv3x3 block a candidate would replace.
Block conv_block(int c_in, int c_out, int stride) {
    Block b;
    b.name = "orig";
    b.spec_kind = "conv3x3";
    b.in_channels = c_in;
    b.out_channels = c_out;
    b.stride = stride;
    b.layers.push_back(make_conv_layer(LayerKind::Conv3x3, c_in, c_out, 3, stride, 1));
    b.layers.push_back(make_batchnorm_layer(c_out));
    b.layers.push_back(make_relu_layer(c_out));
    std::mt19937_64 rng(3);
    init_block_weights(b, rng);
    return b;
}

Tensor random_input(int n, int c, int h, int w, uint64_t seed, float lo = 0.0f, float hi = 1.0f) {
    Tensor x(n, c, h, w);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> dist(lo, hi);
    for (auto& v : x.data) v = dist(rng);
    return x;
}

}  // namespace

TEST_CASE("candidate kinds round-trip through their names") {
    for (CandidateKind k : kAllCandidates)
        CHECK(candidate_kind_from_name(candidate_kind_name(k)) == k);
    CHECK_THROWS_AS(candidate_kind_from_name("four_layer"), SpecError);
}

TEST_CASE("every candidate preserves the replaced block's output shape") {
    const struct {
        int c_in, c_out, stride;
    } combos[] = {{16, 16, 1}, {16, 32, 2}, {8, 24, 1}, {32, 32, 2}};
    for (const auto& cmb : combos) {
        Block orig = conv_block(cmb.c_in, cmb.c_out, cmb.stride);
        Tensor x = random_input(2, cmb.c_in, 16, 16, 17);
        Tensor want = block_infer(orig, x);
        for (CandidateKind k : kAllCandidates) {
            ReplacementBlock cand = build_candidate(k, cmb.c_in, cmb.c_out, cmb.stride, 5);
            Tensor got = block_infer(cand.block, x);
            CHECK(got.n == want.n);
            CHECK(got.c == want.c);
            CHECK(got.h == want.h);
            CHECK(got.w == want.w);
            CHECK(is_replacement_block(cand.block));
        }
    }
}

TEST_CASE("candidate construction is deterministic in the seed") {
    ReplacementBlock a = build_candidate(CandidateKind::ThreeLayerSkip, 16, 32, 2, 77);
    ReplacementBlock b = build_candidate(CandidateKind::ThreeLayerSkip, 16, 32, 2, 77);
    REQUIRE(a.block.layers.size() == b.block.layers.size());
    for (size_t i = 0; i < a.block.layers.size(); ++i) {
        CHECK(a.block.layers[i].weight.data == b.block.layers[i].weight.data);
        CHECK(a.block.layers[i].gamma.data == b.block.layers[i].gamma.data);
    }
    ReplacementBlock c = build_candidate(CandidateKind::ThreeLayerSkip, 16, 32, 2, 78);
    CHECK(a.block.layers[0].weight.data != c.block.layers[0].weight.data);
}

TEST_CASE("build_candidate validates its arguments") {
    CHECK_THROWS_AS(build_candidate(CandidateKind::TwoLayer, 0, 8, 1, 1), std::invalid_argument);
    CHECK_THROWS_AS(build_candidate(CandidateKind::TwoLayer, 8, 8, 3, 1), std::invalid_argument);
}

TEST_CASE("one separable unit costs (9+C)/(9C) of the convolution, exactly") {
    // Cross-multiplied integer identity: unit_macs * 9C == conv_macs * (9+C).
    for (int c : {5, 16, 64, 128}) {
        const int h = 16, w = 16;
        Block orig = conv_block(c, c, 1);
        auto [conv_macs, conv_params] = conv_cost(orig, c, h, w);

        // A single unit is the first half of the two-layer candidate:
        // depthwise + pointwise rows only.
        ReplacementBlock cand = build_candidate(CandidateKind::TwoLayer, c, c, 1, 1);
        CostTable t = count_block_cost(cand.block, c, h, w);
        long long unit_macs = 0, unit_params = 0;
        REQUIRE(t.rows.size() >= 2);
        for (size_t i = 0; i < 2; ++i) {  // depthwise_0 and pointwise_1
            unit_macs += t.rows[i].macs;
            unit_params += t.rows[i].params;
        }
        CHECK(unit_macs * 9 * c == conv_macs * (9 + c));
        CHECK(unit_params * 9 * c == conv_params * (9 + c));
    }

    // At C = 64 the ratio rounds to 0.12674 at five decimals.
    const double ratio = (9.0 + 64.0) / (9.0 * 64.0);
    CHECK(std::round(ratio * 1e5) / 1e5 == doctest::Approx(0.12674));
}

TEST_CASE("two- and three-layer candidates cost 2x and 3x the unit ratio") {
    for (int c : {8, 64}) {
        const int h = 12, w = 12;
        Block orig = conv_block(c, c, 1);
        auto [conv_macs, conv_params] = conv_cost(orig, c, h, w);

        ReplacementBlock two = build_candidate(CandidateKind::TwoLayer, c, c, 1, 1);
        auto [two_macs, two_params] = conv_cost(two.block, c, h, w);
        CHECK(two_macs * 9 * c == conv_macs * 2 * (9 + c));
        CHECK(two_params * 9 * c == conv_params * 2 * (9 + c));

        ReplacementBlock three = build_candidate(CandidateKind::ThreeLayer, c, c, 1, 1);
        auto [three_macs, three_params] = conv_cost(three.block, c, h, w);
        CHECK(three_macs * 9 * c == conv_macs * 3 * (9 + c));
        CHECK(three_params * 9 * c == conv_params * 3 * (9 + c));
    }
}

TEST_CASE("two-layer candidate at C=64 has 9344 conv parameters") {
    ReplacementBlock two = build_candidate(CandidateKind::TwoLayer, 64, 64, 1, 1);
    auto [macs, params] = conv_cost(two.block, 64, 8, 8);
    CHECK(params == 9344);  // 2 * (9*64 + 64*64)
    (void)macs;
}

TEST_CASE("candidates undercut the convolution for five or more channels") {
    // Below five channels the three-unit stack can exceed the 3x3 conv, so
    // the guarantee starts at C = 5.
    for (int c : {5, 6, 8, 16, 64}) {
        Block orig = conv_block(c, c, 1);
        auto [conv_macs, conv_params] = conv_cost(orig, c, 10, 10);
        for (CandidateKind k : kAllCandidates) {
            ReplacementBlock cand = build_candidate(k, c, c, 1, 1);
            auto [m, p] = conv_cost(cand.block, c, 10, 10);
            CHECK(m < conv_macs);
            CHECK(p < conv_params);
        }
    }
}

TEST_CASE("skip candidates with zeroed main path pass non-negative input through") {
    // Zero every conv weight: the main path emits batchnorm(0) = 0, the add
    // layer contributes the identity skip, and the final relu keeps x >= 0.
    ReplacementBlock cand = build_candidate(CandidateKind::TwoLayerSkip, 12, 12, 1, 9);
    for (LayerParams& l : cand.block.layers) {
        for (auto& v : l.weight.data) v = 0.0f;
        for (auto& v : l.beta.data) v = 0.0f;
    }
    Tensor x = random_input(2, 12, 8, 8, 21, 0.0f, 1.0f);
    Tensor y = block_infer(cand.block, x);
    REQUIRE(y.size() == x.size());
    for (size_t i = 0; i < x.size(); ++i) CHECK(y.data[i] == doctest::Approx(x.data[i]));

    // With a projection (channel change) the skip is conv-backed, so zeroing
    // it too gives an all-zero output.
    ReplacementBlock proj = build_candidate(CandidateKind::ThreeLayerSkip, 12, 24, 2, 9);
    for (LayerParams& l : proj.block.layers) {
        for (auto& v : l.weight.data) v = 0.0f;
        for (auto& v : l.beta.data) v = 0.0f;
    }
    Tensor yp = block_infer(proj.block, x);
    for (float v : yp.data) CHECK(v == 0.0f);
}

TEST_CASE("skip variants carry a projection exactly when shape changes") {
    auto add_layer = [](const Block& b) -> const LayerParams& {
        for (const LayerParams& l : b.layers)
            if (l.kind == LayerKind::Add) return l;
        REQUIRE(false);
        return b.layers.front();
    };
    ReplacementBlock same = build_candidate(CandidateKind::TwoLayerSkip, 16, 16, 1, 1);
    CHECK(add_layer(same.block).weight.data.empty());
    ReplacementBlock grown = build_candidate(CandidateKind::TwoLayerSkip, 16, 32, 1, 1);
    CHECK_FALSE(add_layer(grown.block).weight.data.empty());
    ReplacementBlock strided = build_candidate(CandidateKind::TwoLayerSkip, 16, 16, 2, 1);
    CHECK_FALSE(add_layer(strided.block).weight.data.empty());
}

TEST_CASE("unit layer order is depthwise, pointwise, batchnorm, relu") {
    ReplacementBlock two = build_candidate(CandidateKind::TwoLayer, 8, 16, 2, 1);
    REQUIRE(two.block.layers.size() == 8);
    const LayerKind want[] = {LayerKind::DepthwiseConv3x3, LayerKind::PointwiseConv,
                              LayerKind::BatchNorm, LayerKind::ReLU};
    for (int u = 0; u < 2; ++u)
        for (int i = 0; i < 4; ++i) CHECK(two.block.layers[u * 4 + i].kind == want[i]);
    // Stride lives on the first depthwise layer only.
    CHECK(two.block.layers[0].stride == 2);
    CHECK(two.block.layers[4].stride == 1);
    // The expansion to c_out happens in the first pointwise layer.
    CHECK(two.block.layers[1].out_channels == 16);
}
