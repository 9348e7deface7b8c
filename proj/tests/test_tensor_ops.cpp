#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "oracle_ref.hpp"
#include "pbkd/ops.hpp"
#include "pbkd/tensor.hpp"

using namespace pbkd;

namespace {

Tensor make_tensor(int n, int c, int h, int w, const std::vector<float>& vals) {
    Tensor t(n, c, h, w);
    REQUIRE(vals.size() == t.size());
    t.data = vals;
    return t;
}

Tensor random_tensor(int n, int c, int h, int w, std::mt19937_64& rng) {
    Tensor t(n, c, h, w);
    std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
    for (auto& v : t.data) v = dist(rng);
    return t;
}

}  // namespace

TEST_CASE("conv output dimension uses floor division") {
    CHECK(ops::conv_out_dim(16, 3, 1, 1) == 16);
    CHECK(ops::conv_out_dim(16, 3, 2, 1) == 8);
    CHECK(ops::conv_out_dim(15, 3, 2, 1) == 8);   // (15 + 2 - 3)/2 + 1
    CHECK(ops::conv_out_dim(5, 3, 2, 0) == 2);    // last row dropped
    CHECK(ops::conv_out_dim(1, 1, 2, 0) == 1);
    CHECK_THROWS_AS(ops::conv_out_dim(2, 5, 1, 0), ShapeError);
}

TEST_CASE("conv2d matches worked example") {
    // 3x3 input 1..9 with an all-ones 3x3 kernel sums every element.
    Tensor x = make_tensor(1, 1, 3, 3, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    Tensor k = make_tensor(1, 1, 3, 3, std::vector<float>(9, 1.0f));
    Tensor y = ops::conv2d_fwd(x, k, 1, 0);
    CHECK(y.n == 1);
    CHECK(y.c == 1);
    CHECK(y.h == 1);
    CHECK(y.w == 1);
    CHECK(y.data[0] == doctest::Approx(45.0f));

    // Same input padded by 1: center output still 45, corner sees a 2x2 patch.
    Tensor yp = ops::conv2d_fwd(x, k, 1, 1);
    CHECK(yp.h == 3);
    CHECK(yp.at(0, 0, 1, 1) == doctest::Approx(45.0f));
    CHECK(yp.at(0, 0, 0, 0) == doctest::Approx(1 + 2 + 4 + 5));
}

TEST_CASE("conv2d matches padded-buffer reference on random shapes") {
    std::mt19937_64 rng(7);
    const struct {
        int n, ci, h, w, co, k, stride, pad;
    } cases[] = {
        {2, 3, 8, 8, 5, 3, 1, 1}, {1, 4, 7, 9, 3, 3, 2, 1},
        {3, 1, 5, 5, 2, 1, 1, 0}, {1, 2, 6, 6, 4, 3, 2, 0},
    };
    for (const auto& tc : cases) {
        Tensor x = random_tensor(tc.n, tc.ci, tc.h, tc.w, rng);
        Tensor k = random_tensor(tc.co, tc.ci, tc.k, tc.k, rng);
        Tensor y = ops::conv2d_fwd(x, k, tc.stride, tc.pad);
        oracle::ConvResult ref = oracle::conv_ref(oracle::to_flat(x), tc.n, tc.ci, tc.h, tc.w,
                                                  oracle::to_flat(k), tc.co, tc.k, tc.stride, tc.pad);
        REQUIRE(y.h == ref.ho);
        REQUIRE(y.w == ref.wo);
        REQUIRE(y.size() == ref.data.size());
        for (size_t i = 0; i < y.size(); ++i)
            CHECK(y.data[i] == doctest::Approx(ref.data[i]).epsilon(1e-4));
    }
}

TEST_CASE("conv2d rejects channel mismatch") {
    Tensor x(1, 3, 4, 4);
    Tensor k(2, 4, 3, 3);
    CHECK_THROWS_AS(ops::conv2d_fwd(x, k, 1, 1), ShapeError);
}

TEST_CASE("depthwise conv matches worked example") {
    // Two channels, 2x2 each, all-ones 2x2 filters: per-channel sums.
    Tensor x = make_tensor(1, 2, 2, 2, {1, 2, 3, 4, 5, 6, 7, 8});
    Tensor k = make_tensor(2, 1, 2, 2, std::vector<float>(8, 1.0f));
    Tensor y = ops::depthwise_conv2d_fwd(x, k, 1, 0);
    CHECK(y.c == 2);
    CHECK(y.h == 1);
    CHECK(y.at(0, 0, 0, 0) == doctest::Approx(10.0f));
    CHECK(y.at(0, 1, 0, 0) == doctest::Approx(26.0f));
}

TEST_CASE("depthwise conv matches reference on random shapes") {
    std::mt19937_64 rng(11);
    const struct {
        int n, c, h, w, k, stride, pad;
    } cases[] = {{2, 4, 8, 8, 3, 1, 1}, {1, 3, 7, 7, 3, 2, 1}, {2, 2, 5, 6, 3, 2, 0}};
    for (const auto& tc : cases) {
        Tensor x = random_tensor(tc.n, tc.c, tc.h, tc.w, rng);
        Tensor k = random_tensor(tc.c, 1, tc.k, tc.k, rng);
        Tensor y = ops::depthwise_conv2d_fwd(x, k, tc.stride, tc.pad);
        oracle::ConvResult ref = oracle::depthwise_ref(oracle::to_flat(x), tc.n, tc.c, tc.h, tc.w,
                                                       oracle::to_flat(k), tc.k, tc.stride, tc.pad);
        REQUIRE(y.size() == ref.data.size());
        for (size_t i = 0; i < y.size(); ++i)
            CHECK(y.data[i] == doctest::Approx(ref.data[i]).epsilon(1e-4));
    }
    Tensor x(1, 3, 4, 4);
    Tensor bad(4, 1, 3, 3);
    CHECK_THROWS_AS(ops::depthwise_conv2d_fwd(x, bad, 1, 1), ShapeError);
}

TEST_CASE("pointwise conv matches worked example and reference") {
    // Single pixel, channels [1,2], weights [1,3]: 1*1 + 2*3 = 7.
    Tensor x = make_tensor(1, 2, 1, 1, {1, 2});
    Tensor k = make_tensor(1, 2, 1, 1, {1, 3});
    Tensor y = ops::pointwise_conv2d_fwd(x, k);
    CHECK(y.data[0] == doctest::Approx(7.0f));

    std::mt19937_64 rng(13);
    Tensor xr = random_tensor(2, 5, 6, 6, rng);
    Tensor kr = random_tensor(3, 5, 1, 1, rng);
    Tensor yr = ops::pointwise_conv2d_fwd(xr, kr);
    oracle::ConvResult ref =
        oracle::pointwise_ref(oracle::to_flat(xr), 2, 5, 6, 6, oracle::to_flat(kr), 3);
    REQUIRE(yr.size() == ref.data.size());
    for (size_t i = 0; i < yr.size(); ++i)
        CHECK(yr.data[i] == doctest::Approx(ref.data[i]).epsilon(1e-4));

    Tensor bad(1, 2, 3, 3);
    CHECK_THROWS_AS(ops::pointwise_conv2d_fwd(xr, bad), ShapeError);
}

TEST_CASE("pointwise conv with stride 2 subsamples the grid") {
    Tensor x = make_tensor(1, 1, 2, 2, {1, 2, 3, 4});
    Tensor k = make_tensor(1, 1, 1, 1, {1});
    Tensor y = ops::pointwise_conv2d_fwd(x, k, 2);
    CHECK(y.h == 1);
    CHECK(y.w == 1);
    CHECK(y.data[0] == doctest::Approx(1.0f));  // top-left survives
}

TEST_CASE("batch norm train mode normalizes with batch statistics") {
    // One channel, values 1..4: mean 2.5, population variance 1.25.
    Tensor x = make_tensor(1, 1, 2, 2, {1, 2, 3, 4});
    std::vector<float> gamma{2.0f}, beta{1.0f}, mm{0.0f}, mv{1.0f};
    ops::BnCache<float> cache;
    Tensor y = ops::batch_norm_fwd_train<float>(x, gamma, beta, mm, mv, 0.9f, &cache);
    const double inv = 1.0 / std::sqrt(1.25 + ops::kBnEps);
    CHECK(y.data[0] == doctest::Approx(2.0 * (1 - 2.5) * inv + 1.0).epsilon(1e-5));
    CHECK(y.data[3] == doctest::Approx(2.0 * (4 - 2.5) * inv + 1.0).epsilon(1e-5));
    // Moving stats blend toward the batch values.
    CHECK(mm[0] == doctest::Approx(0.9 * 0.0 + 0.1 * 2.5));
    CHECK(mv[0] == doctest::Approx(0.9 * 1.0 + 0.1 * 1.25));
    // Normalized output has zero mean and unit variance (up to eps).
    double sum = 0;
    for (float v : cache.xhat.data) sum += v;
    CHECK(std::abs(sum) < 1e-5);
}

TEST_CASE("batch norm inference mode is an affine map of moving stats") {
    Tensor x = make_tensor(1, 1, 1, 2, {3, 5});
    std::vector<float> gamma{2.0f}, beta{1.0f}, mm{1.0f}, mv{4.0f};
    Tensor y = ops::batch_norm_fwd_infer<float>(x, gamma, beta, mm, mv);
    const double s = 2.0 / std::sqrt(4.0 + ops::kBnEps);
    CHECK(y.data[0] == doctest::Approx((3 - 1) * s + 1).epsilon(1e-5));
    CHECK(y.data[1] == doctest::Approx((5 - 1) * s + 1).epsilon(1e-5));
    std::vector<float> wrong{1.0f, 1.0f};
    CHECK_THROWS_AS(ops::batch_norm_fwd_infer<float>(x, wrong, beta, mm, mv), ShapeError);
}

TEST_CASE("relu clamps negatives and gates gradients") {
    Tensor x = make_tensor(1, 1, 1, 4, {-2, -0.5f, 0, 3});
    Tensor y = ops::relu_fwd(x);
    CHECK(y.data[0] == 0.0f);
    CHECK(y.data[1] == 0.0f);
    CHECK(y.data[2] == 0.0f);
    CHECK(y.data[3] == 3.0f);
    Tensor gy = make_tensor(1, 1, 1, 4, {1, 1, 1, 1});
    std::vector<float> gx(4, 0.0f);
    ops::relu_bwd(x, gy, gx.data());
    CHECK(gx == std::vector<float>{0, 0, 0, 1});
}

TEST_CASE("global average pool and dense worked examples") {
    Tensor x = make_tensor(1, 2, 2, 2, {1, 2, 3, 4, 10, 20, 30, 40});
    Tensor p = ops::global_avg_pool_fwd(x);
    CHECK(p.at(0, 0, 0, 0) == doctest::Approx(2.5f));
    CHECK(p.at(0, 1, 0, 0) == doctest::Approx(25.0f));

    Tensor k = make_tensor(2, 2, 1, 1, {1, 0, 0, 1});  // identity map
    Tensor bias = make_tensor(1, 2, 1, 1, {0.5f, -0.5f});
    Tensor logits = ops::dense_fwd(p, k, bias);
    CHECK(logits.at(0, 0, 0, 0) == doctest::Approx(3.0f));
    CHECK(logits.at(0, 1, 0, 0) == doctest::Approx(24.5f));

    CHECK_THROWS_AS(ops::dense_fwd(x, k, bias), ShapeError);  // needs 1x1 input
}

TEST_CASE("add sums two tensors and rejects shape mismatch") {
    Tensor a = make_tensor(1, 1, 1, 2, {1, 2});
    Tensor b = make_tensor(1, 1, 1, 2, {10, 20});
    Tensor y = ops::add_fwd(a, b);
    CHECK(y.data[0] == 11.0f);
    CHECK(y.data[1] == 22.0f);
    Tensor c(1, 1, 2, 2);
    CHECK_THROWS_AS(ops::add_fwd(a, c), ShapeError);
}

TEST_CASE("softmax cross entropy worked examples") {
    // Uniform two-way logits: loss is ln 2 regardless of the label.
    Tensor logits = make_tensor(1, 2, 1, 1, {0, 0});
    std::vector<int> label{0};
    CHECK(ops::softmax_cross_entropy_fwd(logits, label) == doctest::Approx(std::log(2.0)));

    // Shifting all logits by a constant leaves the loss unchanged.
    Tensor shifted = make_tensor(1, 2, 1, 1, {100, 100});
    CHECK(ops::softmax_cross_entropy_fwd(shifted, label) == doctest::Approx(std::log(2.0)));

    // Probabilities from backward: p - onehot, averaged over the batch.
    Tensor probs;
    ops::softmax_cross_entropy_fwd(logits, label, &probs);
    CHECK(probs.data[0] == doctest::Approx(0.5f));
    std::vector<float> g(2, 0.0f);
    ops::softmax_cross_entropy_bwd<float>(probs, label, g.data());
    CHECK(g[0] == doctest::Approx(-0.5f));
    CHECK(g[1] == doctest::Approx(0.5f));

    std::vector<int> bad{5};
    CHECK_THROWS_AS(ops::softmax_cross_entropy_fwd(logits, bad), std::invalid_argument);
    std::vector<int> toomany{0, 1};
    CHECK_THROWS_AS(ops::softmax_cross_entropy_fwd(logits, toomany), std::invalid_argument);
}

TEST_CASE("local distillation loss is the elementwise mean square difference") {
    Tensor s = make_tensor(1, 1, 1, 2, {1, 2});
    Tensor t = make_tensor(1, 1, 1, 2, {2, 4});
    CHECK(ops::mse_local_loss(s, t) == doctest::Approx(2.5f));  // (1 + 4) / 2

    std::vector<float> g(2, 0.0f);
    ops::mse_local_loss_bwd<float>(s, t, g.data());
    CHECK(g[0] == doctest::Approx(-1.0f));  // 2/2 * (1-2)
    CHECK(g[1] == doctest::Approx(-2.0f));

    // Loss gradient scales linearly with the scale argument.
    std::vector<float> g2(2, 0.0f);
    ops::mse_local_loss_bwd<float>(s, t, g2.data(), 3.0f);
    CHECK(g2[0] == doctest::Approx(-3.0f));
    CHECK(g2[1] == doctest::Approx(-6.0f));

    Tensor wrong(1, 1, 2, 2);
    CHECK_THROWS_AS(ops::mse_local_loss(s, wrong), ShapeError);
}

TEST_CASE("sgd with momentum follows the velocity recurrence") {
    std::vector<float> w{1.0f}, v{0.0f};
    std::vector<float> g{2.0f};
    ops::sgd_step<float>(w, g, v, 0.1f, 0.9f);
    CHECK(v[0] == doctest::Approx(2.0f));
    CHECK(w[0] == doctest::Approx(0.8f));

    g[0] = 1.0f;
    ops::sgd_step<float>(w, g, v, 0.1f, 0.9f);
    CHECK(v[0] == doctest::Approx(2.8f));              // 0.9*2 + 1
    CHECK(w[0] == doctest::Approx(0.8f - 0.28f));

    CHECK_THROWS_AS(ops::sgd_step<float>(w, g, v, 0.0f, 0.9f), std::invalid_argument);
    CHECK_THROWS_AS(ops::sgd_step<float>(w, g, v, 0.1f, 1.0f), std::invalid_argument);
    std::vector<float> short_v{};
    CHECK_THROWS_AS(ops::sgd_step<float>(w, g, short_v, 0.1f, 0.9f), ShapeError);
}

TEST_CASE("backward passes accumulate instead of overwriting") {
    Tensor x = make_tensor(1, 1, 1, 2, {1, 2});
    Tensor t = make_tensor(1, 1, 1, 2, {0, 0});
    std::vector<float> g(2, 10.0f);  // pre-existing gradient must survive
    ops::mse_local_loss_bwd<float>(x, t, g.data());
    CHECK(g[0] == doctest::Approx(10.0f + 1.0f));
    CHECK(g[1] == doctest::Approx(10.0f + 2.0f));
}

TEST_CASE("tensor shape validation") {
    CHECK_THROWS_AS(Tensor(0, 1, 1, 1), ShapeError);
    CHECK_THROWS_AS(Tensor(1, -1, 1, 1), ShapeError);
    Tensor t(2, 3, 4, 5);
    CHECK(t.size() == 120);
    t.ensure_grad();
    CHECK(t.grad.size() == 120);
    t.grad[5] = 1.0f;
    t.zero_grad();
    CHECK(t.grad[5] == 0.0f);
}

TEST_CASE("mix_seed separates nearby inputs") {
    CHECK(mix_seed(42, 0) != mix_seed(42, 1));
    CHECK(mix_seed(42, 0) != mix_seed(43, 0));
    CHECK(mix_seed(42, 7) == mix_seed(42, 7));  // pure function
}
