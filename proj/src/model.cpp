#include "pbkd/model.hpp"

#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

namespace pbkd {

namespace {

using nlohmann::json;

constexpr float kBnMomentum = 0.9f;

std::span<const float> cspan(const std::vector<float>& v) { return {v.data(), v.size()}; }
std::span<float> mspan(std::vector<float>& v) { return {v.data(), v.size()}; }

struct Shape3 {
    int c, h, w;
    bool operator==(const Shape3&) const = default;
    std::string str() const {
        return std::to_string(c) + "x" + std::to_string(h) + "x" + std::to_string(w);
    }
};

// Output shape of one layer, validating channel agreement. block_in is the
// shape at the block entrance, needed by Add's skip path.
Shape3 layer_out_shape(const LayerParams& l, Shape3 in, Shape3 block_in) {
    auto expect_channels = [&](int want) {
        if (in.c != want)
            throw ShapeError(std::string(layer_kind_name(l.kind)) + " expects " +
                             std::to_string(want) + " input channels, got " + std::to_string(in.c));
    };
    switch (l.kind) {
        case LayerKind::Conv3x3:
        case LayerKind::Conv1x1:
            expect_channels(l.in_channels);
            return {l.out_channels, ops::conv_out_dim(in.h, l.kernel, l.stride, l.padding),
                    ops::conv_out_dim(in.w, l.kernel, l.stride, l.padding)};
        case LayerKind::DepthwiseConv3x3:
            expect_channels(l.in_channels);
            return {in.c, ops::conv_out_dim(in.h, l.kernel, l.stride, l.padding),
                    ops::conv_out_dim(in.w, l.kernel, l.stride, l.padding)};
        case LayerKind::PointwiseConv:
            expect_channels(l.in_channels);
            return {l.out_channels, ops::conv_out_dim(in.h, 1, l.stride, 0),
                    ops::conv_out_dim(in.w, 1, l.stride, 0)};
        case LayerKind::BatchNorm:
        case LayerKind::ReLU:
            expect_channels(l.in_channels);
            return in;
        case LayerKind::GlobalAvgPool:
            return {in.c, 1, 1};
        case LayerKind::Dense:
            expect_channels(l.in_channels);
            if (in.h != 1 || in.w != 1)
                throw ShapeError("dense needs 1x1 spatial input (add global_avg_pool first), got " +
                                 in.str());
            return {l.out_channels, 1, 1};
        case LayerKind::Add: {
            Shape3 skip = l.weight.data.empty()
                              ? block_in
                              : Shape3{l.out_channels, ops::conv_out_dim(block_in.h, 1, l.stride, 0),
                                       ops::conv_out_dim(block_in.w, 1, l.stride, 0)};
            if (!(skip == in))
                throw ShapeError("skip path shape " + skip.str() + " vs main path " + in.str());
            return in;
        }
    }
    throw std::logic_error("layer_out_shape: unhandled layer kind");
}

// Validates every layer of a block against the input shape; returns the
// block's output shape.
Shape3 block_out_shape(const Block& b, Shape3 in) {
    Shape3 cur = in;
    for (const LayerParams& l : b.layers) cur = layer_out_shape(l, cur, in);
    return cur;
}

Block make_conv_block(const std::string& name, const std::string& spec_kind, LayerKind conv_kind,
                      int in_c, int out_c, int stride, int pad) {
    Block b;
    b.name = name;
    b.spec_kind = spec_kind;
    b.replaceable = conv_kind == LayerKind::Conv3x3;
    b.in_channels = in_c;
    b.out_channels = out_c;
    b.stride = stride;
    b.padding = pad;
    const int k = conv_kind == LayerKind::Conv1x1 ? 1 : 3;
    b.layers.push_back(make_conv_layer(conv_kind, in_c, out_c, k, stride, pad));
    b.layers.push_back(make_batchnorm_layer(out_c));
    b.layers.push_back(make_relu_layer(out_c));
    return b;
}

// Basic residual unit: two 3x3 convs with a skip from the block input, summed
// before the final activation. The second conv is shape-preserving.
Block make_residual_block(const std::string& name, int in_c, int out_c, int stride, int pad) {
    Block b;
    b.name = name;
    b.spec_kind = "residual3x3";
    b.replaceable = true;
    b.in_channels = in_c;
    b.out_channels = out_c;
    b.stride = stride;
    b.padding = pad;
    b.layers.push_back(make_conv_layer(LayerKind::Conv3x3, in_c, out_c, 3, stride, pad));
    b.layers.push_back(make_batchnorm_layer(out_c));
    b.layers.push_back(make_relu_layer(out_c));
    b.layers.push_back(make_conv_layer(LayerKind::Conv3x3, out_c, out_c, 3, 1, 1));
    b.layers.push_back(make_batchnorm_layer(out_c));
    b.layers.push_back(make_add_layer(in_c, out_c, stride));
    b.layers.push_back(make_relu_layer(out_c));
    return b;
}

}  // namespace

// ---------------------------------------------------------------------------
// Kind names
// ---------------------------------------------------------------------------

const char* layer_kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::Conv3x3: return "conv3x3";
        case LayerKind::Conv1x1: return "conv1x1";
        case LayerKind::DepthwiseConv3x3: return "depthwise_conv3x3";
        case LayerKind::PointwiseConv: return "pointwise_conv";
        case LayerKind::BatchNorm: return "batchnorm";
        case LayerKind::ReLU: return "relu";
        case LayerKind::GlobalAvgPool: return "global_avg_pool";
        case LayerKind::Dense: return "dense";
        case LayerKind::Add: return "add";
    }
    return "unknown";
}

LayerKind layer_kind_from_name(const std::string& name) {
    static const LayerKind all[] = {
        LayerKind::Conv3x3,       LayerKind::Conv1x1, LayerKind::DepthwiseConv3x3,
        LayerKind::PointwiseConv, LayerKind::BatchNorm, LayerKind::ReLU,
        LayerKind::GlobalAvgPool, LayerKind::Dense,   LayerKind::Add,
    };
    for (LayerKind k : all)
        if (name == layer_kind_name(k)) return k;
    throw SpecError("unknown layer kind '" + name + "'");
}

// ---------------------------------------------------------------------------
// Layer factories
// ---------------------------------------------------------------------------

LayerParams make_conv_layer(LayerKind kind, int in_c, int out_c, int kernel, int stride,
                            int padding) {
    LayerParams l;
    l.kind = kind;
    l.in_channels = in_c;
    l.out_channels = kind == LayerKind::DepthwiseConv3x3 ? in_c : out_c;
    l.kernel = kernel;
    l.stride = stride;
    l.padding = padding;
    if (kind == LayerKind::DepthwiseConv3x3)
        l.weight = Tensor(in_c, 1, kernel, kernel);
    else
        l.weight = Tensor(l.out_channels, in_c, kernel, kernel);
    return l;
}

LayerParams make_batchnorm_layer(int channels) {
    LayerParams l;
    l.kind = LayerKind::BatchNorm;
    l.in_channels = l.out_channels = channels;
    l.gamma = Tensor(1, channels, 1, 1);
    l.beta = Tensor(1, channels, 1, 1);
    l.moving_mean = Tensor(1, channels, 1, 1);
    l.moving_var = Tensor(1, channels, 1, 1);
    std::fill(l.gamma.data.begin(), l.gamma.data.end(), 1.0f);
    std::fill(l.moving_var.data.begin(), l.moving_var.data.end(), 1.0f);
    return l;
}

LayerParams make_relu_layer(int channels) {
    LayerParams l;
    l.kind = LayerKind::ReLU;
    l.in_channels = l.out_channels = channels;
    return l;
}

LayerParams make_gap_layer(int channels) {
    LayerParams l;
    l.kind = LayerKind::GlobalAvgPool;
    l.in_channels = l.out_channels = channels;
    return l;
}

LayerParams make_dense_layer(int in_features, int out_features) {
    LayerParams l;
    l.kind = LayerKind::Dense;
    l.in_channels = in_features;
    l.out_channels = out_features;
    l.kernel = 1;
    l.weight = Tensor(out_features, in_features, 1, 1);
    l.bias = Tensor(1, out_features, 1, 1);
    return l;
}

LayerParams make_add_layer(int in_c, int out_c, int stride) {
    LayerParams l;
    l.kind = LayerKind::Add;
    l.in_channels = in_c;
    l.out_channels = out_c;
    l.stride = stride;
    if (in_c != out_c || stride != 1) l.weight = Tensor(out_c, in_c, 1, 1);
    return l;
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

Network parse_model_spec(const std::string& text, const std::string& origin) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw SpecError(origin + ": " + e.what());
    }
    auto fail = [&](const std::string& msg) { return SpecError(origin + ": " + msg); };
    if (!doc.is_object()) throw fail("top level must be an object");

    auto require_int = [&](const json& e, const char* key, const std::string& loc) {
        if (!e.contains(key) || !e[key].is_number_integer())
            throw fail(loc + ": missing integer field '" + std::string(key) + "'");
        return e[key].get<int>();
    };
    auto optional_int = [&](const json& e, const char* key, const std::string& loc, int def) {
        if (!e.contains(key)) return def;
        if (!e[key].is_number_integer())
            throw fail(loc + ": field '" + std::string(key) + "' must be an integer");
        return e[key].get<int>();
    };

    Network net;
    net.name = doc.value("name", std::string("unnamed"));

    if (!doc.contains("input_shape") || !doc["input_shape"].is_array() ||
        doc["input_shape"].size() != 3)
        throw fail("input_shape must be [channels, height, width]");
    net.in_c = doc["input_shape"][0].get<int>();
    net.in_h = doc["input_shape"][1].get<int>();
    net.in_w = doc["input_shape"][2].get<int>();
    if (net.in_c < 1 || net.in_h < 1 || net.in_w < 1) throw fail("input_shape dims must be >= 1");

    if (!doc.contains("blocks") || !doc["blocks"].is_array() || doc["blocks"].empty())
        throw fail("'blocks' must be a non-empty array");

    Shape3 cur{net.in_c, net.in_h, net.in_w};
    std::map<std::string, int> seen_names;  // name -> 1-based block index
    std::string prev_name = "the input";

    for (size_t i = 0; i < doc["blocks"].size(); ++i) {
        const json& e = doc["blocks"][i];
        const std::string loc = "block " + std::to_string(i + 1);
        if (!e.is_object()) throw fail(loc + ": must be an object");
        if (!e.contains("kind") || !e["kind"].is_string())
            throw fail(loc + ": missing string field 'kind'");
        const std::string kind = e["kind"].get<std::string>();
        const std::string name = e.value("name", "block" + std::to_string(i + 1));
        if (auto [it, inserted] = seen_names.emplace(name, static_cast<int>(i + 1)); !inserted)
            throw fail(loc + ": duplicate block name '" + name + "' (also block " +
                       std::to_string(it->second) + ")");

        const int out_c = require_int(e, "out_channels", loc);
        if (out_c < 1) throw fail(loc + ": out_channels must be >= 1");
        const int stride = optional_int(e, "stride", loc, 1);
        if (stride != 1 && stride != 2) throw fail(loc + ": stride must be 1 or 2");
        const int pad = optional_int(e, "padding", loc, kind == "conv1x1" ? 0 : 1);
        if (pad < 0) throw fail(loc + ": padding must be >= 0");

        if (e.contains("in_channels")) {
            const int want = require_int(e, "in_channels", loc);
            if (want != cur.c)
                throw fail(loc + " ('" + name + "') expects " + std::to_string(want) +
                           " input channels but " + prev_name + " emits " + std::to_string(cur.c));
        }

        Block b;
        if (kind == "conv3x3")
            b = make_conv_block(name, kind, LayerKind::Conv3x3, cur.c, out_c, stride, pad);
        else if (kind == "conv1x1")
            b = make_conv_block(name, kind, LayerKind::Conv1x1, cur.c, out_c, stride, pad);
        else if (kind == "residual3x3")
            b = make_residual_block(name, cur.c, out_c, stride, pad);
        else
            throw fail(loc + ": unknown block kind '" + kind + "'");

        try {
            cur = block_out_shape(b, cur);
        } catch (const ShapeError& ex) {
            throw fail(loc + " ('" + kind + "'): " + ex.what());
        }
        prev_name = "block " + std::to_string(i + 1) + " ('" + name + "')";
        net.blocks.push_back(std::move(b));
    }

    if (!doc.contains("classifier") || !doc["classifier"].is_array() || doc["classifier"].empty())
        throw fail("'classifier' must be a non-empty array");
    net.classifier.name = "classifier";
    net.classifier.spec_kind = "classifier";
    net.classifier.in_channels = cur.c;
    for (size_t i = 0; i < doc["classifier"].size(); ++i) {
        const json& e = doc["classifier"][i];
        const std::string loc = "classifier layer " + std::to_string(i + 1);
        if (!e.is_object() || !e.contains("kind") || !e["kind"].is_string())
            throw fail(loc + ": must be an object with a string 'kind'");
        const std::string kind = e["kind"].get<std::string>();
        LayerParams l;
        if (kind == "global_avg_pool") {
            l = make_gap_layer(cur.c);
        } else if (kind == "relu") {
            l = make_relu_layer(cur.c);
        } else if (kind == "dense") {
            const int out = require_int(e, "out_features", loc);
            if (out < 1) throw fail(loc + ": out_features must be >= 1");
            l = make_dense_layer(cur.c, out);
        } else {
            throw fail(loc + ": unknown classifier layer kind '" + kind + "'");
        }
        try {
            cur = layer_out_shape(l, cur, cur);
        } catch (const ShapeError& ex) {
            throw fail(loc + " ('" + kind + "'): " + ex.what());
        }
        net.classifier.layers.push_back(std::move(l));
    }
    if (net.classifier.layers.back().kind != LayerKind::Dense)
        throw fail("classifier must end with a dense layer");
    net.classifier.out_channels = cur.c;
    return net;
}

Network load_model_spec_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw SpecError(path + ": cannot open model spec file");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_model_spec(buf.str(), path);
}

// ---------------------------------------------------------------------------
// Structure queries
// ---------------------------------------------------------------------------

Network subnetwork_prefix(const Network& net, int k, bool inclusive) {
    const int count = static_cast<int>(net.blocks.size());
    if (k < 1 || k > count)
        throw std::out_of_range("subnetwork_prefix: k=" + std::to_string(k) + " out of range [1," +
                                std::to_string(count) + "]");
    const int take = inclusive ? k : k - 1;
    Network prefix;
    prefix.name = net.name + "/prefix" + std::to_string(take);
    prefix.in_c = net.in_c;
    prefix.in_h = net.in_h;
    prefix.in_w = net.in_w;
    prefix.blocks.assign(net.blocks.begin(), net.blocks.begin() + take);
    return prefix;  // classifier intentionally left empty
}

std::vector<int> identify_replaceable(const Network& net) {
    std::vector<int> out;
    for (size_t i = 0; i < net.blocks.size(); ++i)
        if (net.blocks[i].replaceable) out.push_back(static_cast<int>(i + 1));
    return out;
}

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

void init_block_weights(Block& b, std::mt19937_64& rng) {
    auto fill_normal = [&rng](Tensor& t, double fan_in) {
        std::normal_distribution<float> dist(0.0f, static_cast<float>(std::sqrt(2.0 / fan_in)));
        for (float& v : t.data) v = dist(rng);
    };
    for (LayerParams& l : b.layers) {
        switch (l.kind) {
            case LayerKind::Conv3x3:
            case LayerKind::Conv1x1:
                fill_normal(l.weight, static_cast<double>(l.in_channels) * l.kernel * l.kernel);
                break;
            case LayerKind::DepthwiseConv3x3:
                fill_normal(l.weight, static_cast<double>(l.kernel) * l.kernel);
                break;
            case LayerKind::PointwiseConv:
                fill_normal(l.weight, l.in_channels);
                break;
            case LayerKind::Dense:
                fill_normal(l.weight, l.in_channels);
                std::fill(l.bias.data.begin(), l.bias.data.end(), 0.0f);
                break;
            case LayerKind::BatchNorm:
                std::fill(l.gamma.data.begin(), l.gamma.data.end(), 1.0f);
                std::fill(l.beta.data.begin(), l.beta.data.end(), 0.0f);
                std::fill(l.moving_mean.data.begin(), l.moving_mean.data.end(), 0.0f);
                std::fill(l.moving_var.data.begin(), l.moving_var.data.end(), 1.0f);
                break;
            case LayerKind::Add:
                if (!l.weight.data.empty()) fill_normal(l.weight, l.in_channels);
                break;
            case LayerKind::ReLU:
            case LayerKind::GlobalAvgPool:
                break;
        }
    }
}

void init_weights(Network& net, uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (Block& b : net.blocks) init_block_weights(b, rng);
    init_block_weights(net.classifier, rng);
}

std::vector<Tensor*> collect_block_trainable(Block& b) {
    std::vector<Tensor*> out;
    for (LayerParams& l : b.layers) {
        if (!l.weight.data.empty()) out.push_back(&l.weight);
        if (!l.bias.data.empty()) out.push_back(&l.bias);
        if (l.kind == LayerKind::BatchNorm) {
            out.push_back(&l.gamma);
            out.push_back(&l.beta);
        }
    }
    return out;
}

std::vector<Tensor*> collect_trainable(Network& net) {
    std::vector<Tensor*> out;
    for (Block& b : net.blocks)
        for (Tensor* t : collect_block_trainable(b)) out.push_back(t);
    for (Tensor* t : collect_block_trainable(net.classifier)) out.push_back(t);
    return out;
}

void for_each_block_array(Block& b, const std::function<void(const std::string&, Tensor&)>& fn) {
    for (size_t i = 0; i < b.layers.size(); ++i) {
        LayerParams& l = b.layers[i];
        const std::string prefix =
            b.name + "/" + layer_kind_name(l.kind) + "_" + std::to_string(i) + "/";
        switch (l.kind) {
            case LayerKind::Conv3x3:
            case LayerKind::Conv1x1:
            case LayerKind::DepthwiseConv3x3:
            case LayerKind::PointwiseConv:
                fn(prefix + "weight", l.weight);
                break;
            case LayerKind::Dense:
                fn(prefix + "weight", l.weight);
                fn(prefix + "bias", l.bias);
                break;
            case LayerKind::BatchNorm:
                fn(prefix + "gamma", l.gamma);
                fn(prefix + "beta", l.beta);
                fn(prefix + "moving_mean", l.moving_mean);
                fn(prefix + "moving_var", l.moving_var);
                break;
            case LayerKind::Add:
                if (!l.weight.data.empty()) fn(prefix + "proj", l.weight);
                break;
            case LayerKind::ReLU:
            case LayerKind::GlobalAvgPool:
                break;
        }
    }
}

void for_each_array(Network& net, const std::function<void(const std::string&, Tensor&)>& fn) {
    for (Block& b : net.blocks) for_each_block_array(b, fn);
    if (net.has_classifier()) for_each_block_array(net.classifier, fn);
}

uint64_t network_weight_hash(const Network& net) {
    uint64_t h = 0xcbf29ce484222325ull;
    for_each_array(const_cast<Network&>(net), [&h](const std::string& name, Tensor& t) {
        h = fnv1a64(name.data(), name.size(), h);
        h = fnv1a64(t.data.data(), t.data.size() * sizeof(float), h);
    });
    return h;
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

Tensor block_forward(Block& b, const Tensor& x, bool train, BlockCache* cache) {
    if (cache) {
        cache->train_mode = train;
        cache->layers.assign(b.layers.size(), LayerCache{});
    }
    Tensor cur = x;
    for (size_t i = 0; i < b.layers.size(); ++i) {
        LayerParams& l = b.layers[i];
        if (cache) cache->layers[i].input = cur;
        Tensor next;
        switch (l.kind) {
            case LayerKind::Conv3x3:
            case LayerKind::Conv1x1:
                next = ops::conv2d_fwd(cur, l.weight, l.stride, l.padding);
                break;
            case LayerKind::DepthwiseConv3x3:
                next = ops::depthwise_conv2d_fwd(cur, l.weight, l.stride, l.padding);
                break;
            case LayerKind::PointwiseConv:
                next = ops::pointwise_conv2d_fwd(cur, l.weight, l.stride);
                break;
            case LayerKind::BatchNorm:
                if (train)
                    next = ops::batch_norm_fwd_train<float>(
                        cur, cspan(l.gamma.data), cspan(l.beta.data), mspan(l.moving_mean.data),
                        mspan(l.moving_var.data), kBnMomentum,
                        cache ? &cache->layers[i].bn : nullptr);
                else
                    next = ops::batch_norm_fwd_infer<float>(cur, cspan(l.gamma.data),
                                                            cspan(l.beta.data),
                                                            cspan(l.moving_mean.data),
                                                            cspan(l.moving_var.data));
                break;
            case LayerKind::ReLU:
                next = ops::relu_fwd(cur);
                break;
            case LayerKind::GlobalAvgPool:
                next = ops::global_avg_pool_fwd(cur);
                break;
            case LayerKind::Dense:
                next = ops::dense_fwd(cur, l.weight, l.bias);
                break;
            case LayerKind::Add: {
                Tensor skip = l.weight.data.empty()
                                  ? x
                                  : ops::pointwise_conv2d_fwd(x, l.weight, l.stride);
                next = ops::add_fwd(cur, skip);
                break;
            }
        }
        cur = std::move(next);
    }
    return cur;
}

Tensor block_infer(const Block& b, const Tensor& x) {
    // Inference mode mutates nothing (moving stats are read-only), so the
    // cast is safe and keeps one forward implementation.
    return block_forward(const_cast<Block&>(b), x, false, nullptr);
}

Tensor block_backward(Block& b, const BlockCache& cache, const Tensor& gy, bool need_input_grad,
                      bool param_grads) {
    if (cache.layers.size() != b.layers.size())
        throw std::logic_error("block_backward: cache does not match block " + b.name);
    if (!cache.train_mode && param_grads)
        throw std::logic_error("block_backward: parameter gradients require a train-mode cache");
    Tensor g = gy;
    Tensor skip_grad;  // input-gradient contribution of Add skip paths
    for (int i = static_cast<int>(b.layers.size()) - 1; i >= 0; --i) {
        LayerParams& l = b.layers[i];
        const Tensor& x = cache.layers[i].input;
        const bool want_gx = i > 0 || need_input_grad;
        float* gw = nullptr;
        if (param_grads && !l.weight.data.empty() && l.kind != LayerKind::Add) {
            l.weight.ensure_grad();
            gw = l.weight.grad.data();
        }
        Tensor gx;
        if (want_gx && l.kind != LayerKind::Add) gx = Tensor(x.n, x.c, x.h, x.w);
        float* gxp = gx.data.empty() ? nullptr : gx.data.data();
        switch (l.kind) {
            case LayerKind::Conv3x3:
            case LayerKind::Conv1x1:
                ops::conv2d_bwd(x, l.weight, g, l.stride, l.padding, gxp, gw);
                break;
            case LayerKind::DepthwiseConv3x3:
                ops::depthwise_conv2d_bwd(x, l.weight, g, l.stride, l.padding, gxp, gw);
                break;
            case LayerKind::PointwiseConv:
                ops::pointwise_conv2d_bwd(x, l.weight, g, l.stride, gxp, gw);
                break;
            case LayerKind::BatchNorm: {
                std::span<float> ggamma, gbeta;
                if (param_grads) {
                    l.gamma.ensure_grad();
                    l.beta.ensure_grad();
                    ggamma = mspan(l.gamma.grad);
                    gbeta = mspan(l.beta.grad);
                }
                if (cache.train_mode)
                    ops::batch_norm_bwd_train<float>(cache.layers[i].bn, cspan(l.gamma.data), g, gxp,
                                                     ggamma, gbeta);
                else
                    ops::batch_norm_bwd_infer<float>(g, cspan(l.gamma.data), cspan(l.moving_var.data),
                                                     gxp);
                break;
            }
            case LayerKind::ReLU:
                ops::relu_bwd(x, g, gxp);
                break;
            case LayerKind::GlobalAvgPool:
                ops::global_avg_pool_bwd(x, g, gxp);
                break;
            case LayerKind::Dense: {
                float* gbias = nullptr;
                if (param_grads && !l.bias.data.empty()) {
                    l.bias.ensure_grad();
                    gbias = l.bias.grad.data();
                }
                ops::dense_bwd(x, l.weight, g, gxp, gw, gbias);
                break;
            }
            case LayerKind::Add: {
                if (i == 0) throw std::logic_error("block_backward: Add cannot be the first layer");
                const Tensor& block_input = cache.layers[0].input;
                if (l.weight.data.empty()) {
                    if (need_input_grad) {
                        if (skip_grad.data.empty())
                            skip_grad =
                                Tensor(block_input.n, block_input.c, block_input.h, block_input.w);
                        for (size_t t = 0; t < g.data.size(); ++t) skip_grad.data[t] += g.data[t];
                    }
                } else {
                    float* gproj = nullptr;
                    if (param_grads) {
                        l.weight.ensure_grad();
                        gproj = l.weight.grad.data();
                    }
                    float* gskip = nullptr;
                    if (need_input_grad) {
                        if (skip_grad.data.empty())
                            skip_grad =
                                Tensor(block_input.n, block_input.c, block_input.h, block_input.w);
                        gskip = skip_grad.data.data();
                    }
                    if (gproj || gskip)
                        ops::pointwise_conv2d_bwd(block_input, l.weight, g, l.stride, gskip, gproj);
                }
                gx = std::move(g);  // the sum passes the gradient through to the main path
                break;
            }
        }
        g = want_gx ? std::move(gx) : Tensor();
    }
    if (need_input_grad && !skip_grad.data.empty())
        for (size_t t = 0; t < g.data.size(); ++t) g.data[t] += skip_grad.data[t];
    return g;
}

Tensor network_forward_train(Network& net, const Tensor& x, NetCache& cache,
                             const std::vector<bool>& train_mask) {
    if (!train_mask.empty() && train_mask.size() != net.blocks.size())
        throw std::invalid_argument("network_forward_train: mask size " +
                                    std::to_string(train_mask.size()) + " vs " +
                                    std::to_string(net.blocks.size()) + " blocks");
    cache.blocks.assign(net.blocks.size(), BlockCache{});
    Tensor cur = x;
    for (size_t i = 0; i < net.blocks.size(); ++i) {
        const bool train = train_mask.empty() || train_mask[i];
        cur = block_forward(net.blocks[i], cur, train, &cache.blocks[i]);
    }
    if (net.has_classifier()) cur = block_forward(net.classifier, cur, true, &cache.classifier);
    return cur;
}

void network_backward(Network& net, const NetCache& cache, const Tensor& glogits,
                      const std::vector<bool>& train_mask, bool freeze_classifier) {
    if (!train_mask.empty() && train_mask.size() != net.blocks.size())
        throw std::invalid_argument("network_backward: mask size mismatch");
    Tensor g = glogits;
    if (net.has_classifier())
        g = block_backward(net.classifier, cache.classifier, g, !net.blocks.empty(),
                           !freeze_classifier);
    for (int i = static_cast<int>(net.blocks.size()) - 1; i >= 0; --i) {
        const bool train = train_mask.empty() || train_mask[i];
        g = block_backward(net.blocks[i], cache.blocks[i], g, i > 0, train);
    }
}

Tensor network_infer(const Network& net, const Tensor& x) {
    Tensor cur = x;
    for (const Block& b : net.blocks) cur = block_infer(b, cur);
    if (net.has_classifier()) cur = block_infer(net.classifier, cur);
    return cur;
}

Tensor prefix_infer(const Network& net, const Tensor& x, int k, bool inclusive) {
    const int count = static_cast<int>(net.blocks.size());
    if (k < 1 || k > count)
        throw std::out_of_range("prefix_infer: k=" + std::to_string(k) + " out of range [1," +
                                std::to_string(count) + "]");
    const int take = inclusive ? k : k - 1;
    Tensor cur = x;
    for (int i = 0; i < take; ++i) cur = block_infer(net.blocks[i], cur);
    return cur;
}

// ---------------------------------------------------------------------------
// Cost accounting
// ---------------------------------------------------------------------------

long long CostTable::conv_macs() const {
    long long s = 0;
    for (const CostRow& r : rows)
        if (r.kind != LayerKind::BatchNorm && r.kind != LayerKind::Dense) s += r.macs;
    return s;
}

long long CostTable::conv_params() const {
    long long s = 0;
    for (const CostRow& r : rows)
        if (r.kind != LayerKind::BatchNorm && r.kind != LayerKind::Dense) s += r.params;
    return s;
}

CostTable count_block_cost(const Block& b, int c, int h, int w) {
    CostTable t;
    const Shape3 block_in{c, h, w};
    Shape3 cur = block_in;
    for (size_t i = 0; i < b.layers.size(); ++i) {
        const LayerParams& l = b.layers[i];
        const Shape3 next = layer_out_shape(l, cur, block_in);
        CostRow row;
        row.layer = b.name + "/" + layer_kind_name(l.kind) + "_" + std::to_string(i);
        row.kind = l.kind;
        const long long spatial = static_cast<long long>(next.h) * next.w;
        switch (l.kind) {
            case LayerKind::Conv3x3:
            case LayerKind::Conv1x1: {
                const long long kk = static_cast<long long>(l.kernel) * l.kernel;
                row.params = kk * l.in_channels * l.out_channels;
                row.macs = spatial * row.params;
                break;
            }
            case LayerKind::DepthwiseConv3x3: {
                const long long kk = static_cast<long long>(l.kernel) * l.kernel;
                row.params = kk * l.in_channels;
                row.macs = spatial * row.params;
                break;
            }
            case LayerKind::PointwiseConv:
                row.params = static_cast<long long>(l.in_channels) * l.out_channels;
                row.macs = spatial * row.params;
                break;
            case LayerKind::BatchNorm:
                row.params = 2LL * l.in_channels;  // gamma + beta
                break;
            case LayerKind::Dense:
                row.params = static_cast<long long>(l.in_channels) * l.out_channels +
                             (l.bias.data.empty() ? 0 : l.out_channels);
                row.macs = static_cast<long long>(l.in_channels) * l.out_channels;
                break;
            case LayerKind::Add:
                if (!l.weight.data.empty()) {
                    row.params = static_cast<long long>(l.in_channels) * l.out_channels;
                    row.macs = spatial * row.params;
                }
                break;
            case LayerKind::ReLU:
            case LayerKind::GlobalAvgPool:
                break;
        }
        t.rows.push_back(std::move(row));
        t.total_macs += t.rows.back().macs;
        t.total_params += t.rows.back().params;
        cur = next;
    }
    return t;
}

CostTable count_macs_params(const Network& net, int c, int h, int w) {
    CostTable t;
    Shape3 cur{c, h, w};
    auto append = [&t](const CostTable& part) {
        for (const CostRow& r : part.rows) t.rows.push_back(r);
        t.total_macs += part.total_macs;
        t.total_params += part.total_params;
    };
    for (const Block& b : net.blocks) {
        append(count_block_cost(b, cur.c, cur.h, cur.w));
        cur = block_out_shape(b, cur);
    }
    if (net.has_classifier()) append(count_block_cost(net.classifier, cur.c, cur.h, cur.w));
    return t;
}

CostTable count_macs_params(const Network& net) {
    return count_macs_params(net, net.in_c, net.in_h, net.in_w);
}

}  // namespace pbkd
