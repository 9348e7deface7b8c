#pragma once

// Network representation: a model is an ordered list of feature blocks plus a
// trailing classifier block. Each block expands to a fixed layer sequence
// (conv3x3 -> batchnorm -> relu, etc). Blocks are the unit of replacement:
// a compressible block can be swapped for a depthwise-separable stand-in with
// the same input/output shapes.

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "pbkd/ops.hpp"
#include "pbkd/tensor.hpp"

namespace pbkd {

// Raised for malformed or inconsistent model spec documents.
struct SpecError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

enum class LayerKind {
    Conv3x3,
    Conv1x1,
    DepthwiseConv3x3,
    PointwiseConv,
    BatchNorm,
    ReLU,
    GlobalAvgPool,
    Dense,
    Add,
};

const char* layer_kind_name(LayerKind k);
LayerKind layer_kind_from_name(const std::string& name);  // throws SpecError on unknown names

struct LayerParams {
    LayerKind kind;
    int in_channels = 0;
    int out_channels = 0;
    int kernel = 0;   // spatial kernel size for conv kinds
    int stride = 1;
    int padding = 0;
    Tensor weight;    // conv kernel, dense weight, or skip projection for Add (empty = identity skip)
    Tensor bias;      // dense only
    Tensor gamma, beta, moving_mean, moving_var;  // batchnorm, stored as (1,C,1,1)
};

// One schedulable/replaceable unit. The Add layer, when present, sums the
// block input (optionally through its 1x1 projection) into the activation.
struct Block {
    std::string name;        // unique within a network, e.g. "block2"
    std::string spec_kind;   // kind string from the model spec ("conv3x3", ...)
    bool replaceable = false;
    int in_channels = 0;
    int out_channels = 0;
    int stride = 1;
    int padding = 1;
    std::vector<LayerParams> layers;
};

struct Network {
    std::string name;
    int in_c = 0, in_h = 0, in_w = 0;
    std::vector<Block> blocks;  // feature blocks; public block indices are 1-based
    Block classifier;           // empty layer list when absent (prefix networks)

    bool has_classifier() const { return !classifier.layers.empty(); }
};

// ---------------------------------------------------------------------------
// Layer factories (weights allocated, not initialized)
// ---------------------------------------------------------------------------

LayerParams make_conv_layer(LayerKind kind, int in_c, int out_c, int kernel, int stride, int padding);
LayerParams make_batchnorm_layer(int channels);
LayerParams make_relu_layer(int channels);
LayerParams make_gap_layer(int channels);
LayerParams make_dense_layer(int in_features, int out_features);
// Skip-sum layer; allocates a 1x1 projection when channels or stride differ,
// otherwise the skip is the identity.
LayerParams make_add_layer(int in_c, int out_c, int stride);

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

// Parses and validates a model spec document (see data/models for examples).
// Shape compatibility is checked eagerly so later passes cannot hit shape
// errors. `origin` names the source in error messages.
Network parse_model_spec(const std::string& text, const std::string& origin = "<memory>");
Network load_model_spec_file(const std::string& path);

// ---------------------------------------------------------------------------
// Structure queries
// ---------------------------------------------------------------------------

// Feature-block prefix: blocks 1..k when inclusive, 1..k-1 otherwise. The
// classifier is never attached. k is 1-based; out-of-range k is rejected.
Network subnetwork_prefix(const Network& net, int k, bool inclusive);

// 1-based indices of blocks eligible for replacement: every convolution block
// except 1x1 convolutions. Ascending order; may be empty.
std::vector<int> identify_replaceable(const Network& net);

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

// Fan-in-scaled normal init for conv/dense weights (std = sqrt(2 / fan_in)),
// gamma=1 beta=0 moving_mean=0 moving_var=1 for batchnorm, zero dense bias.
void init_block_weights(Block& b, std::mt19937_64& rng);
void init_weights(Network& net, uint64_t seed);

// Trainable parameter tensors in deterministic order (conv/dense weights,
// biases, batchnorm gamma/beta, skip projections; moving stats excluded).
std::vector<Tensor*> collect_block_trainable(Block& b);
std::vector<Tensor*> collect_trainable(Network& net);

// Visits every weight array including batchnorm moving stats, in a stable
// order, under its serialization name ("block1/conv3x3_0/weight", ...).
void for_each_array(Network& net, const std::function<void(const std::string&, Tensor&)>& fn);
void for_each_block_array(Block& b, const std::function<void(const std::string&, Tensor&)>& fn);

// Order-sensitive FNV-1a hash over all array names and payload bytes.
uint64_t network_weight_hash(const Network& net);

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

struct LayerCache {
    Tensor input;
    ops::BnCache<float> bn;
};

struct BlockCache {
    bool train_mode = false;
    std::vector<LayerCache> layers;
};

// Forward through one block. Train mode uses batch statistics and updates the
// moving averages in place; inference mode reads the moving statistics and
// leaves the block untouched. Pass a cache to enable backward.
Tensor block_forward(Block& b, const Tensor& x, bool train, BlockCache* cache = nullptr);

// Inference without mutation, usable on shared read-only blocks.
Tensor block_infer(const Block& b, const Tensor& x);

// Backward through one block given the cache of the matching forward call.
// Accumulates into each trainable tensor's grad buffer when param_grads is
// set (caller zeroes the buffers); returns the input gradient when
// need_input_grad is set, else an empty tensor. Inference-mode caches only
// support param_grads == false (frozen blocks).
Tensor block_backward(Block& b, const BlockCache& cache, const Tensor& gy, bool need_input_grad,
                      bool param_grads);

struct NetCache {
    std::vector<BlockCache> blocks;
    BlockCache classifier;
};

// Whole-network cached forward returning logits. train_mask selects batch-
// statistics mode per 0-based block position (empty = all train mode).
// Frozen blocks should run inference mode so their normalization statistics
// stay untouched. The classifier is always cached in train mode; it carries
// no normalization layers, so the modes agree numerically.
Tensor network_forward_train(Network& net, const Tensor& x, NetCache& cache,
                             const std::vector<bool>& train_mask = {});

// Backward from logit gradients through classifier and all blocks. Parameter
// gradients accumulate only where train_mask is true (empty mask = train all;
// mask is indexed by 0-based block position, classifier always trained unless
// freeze_classifier).
void network_backward(Network& net, const NetCache& cache, const Tensor& glogits,
                      const std::vector<bool>& train_mask = {}, bool freeze_classifier = false);

// Whole-network inference to logits (classifier applied when present).
Tensor network_infer(const Network& net, const Tensor& x);

// Inference through feature blocks 1..k (1-based, inclusive flag as in
// subnetwork_prefix); k=0 or exclusive k=1 returns the input unchanged.
Tensor prefix_infer(const Network& net, const Tensor& x, int k, bool inclusive);

// ---------------------------------------------------------------------------
// Cost accounting
// ---------------------------------------------------------------------------

struct CostRow {
    std::string layer;  // "block1/conv3x3_0"
    LayerKind kind;
    long long macs = 0;    // multiply-accumulates, 1 MAC = 1 op; batchnorm/relu/pool count 0
    long long params = 0;  // learnable parameter count (batchnorm: gamma+beta)
};

struct CostTable {
    std::vector<CostRow> rows;
    long long total_macs = 0;
    long long total_params = 0;

    // Conv-kernel MACs/params only (excludes batchnorm/bias), the basis of
    // compression-ratio comparisons.
    long long conv_macs() const;
    long long conv_params() const;
};

// MAC convention: conv = Hout*Wout*Cout*Cin*K^2, depthwise = Hout*Wout*Cin*K^2,
// pointwise = Hout*Wout*Cin*Cout, dense = in*out; padded positions count as
// full windows. Params drop the spatial factors.
CostTable count_block_cost(const Block& b, int c, int h, int w);
CostTable count_macs_params(const Network& net, int c, int h, int w);
CostTable count_macs_params(const Network& net);

}  // namespace pbkd
