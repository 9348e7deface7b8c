#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pbkd/dataset.hpp"
#include "pbkd/model.hpp"
#include "pbkd/replacement.hpp"

namespace pbkd {

// How a replacement block is trained against its teacher block.
//  LocalOnly: minimize the mean squared error between the student block's
//             output and the teacher block's output on the same activations.
//  Combined: lambda_local * local loss + classification loss, where the
//            classification loss is computed by pushing the student output
//            through the frozen remainder of the teacher and its classifier.
enum class LossMode { LocalOnly, Combined };

const char* loss_mode_name(LossMode m);
LossMode loss_mode_from_name(const std::string& name);  // throws SpecError

struct DistillTask {
    int block_index = 0;  // 1-based teacher block id, must be replaceable
    CandidateKind kind = CandidateKind::TwoLayer;
    int epochs = 30;
    int eval_every = 2;
    uint64_t seed = 0;
    double threshold = 0.0;  // top-1 fraction the block must beat to be used
    LossMode loss_mode = LossMode::LocalOnly;
    float lambda_local = 1.0f;  // only read in Combined mode
    float lr = 0.05f;
    float momentum = 0.9f;
    int batch_size = 50;
    long max_steps = 0;  // optional cap on optimizer steps, 0 = no cap
};

struct EvalPoint {
    int epoch = 0;
    double accuracy = 0.0;
};

struct TrainedBlockResult {
    int block_index = 0;
    std::string kind;
    bool failed = false;
    std::string failure;  // diagnostic when failed
    Block block;          // weights from the best recorded evaluation
    std::vector<EvalPoint> eval_history;  // epoch 0 baseline plus every eval_every
    std::vector<double> loss_history;     // mean objective per epoch, [0] = pre-training
    double final_local_loss = 0.0;
    double best_eval = 0.0;
    double wall_time_s = 0.0;
};

// Momentum SGD over a set of parameter tensors. Gradients live in each
// tensor's grad buffer; velocities are owned here.
struct SgdState {
    std::vector<Tensor*> params;
    std::vector<std::vector<float>> velocity;

    explicit SgdState(std::vector<Tensor*> p);
    void zero_grads();
    void step(float lr, float momentum);
};

// Train one replacement block against a frozen teacher. The teacher is
// shared read-only; the result owns its weights and RNG stream, so tasks may
// run concurrently. Divergence (non-finite loss) marks the result failed
// with a diagnostic instead of throwing.
TrainedBlockResult train_block(const Network& teacher, const DistillTask& task,
                               const Dataset& data, const SplitIndices& split);

// Top-1 accuracy of the teacher with exactly block `block_index` swapped for
// `student`, everything else frozen teacher weights.
double evaluate_with_student_block(const Network& teacher, int block_index, const Block& student,
                                   const Dataset& data, const std::vector<int>& eval_idx,
                                   int batch_size);

// Top-1 accuracy of a network over the given sample indices.
double evaluate_network(const Network& net, const Dataset& data, const std::vector<int>& idx,
                        int batch_size);

struct ReplacementDecision {
    int block_index = 0;
    std::string kind;
    bool replaced = false;
    bool failed = false;
    double best_eval = 0.0;
    double threshold = 0.0;
    std::string note;
};

struct AssembledStudent {
    Network net;
    std::vector<ReplacementDecision> decisions;
};

// Swap in every trained block whose best recorded accuracy is strictly
// greater than the threshold; all other blocks keep teacher weights. Zero
// replacements is a legal outcome.
AssembledStudent reassemble(const Network& teacher, const std::vector<TrainedBlockResult>& results,
                            double threshold);

struct FinetuneResult {
    double initial_eval = 0.0;
    double final_eval = 0.0;
    std::vector<double> loss_history;
    std::vector<EvalPoint> eval_history;
};

// Cross-entropy training of the assembled student. With freeze_non_replaced
// only the replacement blocks receive gradients; original teacher blocks and
// the classifier stay bitwise unchanged.
FinetuneResult finetune(Network& student, const Dataset& data, const SplitIndices& split,
                        int epochs, bool freeze_non_replaced, float lr, float momentum,
                        int batch_size, uint64_t seed);

struct TeacherTrainResult {
    std::vector<double> loss_history;
    std::vector<EvalPoint> eval_history;
    double final_eval = 0.0;
};

// Ordinary supervised training, used to produce teacher checkpoints.
TeacherTrainResult train_teacher(Network& net, const Dataset& data, const SplitIndices& split,
                                 int epochs, float lr, float momentum, int batch_size,
                                 uint64_t seed);

}  // namespace pbkd
