#include "pbkd/distill.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <set>
#include <sstream>

#include "pbkd/ops.hpp"

namespace pbkd {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::vector<std::vector<int>> make_batches(const std::vector<int>& indices, int batch_size) {
    std::vector<std::vector<int>> batches;
    for (size_t at = 0; at < indices.size(); at += static_cast<size_t>(batch_size)) {
        const size_t end = std::min(indices.size(), at + static_cast<size_t>(batch_size));
        batches.emplace_back(indices.begin() + static_cast<long>(at),
                             indices.begin() + static_cast<long>(end));
    }
    return batches;
}

// Forward through a frozen block, keeping the cache needed to push gradients
// back through it. Inference mode touches no state, so the cast is safe.
Tensor frozen_cached_forward(const Block& b, const Tensor& x, BlockCache* cache) {
    return block_forward(const_cast<Block&>(b), x, /*train=*/false, cache);
}

long count_correct(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.n != static_cast<int>(labels.size()))
        throw ShapeError("logit batch does not match label count");
    long correct = 0;
    for (int i = 0; i < logits.n; ++i) {
        int best = 0;
        float best_v = logits.at(i, 0, 0, 0);
        for (int c = 1; c < logits.c; ++c) {
            const float v = logits.at(i, c, 0, 0);
            if (v > best_v) {
                best_v = v;
                best = c;
            }
        }
        if (best == labels[i]) ++correct;
    }
    return correct;
}

// Student output -> frozen teacher remainder -> classifier logits, with the
// caches needed for the classification-loss gradient. blocks k+1..K of the
// teacher follow the student block at position k (1-based).
struct RemainderCaches {
    std::vector<BlockCache> blocks;
    BlockCache classifier;
};

Tensor remainder_forward(const Network& teacher, int k, const Tensor& student_out,
                         RemainderCaches& caches) {
    Tensor cur = student_out;
    caches.blocks.clear();
    caches.blocks.resize(teacher.blocks.size() - static_cast<size_t>(k));
    for (size_t bi = static_cast<size_t>(k); bi < teacher.blocks.size(); ++bi)
        cur = frozen_cached_forward(teacher.blocks[bi], cur,
                                    &caches.blocks[bi - static_cast<size_t>(k)]);
    return frozen_cached_forward(teacher.classifier, cur, &caches.classifier);
}

Tensor remainder_backward(const Network& teacher, int k, const RemainderCaches& caches,
                          const Tensor& glogits) {
    Tensor g = block_backward(const_cast<Block&>(teacher.classifier), caches.classifier, glogits,
                              /*need_input_grad=*/true, /*param_grads=*/false);
    for (size_t bi = teacher.blocks.size(); bi-- > static_cast<size_t>(k);)
        g = block_backward(const_cast<Block&>(teacher.blocks[bi]),
                           caches.blocks[bi - static_cast<size_t>(k)], g, true, false);
    return g;
}

void validate_task(const DistillTask& task, const Network& teacher) {
    if (task.epochs < 1) throw SpecError("epochs must be at least 1");
    if (task.eval_every < 1) throw SpecError("eval_every must be at least 1");
    if (task.batch_size < 1) throw SpecError("batch_size must be at least 1");
    if (task.lambda_local < 0) throw SpecError("lambda_local must be non-negative");
    if (task.threshold < 0.0 || task.threshold > 1.0)
        throw SpecError("threshold must lie in [0,1]");
    if (task.max_steps < 0) throw SpecError("max_steps must be non-negative");
    const std::vector<int> ok = identify_replaceable(teacher);
    if (!std::binary_search(ok.begin(), ok.end(), task.block_index))
        throw SpecError("block " + std::to_string(task.block_index) + " of '" + teacher.name +
                        "' is not replaceable");
    if (task.loss_mode == LossMode::Combined && !teacher.has_classifier())
        throw SpecError("combined loss needs a network with a classifier");
}

}  // namespace

const char* loss_mode_name(LossMode m) {
    return m == LossMode::LocalOnly ? "local_only" : "combined";
}

LossMode loss_mode_from_name(const std::string& name) {
    if (name == "local_only" || name == "local") return LossMode::LocalOnly;
    if (name == "combined") return LossMode::Combined;
    throw SpecError("unknown loss mode '" + name + "' (expected local_only or combined)");
}

SgdState::SgdState(std::vector<Tensor*> p) : params(std::move(p)) {
    velocity.reserve(params.size());
    for (Tensor* t : params) velocity.emplace_back(t->data.size(), 0.0f);
}

void SgdState::zero_grads() {
    for (Tensor* t : params) {
        t->ensure_grad();
        t->zero_grad();
    }
}

void SgdState::step(float lr, float momentum) {
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor& t = *params[i];
        t.ensure_grad();
        ops::sgd_step<float>(std::span<float>(t.data), std::span<const float>(t.grad),
                             std::span<float>(velocity[i]), lr, momentum);
    }
}

TrainedBlockResult train_block(const Network& teacher, const DistillTask& task,
                               const Dataset& data, const SplitIndices& split) {
    const auto t0 = Clock::now();
    TrainedBlockResult res;
    res.block_index = task.block_index;
    res.kind = candidate_kind_name(task.kind);
    res.best_eval = -1.0;

    validate_task(task, teacher);
    if (split.train_idx.empty()) throw SpecError("training split is empty");
    if (split.eval_idx.empty()) throw SpecError("evaluation split is empty");

    const int k = task.block_index;
    const Block& tb = teacher.blocks[static_cast<size_t>(k) - 1];
    ReplacementBlock cand = build_candidate(task.kind, tb.in_channels, tb.out_channels, tb.stride,
                                            mix_seed(task.seed, 0));
    Block student = std::move(cand.block);

    SgdState opt(collect_block_trainable(student));
    const bool combined = task.loss_mode == LossMode::Combined;

    auto record_eval = [&](int epoch) {
        const double acc = evaluate_with_student_block(teacher, k, student, data, split.eval_idx,
                                                       task.batch_size);
        res.eval_history.push_back({epoch, acc});
        if (acc > res.best_eval) {
            res.best_eval = acc;
            res.block = student;  // snapshot the weights that earned this accuracy
        }
    };

    // Mean objective and mean local loss of the untouched student, recorded
    // as the epoch-0 entries of the histories.
    {
        double obj_sum = 0.0, local_sum = 0.0;
        const auto batches = make_batches(split.train_idx, task.batch_size);
        for (const std::vector<int>& batch : batches) {
            const Tensor x = gather_batch(data, batch);
            const Tensor a_prev = prefix_infer(teacher, x, k, /*inclusive=*/false);
            const Tensor t_out = block_infer(tb, a_prev);
            const Tensor s_out = block_infer(student, a_prev);
            require_same_shape("student block output", s_out.n, s_out.c, s_out.h, s_out.w, t_out.n,
                               t_out.c, t_out.h, t_out.w);
            const double local = ops::mse_local_loss(s_out, t_out);
            double obj = local;
            if (combined) {
                RemainderCaches caches;
                const Tensor logits = remainder_forward(teacher, k, s_out, caches);
                const std::vector<int> labels = gather_labels(data, batch);
                const double ce = ops::softmax_cross_entropy_fwd<float>(logits, labels, nullptr);
                obj = static_cast<double>(task.lambda_local) * local + ce;
            }
            obj_sum += obj;
            local_sum += local;
        }
        res.loss_history.push_back(obj_sum / static_cast<double>(batches.size()));
        res.final_local_loss = local_sum / static_cast<double>(batches.size());
    }
    record_eval(0);

    long steps_done = 0;
    bool step_cap_hit = false;
    for (int epoch = 1; epoch <= task.epochs && !step_cap_hit; ++epoch) {
        std::vector<int> order = split.train_idx;
        std::mt19937_64 rng(mix_seed(task.seed, static_cast<uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), rng);

        double obj_sum = 0.0, local_sum = 0.0;
        int batches_done = 0;
        for (const std::vector<int>& batch : make_batches(order, task.batch_size)) {
            if (task.max_steps > 0 && steps_done >= task.max_steps) {
                step_cap_hit = true;
                break;
            }
            const Tensor x = gather_batch(data, batch);
            const Tensor a_prev = prefix_infer(teacher, x, k, false);
            const Tensor t_out = block_infer(tb, a_prev);

            BlockCache cache;
            const Tensor s_out = block_forward(student, a_prev, /*train=*/true, &cache);
            const double local = ops::mse_local_loss(s_out, t_out);

            Tensor gs(s_out.n, s_out.c, s_out.h, s_out.w);
            double obj = local;
            if (!combined) {
                ops::mse_local_loss_bwd<float>(s_out, t_out, gs.data.data(), 1.0f);
            } else {
                if (task.lambda_local > 0)
                    ops::mse_local_loss_bwd<float>(s_out, t_out, gs.data.data(), task.lambda_local);
                RemainderCaches caches;
                const Tensor logits = remainder_forward(teacher, k, s_out, caches);
                const std::vector<int> labels = gather_labels(data, batch);
                Tensor probs(logits.n, logits.c, 1, 1);
                const double ce = ops::softmax_cross_entropy_fwd(logits, labels, &probs);
                Tensor glog(logits.n, logits.c, 1, 1);
                ops::softmax_cross_entropy_bwd<float>(probs, labels, glog.data.data(), 1.0f);
                const Tensor g_cls = remainder_backward(teacher, k, caches, glog);
                for (size_t i = 0; i < gs.data.size(); ++i) gs.data[i] += g_cls.data[i];
                obj = static_cast<double>(task.lambda_local) * local + ce;
            }

            if (!std::isfinite(obj)) {
                std::ostringstream msg;
                msg << "block " << k << " diverged at epoch " << epoch << " batch " << batches_done
                    << " (loss " << obj << ")";
                res.failed = true;
                res.failure = msg.str();
                res.wall_time_s = seconds_since(t0);
                return res;
            }

            opt.zero_grads();
            block_backward(student, cache, gs, /*need_input_grad=*/false, /*param_grads=*/true);
            opt.step(task.lr, task.momentum);
            obj_sum += obj;
            local_sum += local;
            ++batches_done;
            ++steps_done;
        }
        if (batches_done == 0) break;  // cap landed on an epoch boundary
        res.loss_history.push_back(obj_sum / batches_done);
        res.final_local_loss = local_sum / batches_done;
        if (epoch % task.eval_every == 0) record_eval(epoch);
    }

    res.wall_time_s = seconds_since(t0);
    return res;
}

double evaluate_with_student_block(const Network& teacher, int block_index, const Block& student,
                                   const Dataset& data, const std::vector<int>& eval_idx,
                                   int batch_size) {
    if (eval_idx.empty()) throw SpecError("evaluation split is empty");
    if (batch_size < 1) throw SpecError("batch_size must be at least 1");
    if (block_index < 1 || block_index > static_cast<int>(teacher.blocks.size()))
        throw SpecError("block index " + std::to_string(block_index) + " out of range for '" +
                        teacher.name + "'");
    long correct = 0;
    for (const std::vector<int>& batch : make_batches(eval_idx, batch_size)) {
        const Tensor x = gather_batch(data, batch);
        Tensor cur = prefix_infer(teacher, x, block_index, /*inclusive=*/false);
        cur = block_infer(student, cur);
        for (size_t bi = static_cast<size_t>(block_index); bi < teacher.blocks.size(); ++bi)
            cur = block_infer(teacher.blocks[bi], cur);
        if (teacher.has_classifier()) cur = block_infer(teacher.classifier, cur);
        correct += count_correct(cur, gather_labels(data, batch));
    }
    return static_cast<double>(correct) / static_cast<double>(eval_idx.size());
}

double evaluate_network(const Network& net, const Dataset& data, const std::vector<int>& idx,
                        int batch_size) {
    if (idx.empty()) throw SpecError("evaluation split is empty");
    if (batch_size < 1) throw SpecError("batch_size must be at least 1");
    long correct = 0;
    for (const std::vector<int>& batch : make_batches(idx, batch_size)) {
        const Tensor logits = network_infer(net, gather_batch(data, batch));
        correct += count_correct(logits, gather_labels(data, batch));
    }
    return static_cast<double>(correct) / static_cast<double>(idx.size());
}

AssembledStudent reassemble(const Network& teacher, const std::vector<TrainedBlockResult>& results,
                            double threshold) {
    AssembledStudent out;
    out.net = teacher;
    std::set<int> seen;
    for (const TrainedBlockResult& r : results) {
        if (r.block_index < 1 || r.block_index > static_cast<int>(teacher.blocks.size()))
            throw SpecError("result references block " + std::to_string(r.block_index) +
                            ", which '" + teacher.name + "' does not have");
        if (!seen.insert(r.block_index).second)
            throw SpecError("two results reference block " + std::to_string(r.block_index));

        ReplacementDecision d;
        d.block_index = r.block_index;
        d.kind = r.kind;
        d.failed = r.failed;
        d.best_eval = r.best_eval;
        d.threshold = threshold;
        if (r.failed) {
            d.note = r.failure;
        } else if (r.best_eval > threshold) {
            Block nb = r.block;
            nb.name = teacher.blocks[static_cast<size_t>(r.block_index) - 1].name;
            nb.replaceable = false;
            out.net.blocks[static_cast<size_t>(r.block_index) - 1] = std::move(nb);
            d.replaced = true;
        } else {
            d.note = "accuracy not above threshold";
        }
        out.decisions.push_back(d);
    }
    std::sort(out.decisions.begin(), out.decisions.end(),
              [](const ReplacementDecision& a, const ReplacementDecision& b) {
                  return a.block_index < b.block_index;
              });
    return out;
}

FinetuneResult finetune(Network& student, const Dataset& data, const SplitIndices& split,
                        int epochs, bool freeze_non_replaced, float lr, float momentum,
                        int batch_size, uint64_t seed) {
    if (epochs < 0) throw SpecError("epochs must be non-negative");
    if (batch_size < 1) throw SpecError("batch_size must be at least 1");
    if (split.train_idx.empty()) throw SpecError("training split is empty");
    if (!student.has_classifier()) throw SpecError("fine-tuning needs a classifier head");

    FinetuneResult fr;
    fr.initial_eval = evaluate_network(student, data, split.eval_idx, batch_size);
    fr.final_eval = fr.initial_eval;
    fr.eval_history.push_back({0, fr.initial_eval});

    std::vector<bool> mask;
    std::vector<Tensor*> params;
    if (freeze_non_replaced) {
        mask.resize(student.blocks.size(), false);
        for (size_t i = 0; i < student.blocks.size(); ++i) {
            if (!is_replacement_block(student.blocks[i])) continue;
            mask[i] = true;
            for (Tensor* t : collect_block_trainable(student.blocks[i])) params.push_back(t);
        }
    } else {
        params = collect_trainable(student);
    }
    if (epochs == 0 || params.empty()) return fr;  // nothing to train is a no-op

    SgdState opt(std::move(params));
    for (int epoch = 1; epoch <= epochs; ++epoch) {
        std::vector<int> order = split.train_idx;
        std::mt19937_64 rng(mix_seed(seed, static_cast<uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), rng);

        double loss_sum = 0.0;
        int batches_done = 0;
        for (const std::vector<int>& batch : make_batches(order, batch_size)) {
            const Tensor x = gather_batch(data, batch);
            const std::vector<int> labels = gather_labels(data, batch);
            NetCache cache;
            const Tensor logits = network_forward_train(student, x, cache, mask);
            Tensor probs(logits.n, logits.c, 1, 1);
            const double ce = ops::softmax_cross_entropy_fwd(logits, labels, &probs);
            if (!std::isfinite(ce))
                throw std::runtime_error("fine-tuning diverged at epoch " + std::to_string(epoch));
            Tensor glog(logits.n, logits.c, 1, 1);
            ops::softmax_cross_entropy_bwd<float>(probs, labels, glog.data.data(), 1.0f);
            opt.zero_grads();
            network_backward(student, cache, glog, mask,
                             /*freeze_classifier=*/freeze_non_replaced);
            opt.step(lr, momentum);
            loss_sum += ce;
            ++batches_done;
        }
        fr.loss_history.push_back(loss_sum / batches_done);
        const double acc = evaluate_network(student, data, split.eval_idx, batch_size);
        fr.eval_history.push_back({epoch, acc});
        fr.final_eval = acc;
    }
    return fr;
}

TeacherTrainResult train_teacher(Network& net, const Dataset& data, const SplitIndices& split,
                                 int epochs, float lr, float momentum, int batch_size,
                                 uint64_t seed) {
    if (epochs < 0) throw SpecError("epochs must be non-negative");
    if (batch_size < 1) throw SpecError("batch_size must be at least 1");
    if (split.train_idx.empty()) throw SpecError("training split is empty");
    if (!net.has_classifier()) throw SpecError("training needs a classifier head");

    TeacherTrainResult tr;
    tr.final_eval = evaluate_network(net, data, split.eval_idx, batch_size);
    tr.eval_history.push_back({0, tr.final_eval});
    if (epochs == 0) return tr;

    SgdState opt(collect_trainable(net));
    for (int epoch = 1; epoch <= epochs; ++epoch) {
        std::vector<int> order = split.train_idx;
        std::mt19937_64 rng(mix_seed(seed, static_cast<uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), rng);

        double loss_sum = 0.0;
        int batches_done = 0;
        for (const std::vector<int>& batch : make_batches(order, batch_size)) {
            const Tensor x = gather_batch(data, batch);
            const std::vector<int> labels = gather_labels(data, batch);
            NetCache cache;
            const Tensor logits = network_forward_train(net, x, cache);
            Tensor probs(logits.n, logits.c, 1, 1);
            const double ce = ops::softmax_cross_entropy_fwd(logits, labels, &probs);
            if (!std::isfinite(ce))
                throw std::runtime_error("teacher training diverged at epoch " +
                                         std::to_string(epoch));
            Tensor glog(logits.n, logits.c, 1, 1);
            ops::softmax_cross_entropy_bwd<float>(probs, labels, glog.data.data(), 1.0f);
            opt.zero_grads();
            network_backward(net, cache, glog);
            opt.step(lr, momentum);
            loss_sum += ce;
            ++batches_done;
        }
        tr.loss_history.push_back(loss_sum / batches_done);
        const double acc = evaluate_network(net, data, split.eval_idx, batch_size);
        tr.eval_history.push_back({epoch, acc});
        tr.final_eval = acc;
    }
    return tr;
}

}  // namespace pbkd
