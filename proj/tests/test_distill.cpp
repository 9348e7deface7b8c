#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "pbkd/dataset.hpp"
#include "pbkd/distill.hpp"
#include "pbkd/model.hpp"
#include "pbkd/replacement.hpp"

using namespace pbkd;

namespace {

const char* kToySpec = R"({
  "input_shape": [3, 16, 16],
  "blocks": [
    {"kind": "conv3x3", "out_channels": 16, "stride": 1},
    {"kind": "conv3x3", "out_channels": 32, "stride": 2},
    {"kind": "conv3x3", "out_channels": 32, "stride": 1}
  ],
  "classifier": [
    {"kind": "global_avg_pool"},
    {"kind": "dense", "out_features": 10}
  ]
})";

struct Fixture {
    Network teacher;
    Dataset data;
    SplitIndices split;

    Fixture() {
        teacher = parse_model_spec(kToySpec, "toy");
        init_weights(teacher, 404);
        data = make_synthetic_dataset(60, 11, 2);
        split = stratified_split(data, 0.2, 12);
    }
};

DistillTask small_task(int block_index, int epochs = 4) {
    DistillTask t;
    t.block_index = block_index;
    t.kind = CandidateKind::TwoLayer;
    t.epochs = epochs;
    t.eval_every = 2;
    t.seed = 1234;
    t.batch_size = 16;
    t.lr = 0.02f;
    return t;
}

}  // namespace

TEST_CASE("loss mode names round-trip") {
    CHECK(loss_mode_from_name("local_only") == LossMode::LocalOnly);
    CHECK(loss_mode_from_name("local") == LossMode::LocalOnly);
    CHECK(loss_mode_from_name("combined") == LossMode::Combined);
    CHECK_THROWS_AS(loss_mode_from_name("global"), SpecError);
    CHECK(std::string(loss_mode_name(LossMode::Combined)) == "combined");
}

TEST_CASE("train_block leaves the teacher byte-identical") {
    Fixture f;
    const uint64_t before = network_weight_hash(f.teacher);
    TrainedBlockResult r = train_block(f.teacher, small_task(2), f.data, f.split);
    CHECK_FALSE(r.failed);
    CHECK(network_weight_hash(f.teacher) == before);
}

TEST_CASE("train_block is a pure function of task, teacher, and data") {
    Fixture f;
    TrainedBlockResult a = train_block(f.teacher, small_task(1), f.data, f.split);
    TrainedBlockResult b = train_block(f.teacher, small_task(1), f.data, f.split);
    CHECK(a.loss_history == b.loss_history);
    CHECK(a.best_eval == b.best_eval);
    Network na = parse_model_spec(kToySpec, "t"), nb = parse_model_spec(kToySpec, "t");
    init_weights(na, 1);
    init_weights(nb, 1);
    na.blocks[0] = a.block;
    nb.blocks[0] = b.block;
    CHECK(network_weight_hash(na) == network_weight_hash(nb));

    // A different task seed changes the trajectory.
    DistillTask other = small_task(1);
    other.seed = 4321;
    TrainedBlockResult c = train_block(f.teacher, other, f.data, f.split);
    CHECK(a.loss_history != c.loss_history);
}

TEST_CASE("pre-training baseline equals the candidate's local loss computed directly") {
    Fixture f;
    DistillTask task = small_task(2, /*epochs=*/1);
    TrainedBlockResult r = train_block(f.teacher, task, f.data, f.split);
    REQUIRE_FALSE(r.loss_history.empty());

    // Rebuild the untouched candidate from the documented seed derivation and
    // replay the baseline pass: inference mode, train indices in file order,
    // contiguous batches, mean of per-batch means.
    const Block& tb = f.teacher.blocks[1];
    ReplacementBlock cand = build_candidate(task.kind, tb.in_channels, tb.out_channels, tb.stride,
                                            mix_seed(task.seed, 0));
    double sum = 0.0;
    int batches = 0;
    for (size_t at = 0; at < f.split.train_idx.size(); at += task.batch_size) {
        const size_t end = std::min(at + task.batch_size, f.split.train_idx.size());
        std::vector<int> idx(f.split.train_idx.begin() + at, f.split.train_idx.begin() + end);
        Tensor x = gather_batch(f.data, idx);
        Tensor a_prev = prefix_infer(f.teacher, x, 2, false);
        Tensor t_out = block_infer(tb, a_prev);
        Tensor s_out = block_infer(cand.block, a_prev);
        sum += ops::mse_local_loss(s_out, t_out);
        ++batches;
    }
    CHECK(r.loss_history[0] == doctest::Approx(sum / batches).epsilon(1e-9));
}

TEST_CASE("training reduces the local loss well below the baseline") {
    Fixture f;
    TrainedBlockResult r = train_block(f.teacher, small_task(1, /*epochs=*/25), f.data, f.split);
    REQUIRE_FALSE(r.failed);
    REQUIRE(r.loss_history.size() == 26);  // baseline + 25 epochs
    CHECK(r.final_local_loss < 0.5 * r.loss_history[0]);
    // Trajectory is mostly monotone for a small lr on this smooth objective.
    int non_increasing = 0;
    for (size_t i = 1; i + 1 < r.loss_history.size(); ++i)
        if (r.loss_history[i + 1] <= r.loss_history[i]) ++non_increasing;
    CHECK(non_increasing >= 18);
}

TEST_CASE("eval history epochs are multiples of eval_every, starting at zero") {
    Fixture f;
    DistillTask t = small_task(3, /*epochs=*/5);
    t.eval_every = 2;
    TrainedBlockResult r = train_block(f.teacher, t, f.data, f.split);
    REQUIRE(r.eval_history.size() == 3);
    CHECK(r.eval_history[0].epoch == 0);
    CHECK(r.eval_history[1].epoch == 2);
    CHECK(r.eval_history[2].epoch == 4);
    double best = -1.0;
    for (const EvalPoint& p : r.eval_history) best = std::max(best, p.accuracy);
    CHECK(r.best_eval == doctest::Approx(best));
}

TEST_CASE("combined objective is linear in the local weight") {
    // With a shared seed the three runs see identical weights and batches, so
    // per Eq-style composition: obj(lambda=2) = 2*obj(local) + obj(lambda=0).
    Fixture f;
    auto run = [&](LossMode mode, float lambda) {
        DistillTask t = small_task(2, /*epochs=*/1);
        t.loss_mode = mode;
        t.lambda_local = lambda;
        t.max_steps = 1;  // a single optimizer step, so epoch means align
        return train_block(f.teacher, t, f.data, f.split);
    };
    TrainedBlockResult ce_only = run(LossMode::Combined, 0.0f);
    TrainedBlockResult both = run(LossMode::Combined, 2.0f);
    TrainedBlockResult local = run(LossMode::LocalOnly, 0.0f);
    REQUIRE(ce_only.loss_history.size() >= 2);
    REQUIRE(both.loss_history.size() >= 2);
    REQUIRE(local.loss_history.size() >= 2);
    CHECK(both.loss_history[1] ==
          doctest::Approx(2.0 * local.loss_history[1] + ce_only.loss_history[1]).epsilon(1e-9));
}

TEST_CASE("max_steps caps the number of optimizer steps") {
    Fixture f;
    DistillTask t = small_task(1, /*epochs=*/10);
    t.max_steps = 1;
    TrainedBlockResult r = train_block(f.teacher, t, f.data, f.split);
    CHECK_FALSE(r.failed);
    // One step = one partial epoch recorded after the baseline entry.
    CHECK(r.loss_history.size() == 2);
}

TEST_CASE("a diverging block is reported, not thrown") {
    Fixture f;
    DistillTask t = small_task(1, /*epochs=*/30);
    // Candidates are hard to blow up through the lr alone: batch norm rescales
    // any finite weights and the trailing relu clamps NaN activations to zero,
    // so the local mse stays finite. An infinite local-loss weight makes the
    // combined objective non-finite on the first batch instead.
    t.loss_mode = LossMode::Combined;
    t.lambda_local = std::numeric_limits<float>::infinity();
    TrainedBlockResult r = train_block(f.teacher, t, f.data, f.split);
    CHECK(r.failed);
    CHECK(r.failure.find("diverged") != std::string::npos);
    CHECK(r.wall_time_s >= 0.0);
}

TEST_CASE("task validation rejects out-of-range settings") {
    Fixture f;
    auto expect_reject = [&](DistillTask t) {
        CHECK_THROWS_AS(train_block(f.teacher, t, f.data, f.split), SpecError);
    };
    DistillTask t = small_task(1);
    t.epochs = 0;
    expect_reject(t);
    t = small_task(1);
    t.eval_every = 0;
    expect_reject(t);
    t = small_task(1);
    t.batch_size = 0;
    expect_reject(t);
    t = small_task(1);
    t.lambda_local = -1.0f;
    expect_reject(t);
    t = small_task(1);
    t.threshold = 1.5;
    expect_reject(t);
    t = small_task(1);
    t.max_steps = -1;
    expect_reject(t);
    t = small_task(0);
    expect_reject(t);  // block indices are 1-based
    t = small_task(4);
    expect_reject(t);  // beyond the last block

    // Combined mode needs a classifier to route the task loss through.
    Network headless = f.teacher;
    headless.classifier = Block{};
    DistillTask c = small_task(1);
    c.loss_mode = LossMode::Combined;
    CHECK_THROWS_AS(train_block(headless, c, f.data, f.split), SpecError);
}

TEST_CASE("substituting the teacher's own block reproduces teacher accuracy") {
    Fixture f;
    const double teacher_acc = evaluate_network(f.teacher, f.data, f.split.eval_idx, 16);
    for (int k = 1; k <= 3; ++k) {
        const double acc = evaluate_with_student_block(f.teacher, k, f.teacher.blocks[k - 1],
                                                       f.data, f.split.eval_idx, 16);
        CHECK(acc == doctest::Approx(teacher_acc));
    }
    std::vector<int> empty;
    CHECK_THROWS(evaluate_network(f.teacher, f.data, empty, 16));
}

TEST_CASE("reassembly replaces only blocks strictly above the threshold") {
    Fixture f;
    auto fake_result = [&](int k, double best, bool failed) {
        TrainedBlockResult r;
        r.block_index = k;
        r.kind = candidate_kind_name(CandidateKind::TwoLayer);
        r.failed = failed;
        if (failed) r.failure = "block " + std::to_string(k) + " diverged";
        r.best_eval = best;
        const Block& tb = f.teacher.blocks[k - 1];
        r.block = build_candidate(CandidateKind::TwoLayer, tb.in_channels, tb.out_channels,
                                  tb.stride, 7)
                      .block;
        return r;
    };

    // Results arrive out of order; block 2 sits exactly at the threshold.
    std::vector<TrainedBlockResult> results{fake_result(3, 0.80, false),
                                            fake_result(1, 0.90, false),
                                            fake_result(2, 0.75, false)};
    AssembledStudent s = reassemble(f.teacher, results, 0.75);

    REQUIRE(s.decisions.size() == 3);
    CHECK(s.decisions[0].block_index == 1);  // sorted by block
    CHECK(s.decisions[0].replaced);
    CHECK_FALSE(s.decisions[1].replaced);  // 0.75 > 0.75 is false
    CHECK(s.decisions[1].note.find("not above") != std::string::npos);
    CHECK(s.decisions[2].replaced);

    // Replaced positions carry the candidate; the rest keep the teacher.
    CHECK(s.net.blocks[0].spec_kind == "two_layer");
    CHECK(s.net.blocks[0].name == "block1");  // takes over the teacher block's name
    CHECK(s.net.blocks[1].spec_kind == "conv3x3");
    CHECK(s.net.blocks[2].spec_kind == "two_layer");

    // Failed blocks are never installed regardless of their eval.
    std::vector<TrainedBlockResult> with_failure{fake_result(1, 0.99, true)};
    AssembledStudent s2 = reassemble(f.teacher, with_failure, 0.1);
    CHECK_FALSE(s2.decisions[0].replaced);
    CHECK(s2.net.blocks[0].spec_kind == "conv3x3");

    // Duplicate and out-of-range block indices are rejected.
    std::vector<TrainedBlockResult> dup{fake_result(1, 0.9, false), fake_result(1, 0.9, false)};
    CHECK_THROWS_AS(reassemble(f.teacher, dup, 0.5), SpecError);
    std::vector<TrainedBlockResult> oob{fake_result(3, 0.9, false)};
    oob[0].block_index = 9;
    CHECK_THROWS_AS(reassemble(f.teacher, oob, 0.5), SpecError);
}

TEST_CASE("fine-tuning with zero epochs or nothing trainable is a bitwise no-op") {
    Fixture f;
    Network net = f.teacher;  // no replacement blocks anywhere
    const uint64_t before = network_weight_hash(net);

    FinetuneResult zero = finetune(net, f.data, f.split, 0, /*freeze_non_replaced=*/false, 0.01f,
                                   0.9f, 16, 77);
    CHECK(network_weight_hash(net) == before);
    CHECK(zero.final_eval == doctest::Approx(zero.initial_eval));

    // freeze_non_replaced with no replacements leaves nothing to update.
    FinetuneResult frozen = finetune(net, f.data, f.split, 3, /*freeze_non_replaced=*/true, 0.01f,
                                     0.9f, 16, 77);
    CHECK(network_weight_hash(net) == before);
    CHECK(frozen.eval_history.size() == 1);  // the initial point only
}

TEST_CASE("fine-tuning trains replacement blocks and records eval history") {
    Fixture f;
    TrainedBlockResult r = train_block(f.teacher, small_task(1, 2), f.data, f.split);
    std::vector<TrainedBlockResult> results{r};
    AssembledStudent s = reassemble(f.teacher, results, -0.5);  // force the swap
    REQUIRE(s.decisions[0].replaced);

    const std::vector<float> tuned_before = s.net.blocks[0].layers[0].weight.data;
    FinetuneResult ft = finetune(s.net, f.data, f.split, 2, /*freeze_non_replaced=*/true, 0.005f,
                                 0.9f, 16, 78);
    CHECK(ft.eval_history.size() == 3);
    CHECK(ft.loss_history.size() == 2);
    CHECK(ft.eval_history[0].epoch == 0);

    // The replacement block moved; frozen teacher blocks and classifier did not.
    CHECK(s.net.blocks[0].layers[0].weight.data != tuned_before);
    for (int b = 1; b < 3; ++b)
        CHECK(s.net.blocks[b].layers[0].weight.data == f.teacher.blocks[b].layers[0].weight.data);
    CHECK(s.net.classifier.layers[1].weight.data == f.teacher.classifier.layers[1].weight.data);
}

TEST_CASE("teacher training improves its loss on the synthetic task") {
    Network net = parse_model_spec(kToySpec, "toy");
    init_weights(net, 5);
    Dataset data = make_synthetic_dataset(120, 3, 2);
    SplitIndices split = stratified_split(data, 0.1, 4);
    TeacherTrainResult r = train_teacher(net, data, split, /*epochs=*/4, 0.05f, 0.9f, 24, 900);
    REQUIRE(r.loss_history.size() == 4);
    CHECK(r.loss_history.back() < r.loss_history.front());
    REQUIRE(r.eval_history.size() == 5);  // epoch 0 plus one per epoch
    CHECK(r.final_eval == doctest::Approx(r.eval_history.back().accuracy));
}
