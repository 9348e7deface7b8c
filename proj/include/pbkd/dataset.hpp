#pragma once

// Training data handling: a procedural 10-class image generator for desk-
// scale runs, a loader for the CIFAR-10 binary format, and seeded splitting.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pbkd/tensor.hpp"

namespace pbkd {

struct Dataset {
    int c = 0, h = 0, w = 0;     // per-image shape
    int classes = 0;
    std::vector<float> images;   // count * c*h*w, values in [0,1]
    std::vector<int> labels;

    int count() const { return static_cast<int>(labels.size()); }
    size_t image_size() const { return static_cast<size_t>(c) * h * w; }
};

// Procedural dataset: 3x16x16 images of oriented sine stripes, 10 classes
// (5 orientations x 2 spatial frequencies), label = index mod 10. Every image
// is generated from its own seed derived from (seed, index), so the result
// is byte-identical for any thread count. threads >= 1.
Dataset make_synthetic_dataset(int count, uint64_t seed, int threads);

// CIFAR-10 binary format: records of 3,073 bytes (1 label byte, then 3,072
// pixel bytes channel-major R,G,B at 32x32). `path` may be one .bin file or
// a directory whose *.bin files are loaded in name order. Pixels scale to
// [0,1].
Dataset load_cifar10(const std::string& path);

struct SplitIndices {
    std::vector<int> train_idx;
    std::vector<int> eval_idx;
};

// Seeded stratified split: within each class the indices are shuffled and the
// first round(fraction * class_count) go to the eval side. eval_fraction in
// (0,1); every class must have at least one sample on each side.
SplitIndices stratified_split(const Dataset& d, double eval_fraction, uint64_t seed);

// Assembles the selected images into a batch tensor / label list.
Tensor gather_batch(const Dataset& d, std::span<const int> idx);
std::vector<int> gather_labels(const Dataset& d, std::span<const int> idx);

}  // namespace pbkd
