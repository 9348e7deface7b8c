#include "pbkd/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <thread>

namespace pbkd {

namespace {

constexpr int kSynClasses = 10;
constexpr int kSynChannels = 3;
constexpr int kSynSide = 16;

// Fills one image. Each class is a sine stripe pattern at a fixed orientation
// and frequency; amplitude, phase and pixel noise vary per image.
void render_synthetic_image(float* out, int label, uint64_t image_seed) {
    std::mt19937_64 rng(image_seed);
    std::uniform_real_distribution<float> phase_dist(0.0f, 2.0f * std::numbers::pi_v<float>);
    std::uniform_real_distribution<float> amp_dist(0.7f, 1.0f);
    std::normal_distribution<float> noise(0.0f, 0.05f);

    const float theta = std::numbers::pi_v<float> * static_cast<float>(label % 5) / 5.0f;
    const float freq = label < 5 ? 2.0f : 4.0f;
    const float phase = phase_dist(rng);
    const float amp = amp_dist(rng);
    const float ct = std::cos(theta), st = std::sin(theta);
    static constexpr float kChannelScale[kSynChannels] = {1.0f, 0.75f, 0.5f};

    size_t i = 0;
    for (int ch = 0; ch < kSynChannels; ++ch) {
        for (int y = 0; y < kSynSide; ++y) {
            const float v = static_cast<float>(y) / (kSynSide - 1) - 0.5f;
            for (int x = 0; x < kSynSide; ++x) {
                const float u = static_cast<float>(x) / (kSynSide - 1) - 0.5f;
                const float t = ct * u + st * v;
                const float s =
                    std::sin(2.0f * std::numbers::pi_v<float> * freq * t + phase);
                float val = 0.5f + 0.5f * amp * s * kChannelScale[ch] + noise(rng);
                out[i++] = std::clamp(val, 0.0f, 1.0f);
            }
        }
    }
}

}  // namespace

Dataset make_synthetic_dataset(int count, uint64_t seed, int threads) {
    if (count < 1) throw std::invalid_argument("make_synthetic_dataset: count must be >= 1");
    if (threads < 1) throw std::invalid_argument("make_synthetic_dataset: threads must be >= 1");
    Dataset d;
    d.c = kSynChannels;
    d.h = d.w = kSynSide;
    d.classes = kSynClasses;
    d.images.resize(static_cast<size_t>(count) * d.image_size());
    d.labels.resize(count);
    for (int i = 0; i < count; ++i) d.labels[i] = i % kSynClasses;

    auto render_range = [&d, seed](int begin, int end) {
        for (int i = begin; i < end; ++i)
            render_synthetic_image(&d.images[static_cast<size_t>(i) * d.image_size()], d.labels[i],
                                   mix_seed(seed, static_cast<uint64_t>(i)));
    };

    const int used = std::min(threads, count);
    if (used == 1) {
        render_range(0, count);
    } else {
        std::vector<std::thread> pool;
        pool.reserve(used);
        const int chunk = (count + used - 1) / used;
        for (int t = 0; t < used; ++t) {
            const int begin = t * chunk;
            const int end = std::min(count, begin + chunk);
            if (begin < end) pool.emplace_back(render_range, begin, end);
        }
        for (std::thread& th : pool) th.join();
    }
    return d;
}

Dataset load_cifar10(const std::string& path) {
    namespace fs = std::filesystem;
    constexpr size_t kRecord = 3073;
    constexpr size_t kPixels = 3072;

    std::vector<std::string> files;
    std::error_code ec;
    if (fs::is_directory(path, ec)) {
        for (const auto& entry : fs::directory_iterator(path))
            if (entry.path().extension() == ".bin") files.push_back(entry.path().string());
        std::sort(files.begin(), files.end());
        if (files.empty())
            throw std::invalid_argument("load_cifar10: no .bin files in directory " + path);
    } else {
        files.push_back(path);
    }

    Dataset d;
    d.c = 3;
    d.h = d.w = 32;
    d.classes = 10;
    std::vector<unsigned char> record(kRecord);
    for (const std::string& file : files) {
        std::ifstream in(file, std::ios::binary);
        if (!in) throw std::invalid_argument("load_cifar10: cannot open " + file);
        in.seekg(0, std::ios::end);
        const auto bytes = static_cast<size_t>(in.tellg());
        in.seekg(0);
        if (bytes == 0 || bytes % kRecord != 0)
            throw std::invalid_argument("load_cifar10: " + file + " size " + std::to_string(bytes) +
                                        " is not a multiple of " + std::to_string(kRecord));
        const size_t records = bytes / kRecord;
        for (size_t r = 0; r < records; ++r) {
            in.read(reinterpret_cast<char*>(record.data()), kRecord);
            if (!in) throw std::invalid_argument("load_cifar10: short read in " + file);
            const int label = record[0];
            if (label < 0 || label > 9)
                throw std::invalid_argument("load_cifar10: " + file + " record " +
                                            std::to_string(r) + " has label " +
                                            std::to_string(label));
            d.labels.push_back(label);
            const size_t base = d.images.size();
            d.images.resize(base + kPixels);
            for (size_t i = 0; i < kPixels; ++i)
                d.images[base + i] = static_cast<float>(record[1 + i]) / 255.0f;
        }
    }
    return d;
}

SplitIndices stratified_split(const Dataset& d, double eval_fraction, uint64_t seed) {
    if (d.count() == 0) throw std::invalid_argument("stratified_split: dataset is empty");
    if (eval_fraction <= 0.0 || eval_fraction >= 1.0)
        throw std::invalid_argument("stratified_split: eval_fraction must be in (0,1), got " +
                                    std::to_string(eval_fraction));
    std::vector<std::vector<int>> by_class;
    for (int i = 0; i < d.count(); ++i) {
        const int label = d.labels[i];
        if (label >= static_cast<int>(by_class.size())) by_class.resize(label + 1);
        by_class[label].push_back(i);
    }
    SplitIndices s;
    for (size_t cls = 0; cls < by_class.size(); ++cls) {
        auto& members = by_class[cls];
        if (members.empty()) continue;
        std::mt19937_64 rng(mix_seed(seed, cls));
        std::shuffle(members.begin(), members.end(), rng);
        auto take = static_cast<size_t>(std::lround(eval_fraction * members.size()));
        take = std::clamp<size_t>(take, 1, members.size() - 1);
        if (members.size() < 2)
            throw std::invalid_argument("stratified_split: class " + std::to_string(cls) +
                                        " has fewer than 2 samples");
        s.eval_idx.insert(s.eval_idx.end(), members.begin(), members.begin() + take);
        s.train_idx.insert(s.train_idx.end(), members.begin() + take, members.end());
    }
    std::sort(s.eval_idx.begin(), s.eval_idx.end());
    std::sort(s.train_idx.begin(), s.train_idx.end());
    return s;
}

Tensor gather_batch(const Dataset& d, std::span<const int> idx) {
    if (idx.empty()) throw std::invalid_argument("gather_batch: empty index list");
    Tensor batch(static_cast<int>(idx.size()), d.c, d.h, d.w);
    const size_t stride = d.image_size();
    for (size_t i = 0; i < idx.size(); ++i) {
        const int sample = idx[i];
        if (sample < 0 || sample >= d.count())
            throw std::out_of_range("gather_batch: index " + std::to_string(sample) +
                                    " out of range");
        std::copy_n(&d.images[static_cast<size_t>(sample) * stride], stride,
                    &batch.data[i * stride]);
    }
    return batch;
}

std::vector<int> gather_labels(const Dataset& d, std::span<const int> idx) {
    std::vector<int> out(idx.size());
    for (size_t i = 0; i < idx.size(); ++i) out[i] = d.labels[idx[i]];
    return out;
}

}  // namespace pbkd
