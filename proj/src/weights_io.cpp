#include "pbkd/weights_io.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

#include "pbkd/replacement.hpp"

namespace pbkd {

namespace {

constexpr char kMagic[4] = {'P', 'B', 'K', 'D'};
constexpr uint32_t kFormatVersion = 1;

void put_u16(std::string& out, uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
    const unsigned char* p;
    size_t remaining;
    std::string origin;

    void need(size_t n, const char* what) {
        if (remaining < n)
            throw WeightsError(origin + ": truncated file while reading " + std::string(what));
    }
    uint8_t u8(const char* what) {
        need(1, what);
        uint8_t v = *p;
        ++p;
        --remaining;
        return v;
    }
    uint16_t u16(const char* what) {
        need(2, what);
        uint16_t v = static_cast<uint16_t>(p[0]) | static_cast<uint16_t>(p[1]) << 8;
        p += 2;
        remaining -= 2;
        return v;
    }
    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[i]) << (8 * i);
        p += 4;
        remaining -= 4;
        return v;
    }
};

// Layer description recovered from a serialized array name.
struct ParsedLayerArrays {
    LayerKind kind;
    std::map<std::string, const NamedArray*> arrays;  // "weight", "gamma", ...
};

}  // namespace

void save_weights(const std::string& path, const std::vector<NamedArray>& arrays) {
    std::string out;
    out.append(kMagic, 4);
    put_u32(out, kFormatVersion);
    put_u32(out, static_cast<uint32_t>(arrays.size()));
    for (const NamedArray& a : arrays) {
        if (a.name.size() > 0xffff)
            throw WeightsError(path + ": array name too long: " + a.name.substr(0, 64));
        if (a.dims.empty())
            throw WeightsError(path + ": array '" + a.name + "' has no dims");
        size_t elems = 1;
        for (uint32_t d : a.dims) {
            if (d == 0)
                throw WeightsError(path + ": array '" + a.name + "' has a zero dim");
            elems *= d;
        }
        if (elems != a.data.size())
            throw WeightsError(path + ": array '" + a.name + "' dims do not match payload size");
        put_u16(out, static_cast<uint16_t>(a.name.size()));
        out.append(a.name);
        out.push_back(static_cast<char>(a.dims.size()));
        for (uint32_t d : a.dims) put_u32(out, d);
        static_assert(sizeof(float) == 4);
        const size_t base = out.size();
        out.resize(base + a.data.size() * 4);
        std::memcpy(out.data() + base, a.data.data(), a.data.size() * 4);
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw WeightsError(path + ": cannot open for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw WeightsError(path + ": write failed");
}

std::vector<NamedArray> load_weights(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw WeightsError(path + ": cannot open");
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    Reader r{reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size(), path};

    r.need(4, "magic");
    if (std::memcmp(r.p, kMagic, 4) != 0)
        throw WeightsError(path + ": not a weights file (bad magic)");
    r.p += 4;
    r.remaining -= 4;
    const uint32_t version = r.u32("version");
    if (version != kFormatVersion)
        throw WeightsError(path + ": unsupported format version " + std::to_string(version));
    const uint32_t count = r.u32("array count");

    std::vector<NamedArray> arrays;
    arrays.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        NamedArray a;
        const uint16_t name_len = r.u16("name length");
        r.need(name_len, "array name");
        a.name.assign(reinterpret_cast<const char*>(r.p), name_len);
        r.p += name_len;
        r.remaining -= name_len;
        const uint8_t rank = r.u8("rank");
        if (rank == 0 || rank > 8)
            throw WeightsError(path + ": array '" + a.name + "' has implausible rank " +
                               std::to_string(rank));
        size_t elems = 1;
        for (uint8_t d = 0; d < rank; ++d) {
            a.dims.push_back(r.u32("dims"));
            if (a.dims.back() == 0)
                throw WeightsError(path + ": array '" + a.name + "' has a zero dim");
            elems *= a.dims.back();
        }
        r.need(elems * 4, "payload");
        a.data.resize(elems);
        std::memcpy(a.data.data(), r.p, elems * 4);
        r.p += elems * 4;
        r.remaining -= elems * 4;
        arrays.push_back(std::move(a));
    }
    if (r.remaining != 0)
        throw WeightsError(path + ": " + std::to_string(r.remaining) +
                           " trailing bytes after the last array");
    return arrays;
}

std::vector<NamedArray> arrays_from_network(const Network& net) {
    std::vector<NamedArray> arrays;
    for_each_array(const_cast<Network&>(net), [&arrays](const std::string& name, Tensor& t) {
        NamedArray a;
        a.name = name;
        a.dims = {static_cast<uint32_t>(t.n), static_cast<uint32_t>(t.c),
                  static_cast<uint32_t>(t.h), static_cast<uint32_t>(t.w)};
        a.data = t.data;
        arrays.push_back(std::move(a));
    });
    return arrays;
}

void load_into_network(Network& net, const std::vector<NamedArray>& arrays,
                       const std::string& origin) {
    std::map<std::string, const NamedArray*> by_name;
    for (const NamedArray& a : arrays)
        if (!by_name.emplace(a.name, &a).second)
            throw WeightsError(origin + ": duplicate array '" + a.name + "'");

    // Validate everything before assigning anything.
    std::vector<std::pair<Tensor*, const NamedArray*>> pending;
    std::set<std::string> used;
    for_each_array(net, [&](const std::string& name, Tensor& t) {
        auto it = by_name.find(name);
        if (it == by_name.end())
            throw WeightsError(origin + ": missing array '" + name + "' required by network '" +
                               net.name + "'");
        const NamedArray& a = *it->second;
        size_t elems = 1;
        for (uint32_t d : a.dims) elems *= d;
        if (elems != t.data.size() || a.dims.size() != 4 ||
            a.dims[0] != static_cast<uint32_t>(t.n) || a.dims[1] != static_cast<uint32_t>(t.c) ||
            a.dims[2] != static_cast<uint32_t>(t.h) || a.dims[3] != static_cast<uint32_t>(t.w))
            throw WeightsError(origin + ": array '" + name + "' has the wrong shape for tensor " +
                               t.shape_str());
        pending.emplace_back(&t, &a);
        used.insert(name);
    });
    for (const NamedArray& a : arrays)
        if (!used.count(a.name))
            throw WeightsError(origin + ": array '" + a.name + "' does not belong to network '" +
                               net.name + "'");
    for (auto& [t, a] : pending) t->data = a->data;
}

Network rebuild_network_from_arrays(const Network& teacher_structure,
                                    const std::vector<NamedArray>& arrays,
                                    const std::string& origin) {
    // Group array names by their block segment.
    std::map<std::string, std::set<std::string>> names_by_block;
    for (const NamedArray& a : arrays) {
        const size_t slash = a.name.find('/');
        if (slash == std::string::npos || slash == 0)
            throw WeightsError(origin + ": array name '" + a.name + "' has no block prefix");
        names_by_block[a.name.substr(0, slash)].insert(a.name);
    }

    Network out = teacher_structure;
    for (Block& b : out.blocks) {
        std::set<std::string> expected;
        for_each_block_array(b, [&expected](const std::string& n, Tensor&) { expected.insert(n); });
        auto it = names_by_block.find(b.name);
        if (it == names_by_block.end())
            throw WeightsError(origin + ": no arrays for block '" + b.name + "'");
        if (it->second == expected) continue;  // teacher-structured block

        // Rebuild as a replacement block from the stored layer names:
        // "<block>/<kind>_<index>/<array>". Index gaps and a trailing
        // normalization/sum are relu positions (relu stores no arrays).
        std::map<int, LayerKind> layer_kinds;
        bool has_projection = false;
        for (const std::string& full : it->second) {
            const size_t s1 = full.find('/');
            const size_t s2 = full.find('/', s1 + 1);
            if (s2 == std::string::npos)
                throw WeightsError(origin + ": array name '" + full + "' is not block/layer/array");
            const std::string layer_seg = full.substr(s1 + 1, s2 - s1 - 1);
            const size_t us = layer_seg.rfind('_');
            if (us == std::string::npos)
                throw WeightsError(origin + ": layer segment '" + layer_seg + "' in '" + full +
                                   "' has no index");
            LayerKind kind;
            try {
                kind = layer_kind_from_name(layer_seg.substr(0, us));
            } catch (const SpecError& e) {
                throw WeightsError(origin + ": " + e.what() + " in '" + full + "'");
            }
            int idx;
            try {
                idx = std::stoi(layer_seg.substr(us + 1));
            } catch (const std::exception&) {
                throw WeightsError(origin + ": bad layer index in '" + full + "'");
            }
            auto [pos, inserted] = layer_kinds.emplace(idx, kind);
            if (!inserted && pos->second != kind)
                throw WeightsError(origin + ": conflicting kinds for layer " + std::to_string(idx) +
                                   " of block '" + b.name + "'");
            if (kind == LayerKind::Add) has_projection = true;
        }
        if (layer_kinds.empty())
            throw WeightsError(origin + ": block '" + b.name + "' has unrecognizable arrays");

        Block rebuilt;
        rebuilt.name = b.name;
        rebuilt.replaceable = false;
        rebuilt.in_channels = b.in_channels;
        rebuilt.out_channels = b.out_channels;
        rebuilt.stride = b.stride;
        rebuilt.padding = 1;
        int cur_c = b.in_channels;
        bool stride_pending = true;  // the first depthwise conv carries the block stride
        int units = 0;
        const int max_idx = layer_kinds.rbegin()->first;
        for (int idx = 0; idx <= max_idx; ++idx) {
            auto at = layer_kinds.find(idx);
            if (at == layer_kinds.end()) {
                rebuilt.layers.push_back(make_relu_layer(cur_c));
                continue;
            }
            switch (at->second) {
                case LayerKind::DepthwiseConv3x3:
                    rebuilt.layers.push_back(make_conv_layer(LayerKind::DepthwiseConv3x3, cur_c,
                                                             cur_c, 3, stride_pending ? b.stride : 1,
                                                             1));
                    stride_pending = false;
                    ++units;
                    break;
                case LayerKind::PointwiseConv: {
                    // Channel expansion recorded in the array shape.
                    const std::string wname =
                        b.name + "/pointwise_conv_" + std::to_string(idx) + "/weight";
                    const NamedArray* w = nullptr;
                    for (const NamedArray& a : arrays)
                        if (a.name == wname) w = &a;
                    if (!w || w->dims.size() != 4)
                        throw WeightsError(origin + ": missing or malformed '" + wname + "'");
                    const int out_c = static_cast<int>(w->dims[0]);
                    rebuilt.layers.push_back(
                        make_conv_layer(LayerKind::PointwiseConv, cur_c, out_c, 1, 1, 0));
                    cur_c = out_c;
                    break;
                }
                case LayerKind::BatchNorm:
                    rebuilt.layers.push_back(make_batchnorm_layer(cur_c));
                    break;
                case LayerKind::Add:
                    rebuilt.layers.push_back(make_add_layer(b.in_channels, cur_c, b.stride));
                    break;
                default:
                    throw WeightsError(origin + ": block '" + b.name + "' mixes teacher and " +
                                       "replacement layers");
            }
        }
        // Builders always close with an activation, which stores nothing.
        rebuilt.layers.push_back(make_relu_layer(cur_c));
        const bool skip = has_projection;
        if (units == 2)
            rebuilt.spec_kind =
                candidate_kind_name(skip ? CandidateKind::TwoLayerSkip : CandidateKind::TwoLayer);
        else if (units == 3)
            rebuilt.spec_kind =
                candidate_kind_name(skip ? CandidateKind::ThreeLayerSkip : CandidateKind::ThreeLayer);
        else
            rebuilt.spec_kind = "replacement";
        b = std::move(rebuilt);
    }
    load_into_network(out, arrays, origin);
    return out;
}

uint64_t file_hash(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw WeightsError(path + ": cannot open for hashing");
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return fnv1a64(bytes.data(), bytes.size());
}

}  // namespace pbkd
