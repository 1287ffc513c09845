#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "resetopt/common.hpp"
#include "resetopt/tensor.hpp"

namespace resetopt {

// Parameter sections. "Former" covers the feature-extraction part of a
// network (convolutional/pooling stages, or every hidden layer of an MLP),
// "latter" the classifier head. Partial resets address one of them.
enum class Section : std::uint8_t { Former = 0, Latter = 1 };

struct SectionMask {
    bool former = true;
    bool latter = true;

    bool selects(Section s) const { return s == Section::Former ? former : latter; }
    bool empty() const { return !former && !latter; }
};

struct ParamEntry {
    std::string name;
    Tensor tensor;
    Section section = Section::Former;
};

/**
 * Ordered collection of named parameter tensors with a fixed flat layout.
 * The flat order is the entry order; `flatten` and `assign` are exact
 * inverses, and masked assignment touches only entries in selected sections.
 */
class ParamSet {
  public:
    std::size_t add(std::string name, Tensor tensor, Section section) {
        for (const auto& e : entries_)
            if (e.name == name) throw ArgumentError("ParamSet: duplicate entry name " + name);
        offsets_.push_back(total_dim_);
        total_dim_ += tensor.size();
        entries_.push_back({std::move(name), std::move(tensor), section});
        return entries_.size() - 1;
    }

    std::size_t size() const { return entries_.size(); }
    std::size_t total_dim() const { return total_dim_; }

    ParamEntry& entry(std::size_t i) { return entries_[i]; }
    const ParamEntry& entry(std::size_t i) const { return entries_[i]; }
    std::size_t offset(std::size_t i) const { return offsets_[i]; }

    const ParamEntry* find(const std::string& name) const {
        for (const auto& e : entries_)
            if (e.name == name) return &e;
        return nullptr;
    }

    std::vector<double> flatten() const {
        std::vector<double> flat(total_dim_);
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            const auto& t = entries_[i].tensor;
            std::copy(t.data.begin(), t.data.end(), flat.begin() + offsets_[i]);
        }
        return flat;
    }

    void assign(std::span<const double> flat) { assign(flat, SectionMask{}); }

    // Overwrites entries whose section is selected; everything else is left
    // untouched. An empty mask is a no-op by construction.
    void assign(std::span<const double> flat, SectionMask mask) {
        if (flat.size() != total_dim_)
            throw DimensionError("ParamSet::assign: flat vector has length " +
                                 std::to_string(flat.size()) + ", expected " +
                                 std::to_string(total_dim_));
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            if (!mask.selects(entries_[i].section)) continue;
            auto& t = entries_[i].tensor;
            std::copy(flat.begin() + offsets_[i], flat.begin() + offsets_[i] + t.size(),
                      t.data.begin());
        }
    }

    // Contiguous [offset, offset+length) runs of the flat layout covered by
    // the mask, in ascending order.
    std::vector<std::pair<std::size_t, std::size_t>> masked_ranges(SectionMask mask) const {
        std::vector<std::pair<std::size_t, std::size_t>> ranges;
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            if (!mask.selects(entries_[i].section)) continue;
            const std::size_t off = offsets_[i];
            const std::size_t len = entries_[i].tensor.size();
            if (!ranges.empty() && ranges.back().first + ranges.back().second == off)
                ranges.back().second += len;
            else
                ranges.emplace_back(off, len);
        }
        return ranges;
    }

    std::size_t masked_dim(SectionMask mask) const {
        std::size_t n = 0;
        for (const auto& e : entries_)
            if (mask.selects(e.section)) n += e.tensor.size();
        return n;
    }

    void save(std::ostream& out) const;
    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw IoError("ParamSet::save: cannot open " + path);
        save(out);
        if (!out) throw IoError("ParamSet::save: write failed for " + path);
    }

    static ParamSet load(std::istream& in);
    static ParamSet load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("ParamSet::load: cannot open " + path);
        return load(in);
    }

  private:
    std::vector<ParamEntry> entries_;
    std::vector<std::size_t> offsets_;
    std::size_t total_dim_ = 0;
};

// Snapshot format: fixed 8-byte magic, little-endian u32 version, u64 entry
// count; per entry a u64 name length, the name bytes, one section byte, a u64
// rank, the extents as u64, then the values as IEEE-754 binary64. All
// multi-byte fields little-endian.
namespace detail {

inline constexpr char kParamMagic[8] = {'R', 'S', 'T', 'P', 'A', 'R', 'A', 'M'};
inline constexpr std::uint32_t kParamVersion = 1;

inline void put_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 8);
}

inline void put_f64(std::ostream& out, double x) {
    std::uint64_t v;
    std::memcpy(&v, &x, 8);
    put_u64(out, v);
}

inline std::uint32_t get_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw FormatError("parameter snapshot: truncated header field");
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}

inline std::uint64_t get_u64(std::istream& in) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    if (!in) throw FormatError("parameter snapshot: truncated field");
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}

inline double get_f64(std::istream& in) {
    std::uint64_t v = get_u64(in);
    double x;
    std::memcpy(&x, &v, 8);
    return x;
}

}  // namespace detail

inline void ParamSet::save(std::ostream& out) const {
    out.write(detail::kParamMagic, 8);
    detail::put_u32(out, detail::kParamVersion);
    detail::put_u64(out, entries_.size());
    for (const auto& e : entries_) {
        detail::put_u64(out, e.name.size());
        out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        const char tag = static_cast<char>(e.section);
        out.write(&tag, 1);
        detail::put_u64(out, e.tensor.rank());
        for (std::size_t ext : e.tensor.shape) detail::put_u64(out, ext);
        for (double x : e.tensor.data) detail::put_f64(out, x);
    }
}

inline ParamSet ParamSet::load(std::istream& in) {
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, detail::kParamMagic, 8) != 0)
        throw FormatError("parameter snapshot: bad magic");
    const std::uint32_t version = detail::get_u32(in);
    if (version != detail::kParamVersion)
        throw FormatError("parameter snapshot: unsupported version " + std::to_string(version));
    const std::uint64_t count = detail::get_u64(in);
    ParamSet set;
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint64_t name_len = detail::get_u64(in);
        std::string name(name_len, '\0');
        in.read(name.data(), static_cast<std::streamsize>(name_len));
        if (!in) throw FormatError("parameter snapshot: truncated name");
        char tag;
        in.read(&tag, 1);
        if (!in) throw FormatError("parameter snapshot: truncated section tag");
        if (tag != 0 && tag != 1)
            throw FormatError("parameter snapshot: invalid section tag");
        const std::uint64_t rank = detail::get_u64(in);
        std::vector<std::size_t> shape(rank);
        for (auto& ext : shape) ext = detail::get_u64(in);
        Tensor t(shape);
        for (auto& x : t.data) x = detail::get_f64(in);
        set.add(std::move(name), std::move(t), static_cast<Section>(tag));
    }
    return set;
}

}  // namespace resetopt
