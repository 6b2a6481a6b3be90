#pragma once

// Electrode topology: a versioned name -> (region, intra-region slot) table,
// montage resolution for the 10-20 / 10-10 naming standards, the flattened
// (region, intra, absolute) index law, and the additive topological
// embeddings applied before the backbone.

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <cstdint>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "untf/numerics/layers.hpp"
#include "untf/preprocess.hpp"

namespace untf {

enum class MontageStandard { ten_twenty, ten_ten };

inline const std::vector<std::string>& region_names() {
    static const std::vector<std::string> names{"frontal", "central", "temporal", "parietal", "occipital"};
    return names;
}

// Shipped as data/topology_10_10.tsv as well; tests keep the two identical.
inline constexpr std::string_view kDefaultTopologyTable =
    "#topology-v1 R=5 E=13\n"
    "# Midline electrodes follow their lettered lobe (Fz frontal, Cz central, Pz parietal, Oz occipital).\n"
    "Fp1\tfrontal\t0\nFpz\tfrontal\t1\nFp2\tfrontal\t2\nAF7\tfrontal\t3\nAF3\tfrontal\t4\n"
    "AFz\tfrontal\t5\nAF4\tfrontal\t6\nAF8\tfrontal\t7\nF3\tfrontal\t8\nF1\tfrontal\t9\n"
    "Fz\tfrontal\t10\nF2\tfrontal\t11\nF4\tfrontal\t12\n"
    "FC5\tcentral\t0\nFC3\tcentral\t1\nFC1\tcentral\t2\nFCz\tcentral\t3\nFC2\tcentral\t4\n"
    "FC4\tcentral\t5\nFC6\tcentral\t6\nC3\tcentral\t7\nC1\tcentral\t8\nCz\tcentral\t9\n"
    "C2\tcentral\t10\nC4\tcentral\t11\n"
    "F7\ttemporal\t0\nF5\ttemporal\t1\nF6\ttemporal\t2\nF8\ttemporal\t3\nFT7\ttemporal\t4\n"
    "FT8\ttemporal\t5\nT7\ttemporal\t6\nC5\ttemporal\t7\nC6\ttemporal\t8\nT8\ttemporal\t9\n"
    "TP7\ttemporal\t10\nTP8\ttemporal\t11\n"
    "CP5\tparietal\t0\nCP3\tparietal\t1\nCP1\tparietal\t2\nCPz\tparietal\t3\nCP2\tparietal\t4\n"
    "CP4\tparietal\t5\nCP6\tparietal\t6\nP3\tparietal\t7\nP1\tparietal\t8\nPz\tparietal\t9\n"
    "P2\tparietal\t10\nP4\tparietal\t11\n"
    "P7\toccipital\t0\nP5\toccipital\t1\nP6\toccipital\t2\nP8\toccipital\t3\nPO7\toccipital\t4\n"
    "PO3\toccipital\t5\nPOz\toccipital\t6\nPO4\toccipital\t7\nPO8\toccipital\t8\nO1\toccipital\t9\n"
    "Oz\toccipital\t10\nO2\toccipital\t11\nIz\toccipital\t12\n";

struct TableEntry {
    std::string name;
    std::size_t region;
    std::size_t intra;
};

struct TopologyTable {
    std::size_t R = 0, E = 0;
    std::vector<TableEntry> entries;
};

inline std::string upper(std::string_view s) {
    std::string out(s);
    for (char& c : out) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return out;
}

/// Parses the `#topology-v1 R=<r> E=<e>` text format.
inline TopologyTable parse_topology_table(std::string_view text) {
    std::istringstream in{std::string(text)};
    std::string line;
    TopologyTable t;
    std::size_t lineno = 0;
    if (!std::getline(in, line) || std::sscanf(line.c_str(), "#topology-v1 R=%zu E=%zu", &t.R, &t.E) != 2)
        throw ValidationError("topology table: missing '#topology-v1 R=<n> E=<n>' header");
    ++lineno;
    if (t.R != region_names().size())
        throw ValidationError("topology table: R=" + std::to_string(t.R) + " but " +
                              std::to_string(region_names().size()) + " regions are defined");
    std::set<std::string> seen;
    std::set<std::pair<std::size_t, std::size_t>> slots;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream fields(line);
        std::string name, region;
        long intra = -1;
        const auto where = "topology table line " + std::to_string(lineno) + ": ";
        if (!std::getline(fields, name, '\t') || !std::getline(fields, region, '\t') || !(fields >> intra))
            throw ValidationError(where + "expected NAME<TAB>REGION<TAB>INTRA_INDEX");
        auto it = std::find(region_names().begin(), region_names().end(), region);
        if (it == region_names().end()) throw ValidationError(where + "unknown region '" + region + "'");
        if (intra < 0 || static_cast<std::size_t>(intra) >= t.E)
            throw ValidationError(where + "intra index " + std::to_string(intra) + " outside [0, E)");
        TableEntry e{name, static_cast<std::size_t>(it - region_names().begin()), static_cast<std::size_t>(intra)};
        if (!seen.insert(upper(name)).second) throw ValidationError(where + "duplicate electrode " + name);
        if (!slots.insert({e.region, e.intra}).second) throw ValidationError(where + "slot already taken");
        t.entries.push_back(std::move(e));
    }
    return t;
}

inline const TopologyTable& default_topology_table() {
    static const TopologyTable t = parse_topology_table(kDefaultTopologyTable);
    return t;
}

struct TopologyEntry {
    std::string name;
    std::size_t region;
    std::size_t intra;
    std::size_t abs;
};

struct TopologyMap {
    std::size_t R = 0, E = 0;
    std::vector<TopologyEntry> entries;  // in input order
    std::vector<std::size_t> padding_slots;

    std::size_t L() const { return R * E; }

    const TopologyEntry* find(std::string_view name) const {
        for (const auto& e : entries)
            if (upper(e.name) == upper(name)) return &e;
        return nullptr;
    }

    /// Electrode name for each absolute slot, empty for padding.
    std::vector<std::string> slot_names() const {
        std::vector<std::string> out(L());
        for (const auto& e : entries) out[e.abs] = e.name;
        return out;
    }

    void check_invariants() const {
        std::set<std::size_t> used;
        for (const auto& e : entries) {
            if (e.region >= R || e.intra >= E) throw ValidationError("topology: index out of bounds for " + e.name);
            if (e.abs != e.region * E + e.intra) throw ValidationError("topology: index law violated for " + e.name);
            if (!used.insert(e.abs).second) throw ValidationError("topology: shared absolute index at " + e.name);
        }
        if (used.size() + padding_slots.size() != L()) throw ValidationError("topology: padding set inconsistent");
    }
};

namespace detail {

inline std::size_t edit_distance(std::string_view a, std::string_view b) {
    std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j)
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

// Legacy 10-20 temporal names and the 10-10 electrode they occupy.
inline const std::map<std::string, std::string>& ten_twenty_aliases() {
    static const std::map<std::string, std::string> m{{"T3", "T7"}, {"T4", "T8"}, {"T5", "P7"}, {"T6", "P8"}};
    return m;
}

inline std::vector<std::string> standard_names(MontageStandard standard, const TopologyTable& table) {
    if (standard == MontageStandard::ten_twenty)
        return {"Fp1", "Fpz", "Fp2", "F7", "F3", "Fz", "F4", "F8", "T3", "C3", "Cz",
                "C4",  "T4",  "T5",  "P3", "Pz", "P4", "T6", "O1", "Oz", "O2"};
    std::vector<std::string> out;
    for (const auto& e : table.entries) out.push_back(e.name);
    return out;
}

}  // namespace detail

/// Resolves montage names to table slots. Absolute index is region*E + intra.
inline TopologyMap build_topology(const std::vector<std::string>& names, MontageStandard standard,
                                  const TopologyTable& table = default_topology_table()) {
    if (names.empty()) throw ValidationError("build_topology: empty montage");
    const auto known = detail::standard_names(standard, table);
    TopologyMap map;
    map.R = table.R;
    map.E = table.E;
    std::set<std::size_t> used;
    for (const auto& name : names) {
        const auto key = upper(name);
        auto it = std::find_if(known.begin(), known.end(), [&](const std::string& k) { return upper(k) == key; });
        if (it == known.end()) {
            std::vector<std::pair<std::size_t, std::string>> ranked;
            for (const auto& k : known) ranked.emplace_back(detail::edit_distance(key, upper(k)), k);
            std::stable_sort(ranked.begin(), ranked.end(),
                             [](const auto& a, const auto& b) { return a.first < b.first; });
            std::string msg = "unknown electrode '" + name + "'; nearest known:";
            for (std::size_t i = 0; i < std::min<std::size_t>(3, ranked.size()); ++i) msg += " " + ranked[i].second;
            throw ValidationError(msg);
        }
        std::string canonical = *it;
        if (standard == MontageStandard::ten_twenty) {
            auto alias = detail::ten_twenty_aliases().find(canonical);
            if (alias != detail::ten_twenty_aliases().end()) canonical = alias->second;
        }
        const auto& entry = *std::find_if(table.entries.begin(), table.entries.end(),
                                          [&](const TableEntry& e) { return e.name == canonical; });
        const std::size_t abs = entry.region * table.E + entry.intra;
        if (!used.insert(abs).second) throw ValidationError("build_topology: electrode '" + name + "' listed twice");
        map.entries.push_back({name, entry.region, entry.intra, abs});
    }
    for (std::size_t j = 0; j < map.L(); ++j)
        if (!used.count(j)) map.padding_slots.push_back(j);
    map.check_invariants();
    return map;
}

/// Re-packs a map so each region's electrodes occupy intra slots 0..n-1 in
/// table order, with E = max(occupancy, min_E).
inline TopologyMap compact(const TopologyMap& map, std::size_t min_E = 0) {
    std::vector<std::vector<const TopologyEntry*>> by_region(map.R);
    for (const auto& e : map.entries) by_region[e.region].push_back(&e);
    std::size_t E = min_E;
    for (auto& v : by_region) {
        std::sort(v.begin(), v.end(), [](auto* a, auto* b) { return a->intra < b->intra; });
        E = std::max(E, v.size());
    }
    TopologyMap out;
    out.R = map.R;
    out.E = E;
    std::set<std::size_t> used;
    for (const auto& e : map.entries) {
        const auto& v = by_region[e.region];
        const auto rank = static_cast<std::size_t>(std::find(v.begin(), v.end(), &e) - v.begin());
        out.entries.push_back({e.name, e.region, rank, e.region * E + rank});
        used.insert(e.region * E + rank);
    }
    for (std::size_t j = 0; j < out.L(); ++j)
        if (!used.count(j)) out.padding_slots.push_back(j);
    out.check_invariants();
    return out;
}

/// Lays a conditioned recording's first T samples into sample b of a batch;
/// padding slots are zero and marked invalid.
inline void place_recording(const RawRecording& rec, const TopologyMap& map, EegBatch& batch, std::size_t b) {
    if (batch.R != map.R || batch.E != map.E) throw ValidationError("place_recording: batch layout differs from map");
    for (std::size_t l = 0; l < batch.L(); ++l) {
        std::fill(batch.row(b, l).begin(), batch.row(b, l).end(), 0.0f);
        batch.valid[b * batch.L() + l] = 0;
    }
    for (const auto& [name, x] : rec.channels) {
        const auto* e = map.find(name);
        if (!e) throw ValidationError("place_recording: channel '" + name + "' not in topology map");
        if (x.size() < batch.T) throw ValidationError("place_recording: channel '" + name + "' shorter than T");
        auto row = batch.row(b, e->abs);
        for (std::size_t t = 0; t < batch.T; ++t) row[t] = static_cast<float>(x[t]);
        batch.valid[b * batch.L() + e->abs] = 1;
    }
}

struct TopoIndices {
    std::size_t B = 0, L = 0;
    std::vector<std::size_t> region, intra, abs;  // each B*L
};

/// I_region = floor(j / E), I_intra = j mod E, I_abs = j, repeated per sample.
inline TopoIndices generate_indices(std::size_t B, std::size_t L, std::size_t R, std::size_t E) {
    if (E == 0 || L != R * E)
        throw ValidationError("generate_indices: L=" + std::to_string(L) + " differs from R*E=" + std::to_string(R * E));
    TopoIndices idx{B, L, std::vector<std::size_t>(B * L), std::vector<std::size_t>(B * L), std::vector<std::size_t>(B * L)};
    std::size_t n = 0;
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t e = 0; e < E; ++e, ++n) {
                idx.region[n] = r;
                idx.intra[n] = e;
                idx.abs[n] = r * E + e;
            }
    return idx;
}

template <class T>
struct EmbeddingTables {
    Tensor<T> region;  // [R, D]
    Tensor<T> intra;   // [E, D]
    Tensor<T> abs;     // [L, D]

    EmbeddingTables() = default;
    EmbeddingTables(std::size_t R, std::size_t E, std::size_t D, Rng& rng, double stddev = 0.02)
        : region(normal_param<T>({R, D}, stddev, rng)),
          intra(normal_param<T>({E, D}, stddev, rng)),
          abs(normal_param<T>({R * E, D}, stddev, rng)) {}

    /// Zero and freeze every table (topology ablation).
    void disable() {
        for (auto* t : {&region, &intra, &abs}) {
            std::fill(t->mutable_values().begin(), t->mutable_values().end(), T(0));
            t->set_requires_grad(false);
            t->zero_grad();
        }
    }

    void collect(ParamList<T>& out, const std::string& prefix) {
        out.push_back({prefix + ".region", &region});
        out.push_back({prefix + ".intra", &intra});
        out.push_back({prefix + ".abs", &abs});
    }
};

/// H_in = H_fused + H_R + E_region[I_region] + E_intra[I_intra] + E_abs[I_abs].
template <class T>
Tensor<T> apply_topological_embedding(const Tensor<T>& fused, const Tensor<T>& raw, const EmbeddingTables<T>& tables,
                                      const TopoIndices& idx) {
    if (fused.shape() != raw.shape() || fused.rank() != 3) shape_error("topological_embedding", fused.shape(), raw.shape());
    const std::size_t B = fused.dim(0), L = fused.dim(1), D = fused.dim(2);
    if (idx.B != B || idx.L != L) shape_error("topological_embedding", "index grid does not match features");
    if (tables.region.dim(1) != D) shape_error("topological_embedding", fused.shape(), tables.region.shape());
    auto h = add(fused, raw);
    h = add(h, reshape(embedding(tables.region, idx.region), {B, L, D}));
    h = add(h, reshape(embedding(tables.intra, idx.intra), {B, L, D}));
    h = add(h, reshape(embedding(tables.abs, idx.abs), {B, L, D}));
    return h;
}

}  // namespace untf
