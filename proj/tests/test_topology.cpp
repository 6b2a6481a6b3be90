#include <gtest/gtest.h>

#include <fstream>
#include <set>
#include <sstream>

#include "helpers.hpp"
#include "untf/topology.hpp"

using namespace untf;

namespace {

const std::vector<std::string> kMontage19{"Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "T3", "C3", "Cz",
                                          "C4",  "T4",  "T5", "P3", "Pz", "P4", "T6", "O1", "O2"};

std::size_t region_of(std::string_view name) {
    const auto& r = region_names();
    return static_cast<std::size_t>(std::find(r.begin(), r.end(), name) - r.begin());
}

}  // namespace

TEST(Table, ShippedFileMatchesBuiltIn) {
    std::ifstream in(std::string(UNTF_SOURCE_DIR) + "/data/topology_10_10.tsv");
    ASSERT_TRUE(in.good());
    std::stringstream ss;
    ss << in.rdbuf();
    EXPECT_EQ(ss.str(), std::string(kDefaultTopologyTable));
}

TEST(Table, HeaderAndOccupancy) {
    const auto& t = default_topology_table();
    EXPECT_EQ(t.R, 5u);
    EXPECT_EQ(t.E, 13u);
    std::vector<std::size_t> count(t.R);
    for (const auto& e : t.entries) ++count[e.region];
    EXPECT_EQ(*std::max_element(count.begin(), count.end()), t.E);
}

TEST(Table, RejectsMalformed) {
    EXPECT_THROW(parse_topology_table("Cz\tcentral\t0\n"), ValidationError);
    EXPECT_THROW(parse_topology_table("#topology-v1 R=5 E=2\nCz\tcentral\t0\nC3\tcentral\t0\n"), ValidationError);
    EXPECT_THROW(parse_topology_table("#topology-v1 R=5 E=2\nCz\tlimbic\t0\n"), ValidationError);
    EXPECT_THROW(parse_topology_table("#topology-v1 R=5 E=2\nCz\tcentral\t2\n"), ValidationError);
}

TEST(Build, CzIsCentral) {
    auto map = build_topology({"Cz"}, MontageStandard::ten_ten);
    const auto* e = map.find("Cz");
    ASSERT_NE(e, nullptr);
    EXPECT_EQ(e->region, region_of("central"));
    EXPECT_EQ(e->abs, e->region * map.E + e->intra);
}

TEST(Build, OccipitalPairSharesRegion) {
    auto map = build_topology({"O1", "O2"}, MontageStandard::ten_ten);
    const auto *a = map.find("O1"), *b = map.find("O2");
    EXPECT_EQ(a->region, region_of("occipital"));
    EXPECT_EQ(a->region, b->region);
    EXPECT_NE(a->intra, b->intra);
}

TEST(Build, MidlineFollowsLobe) {
    auto map = build_topology({"Fz", "Cz", "Pz", "Oz"}, MontageStandard::ten_ten);
    EXPECT_EQ(map.find("Fz")->region, region_of("frontal"));
    EXPECT_EQ(map.find("Cz")->region, region_of("central"));
    EXPECT_EQ(map.find("Pz")->region, region_of("parietal"));
    EXPECT_EQ(map.find("Oz")->region, region_of("occipital"));
}

TEST(Build, NineteenChannelMontage) {
    auto map = build_topology(kMontage19, MontageStandard::ten_twenty);
    EXPECT_EQ(map.entries.size(), 19u);
    EXPECT_EQ(map.padding_slots.size(), map.L() - 19);
    std::set<std::size_t> seen;
    for (const auto& e : map.entries) {
        EXPECT_LT(e.region, map.R);
        EXPECT_LT(e.intra, map.E);
        EXPECT_EQ(e.abs, e.region * map.E + e.intra);
        EXPECT_TRUE(seen.insert(e.abs).second);
    }
    for (auto p : map.padding_slots) EXPECT_FALSE(seen.count(p));
    // Legacy temporal names land on their 10-10 slots.
    EXPECT_EQ(map.find("T3")->abs, build_topology({"T7"}, MontageStandard::ten_ten).find("T7")->abs);
}

TEST(Build, EveryTableElectrodeAtOnce) {
    std::vector<std::string> all;
    for (const auto& e : default_topology_table().entries) all.push_back(e.name);
    auto map = build_topology(all, MontageStandard::ten_ten);
    EXPECT_EQ(map.entries.size() + map.padding_slots.size(), map.L());
    EXPECT_NO_THROW(map.check_invariants());
}

TEST(Build, UnknownNameListsNeighbours) {
    try {
        build_topology({"Cz", "Czz"}, MontageStandard::ten_ten);
        FAIL() << "expected an error";
    } catch (const ValidationError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("Czz"), std::string::npos);
        EXPECT_NE(msg.find("nearest known"), std::string::npos);
        EXPECT_NE(msg.find("Cz"), std::string::npos);
    }
}

TEST(Build, DuplicateAndEmptyRejected) {
    EXPECT_THROW(build_topology({"Cz", "cz"}, MontageStandard::ten_ten), ValidationError);
    EXPECT_THROW(build_topology({}, MontageStandard::ten_ten), ValidationError);
}

TEST(Compact, PacksRegions) {
    auto map = compact(build_topology(kMontage19, MontageStandard::ten_twenty));
    EXPECT_NO_THROW(map.check_invariants());
    std::vector<std::size_t> count(map.R);
    for (const auto& e : map.entries) ++count[e.region];
    EXPECT_EQ(map.E, *std::max_element(count.begin(), count.end()));
    for (const auto& e : map.entries) EXPECT_LT(e.intra, count[e.region]);
    EXPECT_EQ(compact(build_topology({"Cz"}, MontageStandard::ten_ten), 4).E, 4u);
}

TEST(Indices, FirstPosition) {
    auto idx = generate_indices(1, 8, 2, 4);
    EXPECT_EQ(idx.region[0], 0u);
    EXPECT_EQ(idx.intra[0], 0u);
    EXPECT_EQ(idx.abs[0], 0u);
}

TEST(Indices, PositionSeven) {
    auto idx = generate_indices(1, 8, 2, 4);
    EXPECT_EQ(idx.region[7], 1u);
    EXPECT_EQ(idx.intra[7], 3u);
    EXPECT_EQ(idx.abs[7], 7u);
}

TEST(Indices, SmallGridSequence) {
    auto idx = generate_indices(2, 6, 2, 3);
    const std::vector<std::size_t> region{0, 0, 0, 1, 1, 1, 0, 0, 0, 1, 1, 1}, intra{0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2};
    EXPECT_EQ(idx.region, region);
    EXPECT_EQ(idx.intra, intra);
}

TEST(Indices, IndexLawExhaustive) {
    for (std::size_t E = 1; E <= 100; E += 9) {
        const std::size_t R = 10000 / E;
        auto idx = generate_indices(1, R * E, R, E);
        for (std::size_t j = 0; j < R * E; ++j) ASSERT_EQ(idx.abs[j], idx.region[j] * E + idx.intra[j]);
    }
}

TEST(Indices, RejectsMismatch) { EXPECT_THROW(generate_indices(1, 7, 2, 4), ValidationError); }

namespace {

struct Fixture {
    std::size_t B = 2, R = 2, E = 3, D = 4;
    Rng rng = make_rng(21);
    EmbeddingTables<double> tables{R, E, D, rng, 1.0};
    TensorD fused = test::rand_tensor({B, R * E, D}, rng);
    TensorD raw = test::rand_tensor({B, R * E, D}, rng);
    TopoIndices idx = generate_indices(B, R * E, R, E);
};

}  // namespace

TEST(Embedding, ZeroTablesAddNothing) {
    Fixture f;
    f.tables.disable();
    auto h = apply_topological_embedding(f.fused, f.raw, f.tables, f.idx);
    for (std::size_t i = 0; i < h.size(); ++i) EXPECT_DOUBLE_EQ(h[i], f.fused[i] + f.raw[i]);
}

TEST(Embedding, OneHotTablesSumRows) {
    Fixture f;
    const std::size_t L = f.R * f.E;
    auto zero = TensorD::zeros({f.B, L, f.D});
    // region row r = e_0 * (r+1), intra row i = e_1 * (i+1), abs row j = e_2 * (j+1)
    EmbeddingTables<double> t;
    t.region = TensorD::zeros({f.R, f.D});
    t.intra = TensorD::zeros({f.E, f.D});
    t.abs = TensorD::zeros({L, f.D});
    for (std::size_t r = 0; r < f.R; ++r) t.region.mutable_values()[r * f.D + 0] = static_cast<double>(r + 1);
    for (std::size_t i = 0; i < f.E; ++i) t.intra.mutable_values()[i * f.D + 1] = static_cast<double>(i + 1);
    for (std::size_t j = 0; j < L; ++j) t.abs.mutable_values()[j * f.D + 2] = static_cast<double>(j + 1);
    auto h = apply_topological_embedding(zero, zero, t, f.idx);
    for (std::size_t b = 0; b < f.B; ++b)
        for (std::size_t j = 0; j < L; ++j) {
            const double* row = &h.values()[(b * L + j) * f.D];
            EXPECT_EQ(row[0], static_cast<double>(j / f.E + 1));
            EXPECT_EQ(row[1], static_cast<double>(j % f.E + 1));
            EXPECT_EQ(row[2], static_cast<double>(j + 1));
            EXPECT_EQ(row[3], 0.0);
        }
}

TEST(Embedding, SwapIsNotPermutation) {
    Fixture f;
    const std::size_t L = f.R * f.E, D = f.D;
    auto h = apply_topological_embedding(f.fused, f.raw, f.tables, f.idx);
    // Swap the content at positions 1 and 4 of every sample.
    auto swap_rows = [&](const TensorD& x) {
        auto v = std::vector<double>(x.values().begin(), x.values().end());
        for (std::size_t b = 0; b < f.B; ++b)
            for (std::size_t d = 0; d < D; ++d) std::swap(v[(b * L + 1) * D + d], v[(b * L + 4) * D + d]);
        return TensorD::from(x.shape(), v);
    };
    auto hs = apply_topological_embedding(swap_rows(f.fused), swap_rows(f.raw), f.tables, f.idx);
    auto permuted = swap_rows(h);
    EXPECT_GT(test::max_abs_diff(hs.values(), permuted.values()), 1e-3);
    // With zero tables the swap is a pure permutation.
    f.tables.disable();
    auto z = apply_topological_embedding(f.fused, f.raw, f.tables, f.idx);
    auto zs = apply_topological_embedding(swap_rows(f.fused), swap_rows(f.raw), f.tables, f.idx);
    EXPECT_EQ(test::max_abs_diff(zs.values(), swap_rows(z).values()), 0.0);
}

TEST(Embedding, GradientsReachAllAddends) {
    Fixture f;
    f.fused.set_requires_grad(true);
    f.raw.set_requires_grad(true);
    backward(sum(apply_topological_embedding(f.fused, f.raw, f.tables, f.idx)));
    for (const auto* t : {&f.fused, &f.raw}) EXPECT_EQ(t->grad()[0], 1.0);
    // Each region row is hit B*E times, each intra row B*R times, each abs row B times.
    EXPECT_EQ(f.tables.region.grad()[0], static_cast<double>(f.B * f.E));
    EXPECT_EQ(f.tables.intra.grad()[0], static_cast<double>(f.B * f.R));
    EXPECT_EQ(f.tables.abs.grad()[0], static_cast<double>(f.B));
}

TEST(Embedding, RejectsMismatchedGrid) {
    Fixture f;
    auto idx = generate_indices(3, 6, 2, 3);
    EXPECT_THROW(apply_topological_embedding(f.fused, f.raw, f.tables, idx), ShapeError);
}

TEST(Placement, PaddingIsZeroAndInvalid) {
    auto map = compact(build_topology({"Cz", "O1"}, MontageStandard::ten_ten), 2);
    RawRecording rec;
    rec.fs = 200;
    rec.channels = {{"Cz", std::vector<double>(10, 1.0)}, {"O1", std::vector<double>(10, 2.0)}};
    auto batch = EegBatch::zeros(1, map.R, map.E, 8);
    std::fill(batch.data.begin(), batch.data.end(), 9.0f);
    place_recording(rec, map, batch, 0);
    std::size_t live = 0;
    for (std::size_t l = 0; l < batch.L(); ++l) {
        live += batch.valid[l];
        if (!batch.valid[l]) {
            for (float v : batch.row(0, l)) EXPECT_EQ(v, 0.0f);
        }
    }
    EXPECT_EQ(live, 2u);
    EXPECT_EQ(batch.row(0, map.find("O1")->abs)[3], 2.0f);
}
