#include "ciasa/datasets.hpp"
#include "ciasa/skeleton.hpp"

#include <doctest.h>

#include <random>

using namespace ciasa;

namespace {

// root(0) -> a(1) -> b(2), plus root -> c(3).
SkeletonTopology small_tree() { return SkeletonTopology::from_parents({-1, 0, 1, 0}); }

SkeletonSequence one_frame(std::initializer_list<Eigen::Vector3d> joints) {
    SkeletonSequence s(1, static_cast<Index>(joints.size()), 3);
    Index j = 0;
    for (const auto& p : joints) s.joint(0, j++) = p.transpose();
    return s;
}

SkeletonSequence generated(std::uint64_t seed, int frames = 12) {
    std::mt19937_64 rng(seed);
    SampleVariation v;
    v.shift = 0.3;
    const auto suite = default_motion_suite();
    return synthesize(humanoid15_rest_pose(), suite[seed % suite.size()], frames, v, 0.01, rng);
}

} // namespace

TEST_SUITE("skeleton") {

TEST_CASE("topology validation") {
    CHECK_NOTHROW(small_tree());
    CHECK_THROWS_AS(SkeletonTopology::from_parents({-1, -1}), SkeletonError);  // two roots
    CHECK_THROWS_AS(SkeletonTopology::from_parents({1, 0}), SkeletonError);    // cycle, no root
    CHECK_THROWS_AS(SkeletonTopology::from_parents({-1, 2, 1}), SkeletonError); // unreachable cycle
    CHECK_THROWS_AS(SkeletonTopology::from_parents({-1, 5}), SkeletonError);    // bad index
    const SkeletonTopology t = small_tree();
    CHECK(t.bones().size() == 3);
    CHECK(t.order().front() == 0);
}

TEST_CASE("humanoid topology") {
    const SkeletonTopology h = humanoid15();
    CHECK(h.joints() == 15);
    CHECK(h.bones().size() == 14);
    // Extremity bones (head, wrists, ankles) are not major.
    CHECK(h.major_bones().size() == 9);
    for (const char* g : {"head_torso", "arms", "hips_knees", "ankles", "legs", "hips", "knees"}) {
        CHECK(h.groups().count(g) == 1);
    }
    CHECK(h.resolve("legs").size() == 6);
    CHECK(h.resolve("l_knee") == std::vector<int>{h.joint_index("l_knee")});
    CHECK(h.resolve("3") == std::vector<int>{3});
    CHECK_THROWS_AS(h.resolve("tail"), SkeletonError);
}

TEST_CASE("bone lengths") {
    const SkeletonTopology t = SkeletonTopology::from_parents({-1, 0});
    CHECK(bone_lengths(one_frame({{0, 0, 0}, {0, 1, 0}}), t).lengths(0, 0) == 1.0);
    CHECK(bone_lengths(one_frame({{1, 1, 0}, {4, 5, 0}}), t).lengths(0, 0) == 5.0);
    const auto degenerate = bone_lengths(one_frame({{2, 2, 2}, {2, 2, 2}}), t);
    CHECK(degenerate.lengths(0, 0) == 0.0);
    CHECK(degenerate.degenerate.size() == 1);
    CHECK_THROWS_AS(bone_lengths(one_frame({{0, 0, 0}, {1, 0, 0}, {2, 0, 0}}), t), SkeletonError);
}

TEST_CASE("acceleration field") {
    SkeletonSequence lin(5, 1, 3);
    for (Index t = 0; t < 5; ++t) lin.joint(t, 0) = Eigen::RowVector3d(static_cast<double>(t), 0, 0);
    CHECK(acceleration_field(lin).cwiseAbs().maxCoeff() == 0.0);

    SkeletonSequence s(3, 1, 1 + 2); // only x moves
    s.joint(2, 0)(0) = 1.0;
    const auto a = acceleration_field(s);
    REQUIRE(a.rows() == 1);
    CHECK(a(0, 0) == 1.0);

    CHECK(acceleration_field(SkeletonSequence(4, 2, 3)).cwiseAbs().maxCoeff() == 0.0);
    CHECK_THROWS_AS(acceleration_field(SkeletonSequence(2, 1, 3)), SkeletonError);
}

TEST_CASE("affine-in-time motion has no acceleration") {
    std::mt19937_64 rng(9);
    std::normal_distribution<double> n;
    SkeletonSequence s(7, 4, 3);
    Eigen::RowVectorXd base(12), vel(12);
    for (Index i = 0; i < 12; ++i) base[i] = n(rng), vel[i] = n(rng);
    for (Index t = 0; t < 7; ++t) s.coords.row(t) = base + static_cast<double>(t) * vel;
    CHECK(acceleration_field(s).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("SSR rescales a bone along its direction") {
    const SkeletonTopology t = SkeletonTopology::from_parents({-1, 0});
    const SkeletonSequence ref = one_frame({{0, 0, 0}, {1, 0, 0}});
    const SkeletonSequence out = ssr_realign(one_frame({{0, 0, 0}, {2, 0, 0}}), ref, t);
    CHECK(out.joint(0, 1)(0) == 1.0);
    CHECK(out.joint(0, 0).norm() == 0.0);
}

TEST_CASE("SSR carries a parent's displacement to its descendants") {
    const SkeletonTopology t = SkeletonTopology::from_parents({-1, 0, 1});
    const SkeletonSequence ref = one_frame({{0, 0, 0}, {1, 0, 0}, {1, 1, 0}});
    // a pushed out to x=3 (delta -2 after realignment); b still 1 above a.
    const SkeletonSequence pert = one_frame({{0, 0, 0}, {3, 0, 0}, {3, 1, 0}});
    const SkeletonSequence out = ssr_realign(pert, ref, t);
    CHECK(out.joint(0, 1).isApprox(Eigen::RowVector3d(1, 0, 0)));
    // b moved by the same -2 first and then already had length 1.
    CHECK(out.joint(0, 2).isApprox(Eigen::RowVector3d(1, 1, 0)));
}

TEST_CASE("SSR never moves joints outside the movable set") {
    const SkeletonTopology t = small_tree();
    const SkeletonSequence ref = one_frame({{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0}});
    // The root moved; a is frozen, c may follow.
    const SkeletonSequence pert = one_frame({{0.5, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0}});
    const SkeletonSequence out = ssr_realign(pert, ref, bone_lengths(ref, t), t, {true, false, true, true});
    CHECK(out.joint(0, 1) == pert.joint(0, 1));
    // b is realigned against the frozen a, which did not move.
    CHECK(out.joint(0, 2) == pert.joint(0, 2));
    CHECK((out.joint(0, 3) - out.joint(0, 0)).norm() == doctest::Approx(1.0));
    CHECK_THROWS_AS(ssr_realign(pert, ref, bone_lengths(ref, t), t, {true, false}), SkeletonError);
}

TEST_CASE("SSR on an unperturbed sequence is the identity") {
    const SkeletonSequence s = generated(3);
    CHECK(ssr_realign(s, s, humanoid15()) == s);
}

TEST_CASE("SSR restores lengths, keeps directions and is idempotent") {
    const SkeletonTopology topo = humanoid15();
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(-0.05, 0.05);
    for (std::uint64_t k = 0; k < 20; ++k) {
        const SkeletonSequence clean = generated(k);
        SkeletonSequence pert = clean;
        for (Index i = 0; i < pert.coords.size(); ++i) pert.coords.data()[i] += u(rng);
        const SkeletonSequence once = ssr_realign(pert, clean, topo);
        const auto ref = bone_lengths(clean, topo).lengths;
        CHECK((bone_lengths(once, topo).lengths - ref).cwiseAbs().maxCoeff() < 1e-9);
        CHECK((ssr_realign(once, clean, topo).coords - once.coords).cwiseAbs().maxCoeff() < 1e-9);
        CHECK(once.joint(0, topo.root()) == pert.joint(0, topo.root()));
        for (Index t = 0; t < clean.frames(); ++t) {
            for (const Bone& b : topo.bones()) {
                const Eigen::Vector3d before = (pert.joint(t, b.child) - pert.joint(t, b.parent)).transpose();
                const Eigen::Vector3d after = (once.joint(t, b.child) - once.joint(t, b.parent)).transpose();
                CHECK(before.normalized().dot(after.normalized()) == doctest::Approx(1.0).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("SSR falls back to the reference direction for a collapsed bone") {
    const SkeletonTopology t = SkeletonTopology::from_parents({-1, 0});
    const SkeletonSequence ref = one_frame({{0, 0, 0}, {0, 2, 0}});
    const SkeletonSequence out = ssr_realign(one_frame({{1, 1, 1}, {1, 1, 1}}), ref, t);
    CHECK(out.joint(0, 1).isApprox(Eigen::RowVector3d(1, 3, 1)));
    const SkeletonSequence flat = one_frame({{0, 0, 0}, {0, 0, 0}});
    CHECK_THROWS_AS(ssr_realign(flat, flat, t), SkeletonError);
}

TEST_CASE("SSR leaves the confidence channel alone") {
    const SkeletonTopology t = SkeletonTopology::from_parents({-1, 0});
    SkeletonSequence ref(1, 2, 2, true);
    ref.joint(0, 1) << 1.0, 0.0;
    (*ref.confidence)(0, 1) = 0.25;
    SkeletonSequence pert = ref;
    pert.joint(0, 1) << 3.0, 0.0;
    const SkeletonSequence out = ssr_realign(pert, ref, t);
    CHECK(out.joint(0, 1)(0) == 1.0);
    CHECK(*out.confidence == *ref.confidence);
}

TEST_CASE("bone-angle feature map") {
    // Two major bones from a three-joint chain plus a branch.
    const SkeletonTopology t = SkeletonTopology::from_parents({-1, 0, 0});
    const auto ortho = bone_angle_feature_map(one_frame({{0, 0, 0}, {1, 0, 0}, {0, 1, 0}}), 0, t);
    CHECK(ortho(0, 1) == doctest::Approx(0.0));
    CHECK(ortho(0, 0) == 1.0);
    const auto diag = bone_angle_feature_map(one_frame({{0, 0, 0}, {1, 0, 0}, {1, 1, 0}}), 0, t);
    CHECK(diag(0, 1) == doctest::Approx(0.70710678).epsilon(1e-8));
    CHECK_THROWS_AS(bone_angle_feature_map(one_frame({{0, 0, 0}, {0, 0, 0}, {1, 1, 0}}), 0, t), SkeletonError);
}

TEST_CASE("feature map is symmetric, unit-diagonal, bounded and scale invariant") {
    const SkeletonTopology topo = humanoid15();
    const SkeletonSequence s = generated(5);
    SkeletonSequence scaled = s;
    scaled.coords *= 3.5;
    for (Index t = 0; t < s.frames(); ++t) {
        const auto x = bone_angle_feature_map(s, t, topo);
        CHECK(x.rows() == 9);
        CHECK((x - x.transpose()).cwiseAbs().maxCoeff() == 0.0);
        CHECK((x.diagonal().array() == 1.0).all());
        CHECK(x.cwiseAbs().maxCoeff() <= 1.0);
        CHECK((bone_angle_feature_map(scaled, t, topo) - x).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("geometry works on long double too") {
    const SkeletonTopology t = SkeletonTopology::from_parents({-1, 0});
    BasicSkeletonSequence<long double> ref(1, 2, 3), pert(1, 2, 3);
    ref.joint(0, 1) << 1.0L, 0.0L, 0.0L;
    pert.joint(0, 1) << 0.0L, 4.0L, 0.0L;
    const auto out = ssr_realign(pert, ref, t);
    CHECK(static_cast<double>(out.joint(0, 1)(1)) == 1.0);
}

TEST_CASE("validate_sequence") {
    const SkeletonTopology topo = humanoid15();
    const SkeletonSequence s = generated(1);
    CHECK(validate_sequence(s, topo).ok());

    SkeletonSequence bad = s;
    bad.joint(2, 4)(1) = std::nan("");
    const auto r = validate_sequence(bad, topo);
    REQUIRE(r.violations.size() == 1);
    CHECK(r.violations[0].kind == Violation::Kind::non_finite);
    CHECK(r.violations[0].frame == 2);
    CHECK(r.violations[0].joint == 4);
    CHECK(r.violations[0].axis == 1);

    // Drift fixture: move a wrist 0.03 further along its forearm at one frame.
    SkeletonSequence drifted = s;
    const int wrist = topo.joint_index("l_wrist");
    const int elbow = topo.parent(wrist);
    const Eigen::RowVector3d dir = (s.joint(3, wrist) - s.joint(3, elbow)).normalized();
    drifted.joint(3, wrist) += 0.03 * dir;
    const auto d = validate_sequence(drifted, topo, &s);
    CHECK(d.ok());
    REQUIRE(d.max_bone_drift);
    CHECK(*d.max_bone_drift == doctest::Approx(0.03).epsilon(1e-9));

    CHECK_FALSE(validate_sequence(SkeletonSequence(3, 4, 3), topo).ok());
}

} // TEST_SUITE
