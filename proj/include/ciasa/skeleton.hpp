#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace ciasa {

using Index = Eigen::Index;

class SkeletonError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct Bone {
    int parent;
    int child;
};

/// Joint tree of a skeleton: parent links, the bone (intra-body edge) list
/// and the bones feeding the bone-angle feature map.
class SkeletonTopology {
public:
    /// Builds and validates a topology. `parents[root] == -1` for exactly one
    /// joint. `extremity` flags leaf joints (hands, feet, head) whose incoming
    /// bone is excluded from the major-bone list. `groups` names joint subsets
    /// used for masks and clipping schedules.
    static SkeletonTopology from_parents(std::vector<int> parents, std::vector<std::string> names = {},
                                         std::vector<bool> extremity = {},
                                         std::map<std::string, std::vector<int>> groups = {});

    int joints() const { return static_cast<int>(parents_.size()); }
    int root() const { return root_; }
    int parent(int joint) const { return parents_[static_cast<std::size_t>(joint)]; }
    const std::vector<int>& parents() const { return parents_; }
    const std::vector<std::string>& names() const { return names_; }
    const std::vector<bool>& extremity() const { return extremity_; }

    /// One bone per non-root joint, parent-before-child, siblings by index.
    const std::vector<Bone>& bones() const { return bones_; }
    /// Joints in the same traversal order, root first.
    const std::vector<int>& order() const { return order_; }
    const std::vector<int>& children(int joint) const { return children_[static_cast<std::size_t>(joint)]; }
    /// Indices into bones() of the bones used by the feature map.
    const std::vector<int>& major_bones() const { return major_bones_; }
    int depth(int joint) const { return depth_[static_cast<std::size_t>(joint)]; }

    const std::map<std::string, std::vector<int>>& groups() const { return groups_; }
    int joint_index(const std::string& name) const;
    /// Resolves a group name, joint name or decimal joint index.
    std::vector<int> resolve(const std::string& token) const;

    /// Replaces the major-bone selection (indices into bones()).
    void set_major_bones(std::vector<int> bone_indices);

    bool operator==(const SkeletonTopology& other) const { return parents_ == other.parents_; }

private:
    int root_ = 0;
    std::vector<int> parents_;
    std::vector<std::string> names_;
    std::vector<bool> extremity_;
    std::vector<Bone> bones_;
    std::vector<int> order_;
    std::vector<std::vector<int>> children_;
    std::vector<int> major_bones_;
    std::vector<int> depth_;
    std::map<std::string, std::vector<int>> groups_;
};

/// 15-joint humanoid rooted at the torso:
/// torso, neck, head, {l,r}_{shoulder,elbow,wrist}, {l,r}_{hip,knee,ankle}.
/// Groups: head_torso, arms, hips_knees, ankles, legs, plus per-type groups
/// (hips, knees, ankles, shoulders, elbows, wrists).
SkeletonTopology humanoid15();

/// T frames of N joints in D dimensions, row t holding frame t as
/// [x_0 y_0 (z_0) x_1 ...]. Optional per-joint confidence, T x N.
template <typename Scalar>
struct BasicSkeletonSequence {
    using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

    Index dims = 3;
    Matrix coords;
    std::optional<Matrix> confidence;

    BasicSkeletonSequence() = default;
    BasicSkeletonSequence(Index frames, Index joints, Index dims_, bool with_confidence = false)
        : dims(dims_), coords(Matrix::Zero(frames, joints * dims_)) {
        if (with_confidence) confidence = Matrix::Ones(frames, joints);
    }

    Index frames() const { return coords.rows(); }
    Index joints() const { return dims > 0 ? coords.cols() / dims : 0; }
    bool has_confidence() const { return confidence.has_value(); }

    auto joint(Index t, Index j) { return coords.row(t).segment(j * dims, dims); }
    auto joint(Index t, Index j) const { return coords.row(t).segment(j * dims, dims); }

    bool operator==(const BasicSkeletonSequence& o) const {
        if (dims != o.dims || coords.rows() != o.coords.rows() || coords.cols() != o.coords.cols()) return false;
        if (coords != o.coords || has_confidence() != o.has_confidence()) return false;
        return !has_confidence() || *confidence == *o.confidence;
    }
};

using SkeletonSequence = BasicSkeletonSequence<double>;

/// lengths(t, b) = |v_child - v_parent| at frame t for bone b of the topology.
template <typename Scalar>
struct BasicBoneLengthTable {
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> lengths;
    /// (frame, bone) pairs with zero length.
    std::vector<std::pair<Index, int>> degenerate;
};

using BoneLengthTable = BasicBoneLengthTable<double>;

namespace detail {

template <typename Scalar>
void check_against(const BasicSkeletonSequence<Scalar>& seq, const SkeletonTopology& topo, const char* op) {
    if (seq.dims != 2 && seq.dims != 3) {
        throw SkeletonError(std::string(op) + ": coordinate dimension must be 2 or 3, got " + std::to_string(seq.dims));
    }
    if (seq.joints() != topo.joints() || seq.coords.cols() != seq.joints() * seq.dims) {
        throw SkeletonError(std::string(op) + ": sequence has " + std::to_string(seq.joints()) +
                            " joints, topology expects " + std::to_string(topo.joints()));
    }
}

} // namespace detail

template <typename Scalar>
BasicBoneLengthTable<Scalar> bone_lengths(const BasicSkeletonSequence<Scalar>& seq, const SkeletonTopology& topo) {
    detail::check_against(seq, topo, "bone_lengths");
    const auto& bones = topo.bones();
    BasicBoneLengthTable<Scalar> table;
    table.lengths.resize(seq.frames(), static_cast<Index>(bones.size()));
    for (Index t = 0; t < seq.frames(); ++t) {
        for (std::size_t b = 0; b < bones.size(); ++b) {
            const Scalar len = (seq.joint(t, bones[b].child) - seq.joint(t, bones[b].parent)).norm();
            table.lengths(t, static_cast<Index>(b)) = len;
            if (len == Scalar(0)) table.degenerate.emplace_back(t, static_cast<int>(b));
        }
    }
    return table;
}

/// Second temporal difference v_{t+1} + v_{t-1} - 2 v_t for interior frames;
/// row k holds frame k+1.
template <typename Scalar>
typename BasicSkeletonSequence<Scalar>::Matrix acceleration_field(const BasicSkeletonSequence<Scalar>& seq) {
    const Index T = seq.frames();
    if (T < 3) throw SkeletonError("acceleration_field: needs at least 3 frames, got " + std::to_string(T));
    return seq.coords.bottomRows(T - 2) + seq.coords.topRows(T - 2) - Scalar(2) * seq.coords.middleRows(1, T - 2);
}

/// Spatial skeleton realignment. Walks each frame from the root; every child
/// joint is slid along its current bone direction until the bone regains its
/// reference length, and that displacement is carried by all descendants.
/// A zero-length perturbed bone borrows the direction of the reference frame.
/// When `movable` is non-empty, joints marked false are never moved: bones
/// into them are left as they are and nothing is carried through them.
template <typename Scalar>
BasicSkeletonSequence<Scalar> ssr_realign(const BasicSkeletonSequence<Scalar>& perturbed,
                                          const BasicSkeletonSequence<Scalar>& reference,
                                          const BasicBoneLengthTable<Scalar>& reference_lengths,
                                          const SkeletonTopology& topo, const std::vector<bool>& movable = {}) {
    using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
    detail::check_against(perturbed, topo, "ssr_realign");
    detail::check_against(reference, topo, "ssr_realign");
    if (perturbed.frames() != reference.frames() || perturbed.dims != reference.dims ||
        reference_lengths.lengths.rows() != perturbed.frames()) {
        throw SkeletonError("ssr_realign: perturbed and reference sequences differ in shape");
    }
    if (!movable.empty() && static_cast<int>(movable.size()) != topo.joints()) {
        throw SkeletonError("ssr_realign: movable mask has " + std::to_string(movable.size()) + " entries for " +
                            std::to_string(topo.joints()) + " joints");
    }
    const Index D = perturbed.dims;
    const auto& bones = topo.bones();
    BasicSkeletonSequence<Scalar> out = perturbed;
    // Cumulative displacement carried by each joint's subtree.
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> carried(topo.joints(), D);
    for (Index t = 0; t < perturbed.frames(); ++t) {
        carried.setZero();
        for (std::size_t b = 0; b < bones.size(); ++b) {
            const int i = bones[b].parent;
            const int j = bones[b].child;
            if (!movable.empty() && !movable[static_cast<std::size_t>(j)]) continue;
            const Scalar target = reference_lengths.lengths(t, static_cast<Index>(b));
            if (!(target > Scalar(0))) {
                throw SkeletonError("ssr_realign: reference bone " + std::to_string(i) + "-" + std::to_string(j) +
                                    " has zero length at frame " + std::to_string(t));
            }
            // Same expression as bone_lengths, so an untouched bone compares equal.
            Scalar len = (perturbed.joint(t, j) - perturbed.joint(t, i)).norm();
            if (len == target) {
                // Already the right length: the child only follows its parent.
                carried.row(j) = carried.row(i);
                continue;
            }
            Vec dir = perturbed.joint(t, j) - perturbed.joint(t, i);
            if (len == Scalar(0)) {
                dir = reference.joint(t, j) - reference.joint(t, i);
                len = dir.norm();
                if (len == Scalar(0)) {
                    throw SkeletonError("ssr_realign: bone " + std::to_string(i) + "-" + std::to_string(j) +
                                        " has no direction at frame " + std::to_string(t));
                }
            }
            // Parent already sits at its final place; the child has moved with it.
            const Vec parent_pos = perturbed.joint(t, i).transpose() + carried.row(i).transpose();
            const Vec placed = parent_pos + dir * (target / len);
            const Vec current = perturbed.joint(t, j).transpose() + carried.row(i).transpose();
            carried.row(j) = carried.row(i) + (placed - current).transpose();
        }
        for (int j = 0; j < topo.joints(); ++j) out.joint(t, j) = perturbed.joint(t, j) + carried.row(j);
    }
    return out;
}

template <typename Scalar>
BasicSkeletonSequence<Scalar> ssr_realign(const BasicSkeletonSequence<Scalar>& perturbed,
                                          const BasicSkeletonSequence<Scalar>& reference,
                                          const SkeletonTopology& topo) {
    return ssr_realign(perturbed, reference, bone_lengths(reference, topo), topo);
}

/// Pairwise cosine of the major bones at frame t; H x H, H = |major bones|.
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> bone_angle_feature_map(const BasicSkeletonSequence<Scalar>& seq,
                                                                             Index t, const SkeletonTopology& topo) {
    detail::check_against(seq, topo, "bone_angle_feature_map");
    const auto& major = topo.major_bones();
    const auto H = static_cast<Index>(major.size());
    if (H < 2) throw SkeletonError("bone_angle_feature_map: needs at least 2 major bones");
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> units(H, seq.dims);
    for (Index a = 0; a < H; ++a) {
        const Bone& bone = topo.bones()[static_cast<std::size_t>(major[static_cast<std::size_t>(a)])];
        const auto v = (seq.joint(t, bone.child) - seq.joint(t, bone.parent)).eval();
        const Scalar n = v.norm();
        if (n == Scalar(0)) {
            throw SkeletonError("bone_angle_feature_map: zero-length bone " + std::to_string(bone.parent) + "-" +
                                std::to_string(bone.child) + " at frame " + std::to_string(t));
        }
        units.row(a) = v / n;
    }
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> x = units * units.transpose();
    for (Index a = 0; a < H; ++a) {
        x(a, a) = Scalar(1);
        for (Index b = a + 1; b < H; ++b) x(b, a) = x(a, b) = std::clamp(x(a, b), Scalar(-1), Scalar(1));
    }
    return x;
}

struct Violation {
    enum class Kind { non_finite, shape, zero_length_bone, confidence_range };
    Kind kind;
    Index frame = -1;
    int joint = -1;
    int axis = -1;
    std::string message;
};

struct ValidationReport {
    std::vector<Violation> violations;
    /// Filled when a reference sequence is given.
    std::optional<double> max_bone_drift;
    std::optional<double> max_displacement;

    bool ok() const { return violations.empty(); }
};

template <typename Scalar>
ValidationReport validate_sequence(const BasicSkeletonSequence<Scalar>& seq, const SkeletonTopology& topo,
                                   const BasicSkeletonSequence<Scalar>* reference = nullptr) {
    ValidationReport report;
    auto flag = [&](Violation::Kind kind, Index t, int j, int axis, std::string msg) {
        report.violations.push_back({kind, t, j, axis, std::move(msg)});
    };
    if ((seq.dims != 2 && seq.dims != 3) || seq.joints() != topo.joints() ||
        seq.coords.cols() != seq.joints() * seq.dims) {
        flag(Violation::Kind::shape, -1, -1, -1,
             "expected " + std::to_string(topo.joints()) + " joints in 2 or 3 dimensions, got " +
                 std::to_string(seq.coords.cols()) + " columns with D=" + std::to_string(seq.dims));
        return report;
    }
    if (seq.has_confidence() &&
        (seq.confidence->rows() != seq.frames() || seq.confidence->cols() != seq.joints())) {
        flag(Violation::Kind::shape, -1, -1, -1, "confidence channel shape does not match coordinates");
    }
    bool finite = true;
    for (Index t = 0; t < seq.frames(); ++t) {
        for (int j = 0; j < topo.joints(); ++j) {
            for (Index a = 0; a < seq.dims; ++a) {
                if (!std::isfinite(static_cast<double>(seq.joint(t, j)(a)))) {
                    finite = false;
                    flag(Violation::Kind::non_finite, t, j, static_cast<int>(a),
                         "non-finite coordinate at frame " + std::to_string(t) + ", joint " + std::to_string(j) +
                             ", axis " + std::to_string(a));
                }
            }
            if (seq.has_confidence() && seq.confidence->cols() == seq.joints()) {
                const double c = static_cast<double>((*seq.confidence)(t, j));
                if (!(c >= 0.0 && c <= 1.0)) {
                    flag(Violation::Kind::confidence_range, t, j, -1,
                         "confidence outside [0,1] at frame " + std::to_string(t) + ", joint " + std::to_string(j));
                }
            }
        }
    }
    if (!finite) return report;
    const auto lengths = bone_lengths(seq, topo);
    for (const auto& [t, b] : lengths.degenerate) {
        const Bone& bone = topo.bones()[static_cast<std::size_t>(b)];
        flag(Violation::Kind::zero_length_bone, t, bone.child, -1,
             "zero-length bone " + std::to_string(bone.parent) + "-" + std::to_string(bone.child) + " at frame " +
                 std::to_string(t));
    }
    if (reference != nullptr && reference->coords.rows() == seq.coords.rows() &&
        reference->coords.cols() == seq.coords.cols() && reference->dims == seq.dims) {
        const auto ref = bone_lengths(*reference, topo);
        report.max_bone_drift = static_cast<double>((lengths.lengths - ref.lengths).cwiseAbs().maxCoeff());
        report.max_displacement = static_cast<double>((seq.coords - reference->coords).cwiseAbs().maxCoeff());
    } else if (reference != nullptr) {
        flag(Violation::Kind::shape, -1, -1, -1, "reference sequence shape differs");
    }
    return report;
}

} // namespace ciasa
