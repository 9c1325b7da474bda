#pragma once

// One-step (FGSM) and constrained iterative attacks on a skeleton classifier.

#include "ciasa/datasets.hpp"
#include "ciasa/diffcore.hpp"
#include "ciasa/ganreg.hpp"
#include "ciasa/stgcn.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace ciasa {

enum class AttackMode { basic, localized, advanced };

std::string to_string(AttackMode mode);
AttackMode parse_attack_mode(const std::string& name);

/// Per-joint l-infinity bound on the coordinate perturbation.
struct ClipSpec {
    enum class Kind { global, hierarchical };

    Kind kind = Kind::global;
    double epsilon = 0.03;
    Eigen::VectorXd per_joint; // hierarchical only, length N

    static ClipSpec global(double epsilon);
    static ClipSpec hierarchical(Eigen::VectorXd per_joint);

    double bound(int joint) const { return kind == Kind::global ? epsilon : per_joint[joint]; }
    void validate(int joints) const;
};

/// Parses "hips:0.01,knees:0.05,..." where each key is a topology group, joint
/// name or joint index. Joints not named get 0.
ClipSpec parse_clip_schedule(const std::string& schedule, const SkeletonTopology& topo);

/// Hierarchical bounds growing from parents to children inside the active
/// region: the k-th level below the region's top joints gets steps[k] (the
/// last step repeats for deeper levels). Inactive joints get 0.
ClipSpec incremental_schedule(const SkeletonTopology& topo, const std::vector<bool>& active,
                              const std::vector<double>& steps = {0.01, 0.05, 0.15, 0.25});

/// Joint mask from a comma-separated list of groups, joint names or indices;
/// "all" selects every joint.
std::vector<bool> parse_joint_mask(const std::string& spec, const SkeletonTopology& topo);

enum class TargetPolicy { least_likely, explicit_class };

struct AttackConfig {
    AttackMode mode = AttackMode::basic;
    ClipSpec clip;
    /// Joints allowed to move; empty means all.
    std::vector<bool> active_joints;
    /// Coordinate axes allowed to move; empty means all. Confidence never moves.
    std::vector<bool> channels;
    double lambda = 10.0;
    double alpha = 0.01;
    int max_iterations = 400;
    TargetPolicy target_policy = TargetPolicy::least_likely;
    int target_class = -1;
    /// Stop once the target probability reaches this value.
    std::optional<double> early_stop;
    std::uint64_t seed = 0;
    // Ablation switches for the constraint terms.
    bool smoothness = true;
    bool gan = true;
    bool ssr = true;

    /// Throws std::invalid_argument when the mode/mask/clip combination is
    /// inconsistent for `topo`.
    void validate(const SkeletonTopology& topo) const;
    std::vector<bool> resolved_joints(int joints) const;
};

struct LossTrace {
    std::vector<double> prediction;
    std::vector<double> smoothness;
    std::vector<double> adversarial;
    std::vector<double> total;
};

struct ConstraintReport {
    /// Largest |V' - V0| right after clipping, over all iterations.
    double max_displacement_pre_ssr = 0.0;
    /// Largest |V' - V0| of the returned sequence.
    double max_displacement_post_ssr = 0.0;
    /// Largest amount by which the returned sequence exceeds a joint's bound.
    double max_epsilon_excess = 0.0;
    /// Largest |bone length - clean bone length| of the returned sequence.
    double max_bone_drift = 0.0;
};

struct AttackResult {
    SkeletonSequence perturbed;
    LossTrace trace;
    int ground_truth = -1;
    int target = -1;
    int clean_prediction = -1;
    int predicted = -1;
    double confidence = 0.0;
    int iterations = 0;
    ConstraintReport constraints;
    bool success = false;
    /// "ok", or why the run stopped early.
    std::string status = "ok";
};

struct IterationSnapshot {
    int iteration;
    const SkeletonSequence& clipped;
    const SkeletonSequence& realigned;
};

using IterationObserver = std::function<void(const IterationSnapshot&)>;

/// Source of unpaired natural samples for the discriminator, with their
/// feature maps precomputed.
class RealSampleProvider {
public:
    RealSampleProvider(const std::vector<LabeledSample>& pool, const SkeletonTopology& topo);

    /// Uniform draw, never returning the sample with id `exclude_id` (unless
    /// it is the only one).
    std::size_t draw(std::mt19937_64& rng, const std::string& exclude_id) const;
    const ad::Value& features(std::size_t i) const { return features_[i]; }
    std::size_t size() const { return ids_.size(); }

private:
    std::vector<std::string> ids_;
    std::vector<ad::Value> features_;
};

/// (1 / (T-1)) * sum over interior frames and joints of |acceleration|^2.
ad::Value smoothness_loss(const ad::Value& coords);
double smoothness_loss(const SkeletonSequence& seq);

ad::Value ciasa_total_loss(const ad::Value& prediction, const ad::Value& smoothness, const ad::Value& adversarial,
                           double lambda);
double ciasa_total_loss(double prediction, double smoothness, double adversarial, double lambda);

/// Clamps eligible coordinates into [V0 - eps_i, V0 + eps_i] and restores all
/// other coordinates (and confidence) to V0 exactly.
SkeletonSequence clip_perturbation(const SkeletonSequence& perturbed, const SkeletonSequence& clean,
                                   const ClipSpec& clip, const std::vector<bool>& active_joints,
                                   const std::vector<bool>& channels);

struct FgsmDirection {
    bool targeted = false;
    /// Ground truth (untargeted) or target class (targeted).
    int label = 0;
};

/// V' = V0 + eps * sign(grad) (untargeted) or V0 - eps * sign(grad) (targeted),
/// restricted to eligible joints and channels.
SkeletonSequence fgsm_step(const Classifier& model, const SkeletonSequence& clean, double epsilon,
                           const FgsmDirection& direction, const std::vector<bool>& active_joints = {},
                           const std::vector<bool>& channels = {});

/// Uniform noise in [-eps_i, eps_i] on the eligible coordinates, then clipped.
SkeletonSequence random_perturbation(const SkeletonSequence& clean, const ClipSpec& clip,
                                     const std::vector<bool>& active_joints, const std::vector<bool>& channels,
                                     std::mt19937_64& rng);

/// Constrained iterative targeted attack. Per iteration: forward, prediction
/// + smoothness + LSGAN losses, backward, one Adam step on the coordinates and
/// the discriminator, clip, skeleton realignment.
AttackResult ciasa_attack(const Classifier& model, const LabeledSample& sample, const AttackConfig& config,
                          const RealSampleProvider* real, const IterationObserver& observer = {});

/// Deterministic 64-bit mix of a seed and a stream index.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

} // namespace ciasa
