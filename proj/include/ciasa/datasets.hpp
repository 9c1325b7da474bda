#pragma once

// Synthetic skeleton actions and the text formats for sequences and
// dataset manifests.

#include "ciasa/skeleton.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace ciasa {

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// angle(t) = amplitude * sin(2 pi (frequency * (t / T + shift)) + phase),
/// with frequency in cycles per sequence and `shift` the per-sample offset.
struct SinusoidTerm {
    int joint = 0;
    int axis = 0;
    double amplitude = 0.0;
    double frequency = 1.0;
    double phase = 0.0;
};

/// One action class. Motions live in angle space: `rotations` drive the local
/// orientation of the bone ending at `joint` (the root term rotates the whole
/// body), `translation` moves the root; forward kinematics then places every
/// joint, so bone lengths equal the rest offsets exactly.
struct MotionClassSpec {
    std::string name;
    /// Constant local Euler angles (x, y, z) per joint, N x 3.
    Eigen::MatrixX3d base_angles;
    std::vector<SinusoidTerm> rotations;
    std::vector<SinusoidTerm> translation;
    /// Standard deviation of per-frame angle noise, radians.
    double noise = 0.0;
};

/// Rest pose of a topology: offset of each joint from its parent (N x 3, the
/// root row is its absolute position).
struct RestPose {
    SkeletonTopology topology;
    Eigen::MatrixX3d offsets;
};

RestPose humanoid15_rest_pose();

/// arm_wave, squat, kick, twist, idle_sway on humanoid15(), balanced to a peak
/// joint displacement of 0.04.
std::vector<MotionClassSpec> default_motion_suite();

/// Multiplies every angle and translation amplitude by `factor`.
MotionClassSpec scale_motion(MotionClassSpec spec, double factor);

/// Largest |coordinate - neutral stance| of the noise-free motion.
double peak_displacement(const RestPose& pose, const MotionClassSpec& spec, int frames = 24);

/// Rescales each class (bisection on a factor in [0, 5]) so its peak
/// displacement equals `target`.
std::vector<MotionClassSpec> balance_motion_suite(std::vector<MotionClassSpec> suite, const RestPose& pose, double target,
                                                  int frames = 24);

struct LabeledSample {
    std::string id;
    int label = 0;
    SkeletonSequence sequence;
};

struct LabeledDataset {
    SkeletonTopology topology;
    std::vector<std::string> class_names;
    std::vector<LabeledSample> train;
    std::vector<LabeledSample> test;

    int classes() const { return static_cast<int>(class_names.size()); }
};

/// Per-sample nuisance shared by all classes.
struct VariationRanges {
    /// Sinusoid amplitudes scale by a factor drawn uniformly from [1 - a, 1 + a].
    double amplitude = 0.0;
    /// Whole-body yaw drawn uniformly from [-yaw, yaw] radians.
    double yaw = 0.0;
    /// Standard deviation of a static per-joint angle offset, radians.
    double posture = 0.0;
};

struct SampleVariation {
    double shift = 0.0;
    double amplitude_scale = 1.0;
    double yaw = 0.0;
    /// N x 3 static angle offsets; empty means none.
    Eigen::MatrixX3d posture;
};

struct GenerationOptions {
    int frames = 24;
    int train_per_class = 80;
    int test_per_class = 20;
    std::uint64_t seed = 7;
    /// Overrides every spec's noise level when set.
    std::optional<double> noise;
    VariationRanges variation;
};

/// Renders one sample with the given nuisance (`shift` is a fraction of the
/// sequence) and Gaussian angle noise of standard deviation `noise` drawn
/// from `rng`.
SkeletonSequence synthesize(const RestPose& pose, const MotionClassSpec& spec, int frames,
                            const SampleVariation& variation, double noise, std::mt19937_64& rng);

SampleVariation draw_variation(const VariationRanges& ranges, int joints, std::mt19937_64& rng);

LabeledDataset generate_dataset(const RestPose& pose, const std::vector<MotionClassSpec>& specs,
                                const GenerationOptions& options);

/// Per-channel perturbation eligibility for a sequence: D coordinate channels
/// followed by the confidence channel when present. `requested` (length D or
/// D+1) can disable coordinate axes; confidence is never eligible.
std::vector<bool> mask_channels(const SkeletonSequence& seq, const std::vector<bool>& requested = {});

// --- file formats ------------------------------------------------------------

void write_sequence(std::ostream& out, const SkeletonSequence& seq, const SkeletonTopology& topo);
/// Parses a sequence; when `expected` is given the header topology must match.
SkeletonSequence read_sequence(std::istream& in, const SkeletonTopology* expected = nullptr,
                               SkeletonTopology* header_topology = nullptr);

void save_sequence(const std::filesystem::path& path, const SkeletonSequence& seq, const SkeletonTopology& topo);
SkeletonSequence load_sequence(const std::filesystem::path& path, const SkeletonTopology* expected = nullptr,
                               SkeletonTopology* header_topology = nullptr);

struct ManifestRecord {
    std::string split;
    int label = 0;
    std::string id;
    std::filesystem::path path; // relative paths resolve against the manifest's directory
};

struct Manifest {
    std::vector<std::string> class_names;
    std::vector<ManifestRecord> records;
};

void save_manifest(const std::filesystem::path& path, const Manifest& manifest);
Manifest load_manifest(const std::filesystem::path& path);

/// Writes every sample as <dir>/<split>/<id>.seq plus <dir>/manifest.txt.
void save_dataset(const std::filesystem::path& dir, const LabeledDataset& data);
LabeledDataset load_dataset(const std::filesystem::path& manifest_path);

/// Writes `contents` to a sibling temporary file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

} // namespace ciasa
