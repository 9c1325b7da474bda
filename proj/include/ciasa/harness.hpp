#pragma once

// Experiment orchestration: fooling-rate metrics, attack runs over a split,
// transfer evaluation, checkpoints, attack config files and the CLI.

#include "ciasa/attacks.hpp"
#include "ciasa/datasets.hpp"
#include "ciasa/stgcn.hpp"

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ciasa {

struct FoolingRow {
    std::string id;
    int ground_truth = -1;
    int clean_prediction = -1;
    int attacked_prediction = -1;
    int target = -1; // -1 when untargeted
    int iterations = 0;
    double displacement_pre_ssr = 0.0;
    double displacement_post_ssr = 0.0;
    double bone_drift = 0.0;
    /// "ok" or the error that stopped this sample.
    std::string status = "ok";

    bool changed() const { return status == "ok" && attacked_prediction != clean_prediction; }
    bool hit() const { return status == "ok" && target >= 0 && attacked_prediction == target; }
};

struct FoolingReport {
    std::size_t samples = 0;
    double fooling_rate = 0.0;  // % of samples whose prediction changed
    double targeted_rate = 0.0; // % of samples predicted as their target
    double mean_iterations = 0.0;
    double mean_displacement_pre_ssr = 0.0;
    double mean_displacement_post_ssr = 0.0;
    double mean_bone_drift = 0.0;
    std::size_t errors = 0;
    std::vector<FoolingRow> rows;
};

/// Aggregates per-sample rows; errored rows count as neither changed nor hit.
FoolingReport summarize(std::vector<FoolingRow> rows);

/// Rates from prediction lists alone. Throws std::invalid_argument on length
/// mismatch.
FoolingReport fooling_rate(std::span<const int> clean, std::span<const int> attacked,
                           std::optional<std::span<const int>> targets = std::nullopt);

FoolingRow make_row(const LabeledSample& sample, const AttackResult& result);

std::string report_json(const FoolingReport& report, int indent = 2);

// --- attacks over a split ------------------------------------------------------

struct SuiteResult {
    FoolingReport report;
    std::vector<AttackResult> results; // aligned with report.rows; empty entries for errors
};

/// Attacks every sample; sample i uses seed derive_seed(seed, i). Failures are
/// recorded per row and the run continues.
SuiteResult attack_samples(const Classifier& model, const std::vector<LabeledSample>& samples,
                           const AttackConfig& config, const RealSampleProvider* real, std::uint64_t seed);

/// Rebuilds a labeled set from attack results (ids and labels kept).
std::vector<LabeledSample> perturbed_samples(const std::vector<LabeledSample>& clean, const SuiteResult& suite);

// --- transfer ----------------------------------------------------------------------

struct TransferReport {
    double clean_accuracy = 0.0;
    double perturbed_accuracy = 0.0;
    double accuracy_drop = 0.0;
    /// Prediction changes of the evaluated model, clean vs perturbed.
    FoolingReport fooling;
};

/// Evaluates `model` on clean/perturbed pairs (matched by id). `targets`, when
/// given, is aligned with `clean`. Throws std::invalid_argument when the model's
/// topology or class count does not fit the data.
TransferReport transfer_evaluate(const std::vector<LabeledSample>& clean, const std::vector<LabeledSample>& perturbed,
                                 const Classifier& model, int classes, const std::vector<int>& targets = {});

/// Same-joint, same-bound uniform noise as a label-flip base rate.
TransferReport noise_baseline(const std::vector<LabeledSample>& clean, const Classifier& model, int classes,
                              const ClipSpec& clip, const std::vector<bool>& active_joints,
                              const std::vector<bool>& channels, std::uint64_t seed);

std::string transfer_json(const TransferReport& report, int indent = 2);

// --- checkpoints ---------------------------------------------------------------------

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

void write_checkpoint(std::ostream& out, const Classifier& model);
/// When `expected` is given, a differing embedded config is rejected with a
/// per-field diff.
Classifier read_checkpoint(std::istream& in, const ClassifierConfig* expected = nullptr);

void save_checkpoint(const std::filesystem::path& path, const Classifier& model);
Classifier load_checkpoint(const std::filesystem::path& path, const ClassifierConfig* expected = nullptr);

/// "field: expected X, file has Y" lines for every differing field.
std::vector<std::string> config_diff(const ClassifierConfig& expected, const ClassifierConfig& actual);

// --- attack config files -----------------------------------------------------------------

/// key=value lines; unknown keys and malformed values are rejected.
AttackConfig parse_attack_config(const std::string& text, const SkeletonTopology& topo);
std::string format_attack_config(const AttackConfig& config);
AttackConfig load_attack_config(const std::filesystem::path& path, const SkeletonTopology& topo);

// --- experiments ---------------------------------------------------------------------------

struct ExperimentSpec {
    std::filesystem::path manifest;
    std::filesystem::path checkpoint;
    /// Attack config file; `config` is used when empty.
    std::filesystem::path attack_config;
    AttackConfig config;
    std::filesystem::path output_dir;
    std::uint64_t seed = 0;
    /// "single", "sweep" (one run per entry of `epsilons`) or "regions" (one
    /// localized run per entry of `regions`).
    std::string protocol = "single";
    std::vector<double> epsilons;
    std::vector<std::string> regions;
    /// Restrict to these sample ids; all test samples when empty.
    std::vector<std::string> sample_ids;
    std::optional<std::size_t> limit;
};

struct ExperimentCell {
    std::string name;
    AttackConfig config;
    FoolingReport report;
};

struct ExperimentResult {
    std::vector<ExperimentCell> cells;
    /// 0, or 1 when more than 10% of the attacked samples errored in any cell.
    int exit_status = 0;
};

/// Writes metadata.json, <cell>/report.json, <cell>/samples/<id>.json and .seq,
/// <cell>/manifest.txt, and sweep.csv or regions.csv for multi-cell protocols.
ExperimentResult run_attack_experiment(const ExperimentSpec& spec);

/// Current library version string embedded in metadata.
inline constexpr const char* kVersion = "1.0.0";

// --- verification ---------------------------------------------------------------------------

struct GradCheckEntry {
    std::string name;
    ad::GradCheckResult result;
};

/// Central-difference checks of the classifier cross-entropy (input and
/// parameters), the smoothness loss and both discriminator losses on a small
/// seeded instance of each.
std::vector<GradCheckEntry> run_gradient_checks(std::uint64_t seed);

int cli_main(int argc, char** argv);

} // namespace ciasa
