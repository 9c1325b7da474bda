#pragma once

// Spatio-temporal graph convolution classifier over skeleton sequences.

#include "ciasa/datasets.hpp"
#include "ciasa/diffcore.hpp"
#include "ciasa/skeleton.hpp"

#include <cstdint>
#include <string>
#include <optional>
#include <vector>

namespace ciasa {

enum class PartitionStrategy {
    uniform,  // one label: the joint and its neighbours
    distance, // label 0: the joint itself, label 1: distance-1 neighbours
};

std::string to_string(PartitionStrategy p);
PartitionStrategy parse_partition(const std::string& name);

struct ClassifierConfig {
    int classes = 5;
    int layers = 3;
    int base_width = 16;
    /// Layer indices (0-based) at which the channel width doubles.
    std::vector<int> double_at = {2};
    int temporal_kernel = 5;
    PartitionStrategy partition = PartitionStrategy::distance;
    int input_dims = 3;
    bool confidence = false;
    int joints = 15;
    std::uint64_t seed = 1;

    int input_channels() const { return input_dims + (confidence ? 1 : 0); }
    std::vector<int> widths() const;
    void validate() const;

    /// Nine layers, 64 -> 128 -> 256 channels, temporal kernel 9.
    static ClassifierConfig full_scale();

    bool operator==(const ClassifierConfig&) const = default;
};

/// Row-normalised adjacency, one matrix per neighbour label.
struct PartitionedAdjacency {
    std::vector<ad::RowMatrix> matrices;

    int labels() const { return static_cast<int>(matrices.size()); }
};

PartitionedAdjacency build_partitioned_adjacency(const SkeletonTopology& topo, PartitionStrategy strategy);

struct GraphConvLayer {
    std::vector<ad::Value> spatial; // one (Cin, Cout) weight per label
    ad::Value spatial_bias;         // (Cout)
    ad::Value temporal;             // (K, Cout, Cout)
    ad::Value temporal_bias;        // (Cout)
};

struct ModelParams {
    std::vector<GraphConvLayer> layers;
    ad::Value fc_weight; // (C_final, classes)
    ad::Value fc_bias;   // (classes)

    /// Flat list in a fixed order (the checkpoint order).
    std::vector<ad::Value> all() const;
};

struct Classifier {
    ClassifierConfig config;
    SkeletonTopology topology;
    std::vector<ad::Value> adjacency;
    ModelParams params;
};

/// Fresh model with seeded uniform initialisation.
Classifier make_classifier(const ClassifierConfig& config, const SkeletonTopology& topo);
/// Deep copy; `trainable` sets requires-grad on every parameter.
Classifier clone(const Classifier& model, bool trainable);

/// (T, N, D[+1]) input tensor; confidence, when present, is the last channel.
ad::Value input_tensor(const SkeletonSequence& seq);
/// Stacks sequences of equal length into (B, T, N, C).
ad::Value batch_tensor(std::span<const SkeletonSequence* const> seqs);

/// Logits for (T, N, C) -> (classes) or (B, T, N, C) -> (B, classes).
ad::Value logits(const Classifier& model, const ad::Value& input);

/// Class probabilities for one sequence.
Eigen::VectorXd forward(const Classifier& model, const SkeletonSequence& seq);
int predict(const Classifier& model, const SkeletonSequence& seq);
std::vector<int> predict_batch(const Classifier& model, std::span<const SkeletonSequence* const> seqs);

/// Argmin of the probabilities, lowest index on ties. `exclude` (when >= 0)
/// is skipped, so a targeted attack never aims at the ground truth.
int least_likely_class(const Eigen::VectorXd& probabilities, int exclude = -1);
int least_likely_class(const Classifier& model, const SkeletonSequence& seq);

struct TrainOptions {
    int epochs = 60;
    int batch_size = 16;
    double learning_rate = 0.001;
    /// The learning rate is multiplied by `decay_factor` at each listed epoch.
    std::vector<int> decay_epochs;
    double decay_factor = 0.1;
    /// Stop after the first epoch whose mean loss is at or below this value.
    std::optional<double> target_loss = 0.1;
    std::uint64_t seed = 1;
};

struct EpochLog {
    int epoch = 0;
    double loss = 0.0;
    double accuracy = 0.0;
};

struct TrainingResult {
    Classifier model;
    std::vector<EpochLog> log;
};

TrainingResult train_classifier(const ClassifierConfig& config, const SkeletonTopology& topo,
                                const std::vector<LabeledSample>& samples, const TrainOptions& options);

double accuracy(const Classifier& model, const std::vector<LabeledSample>& samples);

} // namespace ciasa
