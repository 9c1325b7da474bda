#pragma once

// Least-squares GAN regulariser over per-frame bone-angle feature maps.

#include "ciasa/diffcore.hpp"
#include "ciasa/skeleton.hpp"

#include <cstdint>
#include <vector>

namespace ciasa {

/// conv3x3(1->32) -> relu -> conv3x3(32->32) -> relu -> fc -> sigmoid,
/// convolutions unpadded with stride 1.
struct Discriminator {
    int bones = 0; // H: feature maps are H x H
    ad::Value conv1_weight, conv1_bias;
    ad::Value conv2_weight, conv2_bias;
    ad::Value fc_weight, fc_bias;

    std::vector<ad::Value> parameters() const;
};

inline constexpr int kDiscriminatorChannels = 32;
inline constexpr int kDiscriminatorKernel = 3;

/// Seeded small-uniform initialisation. Needs H >= 5 so both convolutions fit.
Discriminator make_discriminator(int bones, std::uint64_t seed);

/// Differentiable feature maps of a (T, N, D) coordinate tensor:
/// (T, H, H, 1) cosines between the topology's major bones.
ad::Value bone_angle_features(const ad::Value& coords, const SkeletonTopology& topo);

/// Same maps computed directly from a sequence, as a constant.
ad::Value bone_angle_features(const SkeletonSequence& seq, const SkeletonTopology& topo);

/// Probability that each map is real: (B, H, H, 1) or (H, H) -> (B).
ad::Value discriminate(const Discriminator& d, const ad::Value& features);

/// Frame-averaged (D(X') - 1)^2. Both losses take feature maps.
ad::Value attacker_adv_loss(const Discriminator& d, const ad::Value& perturbed);

/// Frame-averaged (D(X~) - 1)^2 + D(X')^2.
ad::Value discriminator_adv_loss(const Discriminator& d, const ad::Value& real, const ad::Value& perturbed);

} // namespace ciasa
