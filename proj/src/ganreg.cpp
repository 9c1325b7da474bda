#include "ciasa/ganreg.hpp"

#include <cmath>
#include <random>

namespace ciasa {

using ad::Value;

std::vector<Value> Discriminator::parameters() const {
    return {conv1_weight, conv1_bias, conv2_weight, conv2_bias, fc_weight, fc_bias};
}

Discriminator make_discriminator(int bones, std::uint64_t seed) {
    constexpr int k = kDiscriminatorKernel;
    constexpr int c = kDiscriminatorChannels;
    const int reduced = bones - 2 * (k - 1);
    if (reduced < 1) {
        throw std::invalid_argument("discriminator: feature maps of " + std::to_string(bones) + " bones are too small for two " +
                                    std::to_string(k) + "x" + std::to_string(k) + " convolutions");
    }
    std::mt19937_64 rng(seed);
    auto uniform = [&rng](ad::Shape shape, double bound) {
        std::uniform_real_distribution<double> u(-bound, bound);
        ad::Array data(ad::numel(shape));
        for (Index i = 0; i < data.size(); ++i) data[i] = u(rng);
        return Value::parameter(std::move(shape), std::move(data));
    };
    Discriminator d;
    d.bones = bones;
    d.conv1_weight = uniform({k, k, 1, c}, 1.0 / std::sqrt(k * k * 1.0));
    d.conv1_bias = Value::zeros({c}, true);
    d.conv2_weight = uniform({k, k, c, c}, 1.0 / std::sqrt(k * k * c * 1.0));
    d.conv2_bias = Value::zeros({c}, true);
    const Index flat = static_cast<Index>(reduced) * reduced * c;
    d.fc_weight = uniform({flat, 1}, 1.0 / std::sqrt(static_cast<double>(flat)));
    d.fc_bias = Value::zeros({1}, true);
    return d;
}

Value bone_angle_features(const Value& coords, const SkeletonTopology& topo) {
    if (coords.rank() != 3 || coords.dim(1) != topo.joints()) {
        throw ad::ShapeError("bone_angle_features: expected (T," + std::to_string(topo.joints()) + ",D), got " +
                             ad::to_string(coords.shape()));
    }
    const auto& major = topo.major_bones();
    const auto H = static_cast<Index>(major.size());
    if (H < 2) throw SkeletonError("bone_angle_features: needs at least 2 major bones");
    // Signed incidence: row a picks child - parent of major bone a.
    ad::Array incidence = ad::Array::Zero(H * topo.joints());
    for (Index a = 0; a < H; ++a) {
        const Bone& b = topo.bones()[static_cast<std::size_t>(major[static_cast<std::size_t>(a)])];
        incidence[a * topo.joints() + b.child] = 1.0;
        incidence[a * topo.joints() + b.parent] = -1.0;
    }
    const Index T = coords.dim(0);
    const Value select = Value::constant({H, static_cast<Index>(topo.joints())}, std::move(incidence));
    const Value vectors = ad::matmul(select, coords); // (T, H, D)
    const Value norms = ad::reshape(ad::l2_norm(vectors, -1), {T, H, 1});
    const Value units = vectors / norms;
    return ad::reshape(ad::matmul(units, ad::transpose(units)), {T, H, H, 1});
}

Value bone_angle_features(const SkeletonSequence& seq, const SkeletonTopology& topo) {
    const auto H = static_cast<Index>(topo.major_bones().size());
    const Index T = seq.frames();
    ad::Array data(T * H * H);
    for (Index t = 0; t < T; ++t) {
        const Eigen::MatrixXd x = bone_angle_feature_map(seq, t, topo);
        // Symmetric, so storage order does not matter.
        data.segment(t * H * H, H * H) = Eigen::Map<const ad::Array>(x.data(), H * H);
    }
    return Value::constant({T, H, H, 1}, std::move(data));
}

Value discriminate(const Discriminator& d, const Value& features) {
    const Index H = d.bones;
    Value x = features;
    if (x.rank() == 2) x = ad::reshape(x, {1, x.dim(0), x.dim(1), 1});
    if (x.rank() == 3) x = ad::reshape(x, {x.dim(0), x.dim(1), x.dim(2), 1});
    if (x.rank() != 4 || x.dim(1) != H || x.dim(2) != H || x.dim(3) != 1) {
        throw ad::ShapeError("discriminate: expected feature maps of " + std::to_string(H) + "x" + std::to_string(H) +
                             ", got " + ad::to_string(features.shape()));
    }
    const Index B = x.dim(0);
    Value h = ad::relu(ad::conv2d(x, d.conv1_weight) + d.conv1_bias);
    h = ad::relu(ad::conv2d(h, d.conv2_weight) + d.conv2_bias);
    h = ad::reshape(h, {B, h.size() / B});
    return ad::reshape(ad::sigmoid(ad::matmul(h, d.fc_weight) + d.fc_bias), {B});
}

Value attacker_adv_loss(const Discriminator& d, const Value& perturbed) {
    return ad::mean(ad::square(discriminate(d, perturbed) - 1.0));
}

Value discriminator_adv_loss(const Discriminator& d, const Value& real, const Value& perturbed) {
    return ad::mean(ad::square(discriminate(d, real) - 1.0)) + ad::mean(ad::square(discriminate(d, perturbed)));
}

} // namespace ciasa
