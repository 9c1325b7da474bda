#include "ciasa/attacks.hpp"

#include "text_util.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>

namespace ciasa {

using ad::Value;

std::string to_string(AttackMode mode) {
    switch (mode) {
    case AttackMode::basic: return "basic";
    case AttackMode::localized: return "localized";
    case AttackMode::advanced: return "advanced";
    }
    return "basic";
}

AttackMode parse_attack_mode(const std::string& name) {
    if (name == "basic") return AttackMode::basic;
    if (name == "localized") return AttackMode::localized;
    if (name == "advanced") return AttackMode::advanced;
    throw std::invalid_argument("unknown attack mode '" + name + "' (expected basic, localized or advanced)");
}

ClipSpec ClipSpec::global(double epsilon) {
    ClipSpec c;
    c.kind = Kind::global;
    c.epsilon = epsilon;
    return c;
}

ClipSpec ClipSpec::hierarchical(Eigen::VectorXd per_joint) {
    ClipSpec c;
    c.kind = Kind::hierarchical;
    c.per_joint = std::move(per_joint);
    c.epsilon = c.per_joint.size() ? c.per_joint.maxCoeff() : 0.0;
    return c;
}

void ClipSpec::validate(int joints) const {
    if (kind == Kind::global) {
        if (!(epsilon >= 0.0)) throw std::invalid_argument("clip: epsilon must be >= 0");
        return;
    }
    if (per_joint.size() != joints) {
        throw std::invalid_argument("clip: hierarchical schedule has " + std::to_string(per_joint.size()) +
                                    " entries for " + std::to_string(joints) + " joints");
    }
    if (!(per_joint.array() >= 0.0).all()) throw std::invalid_argument("clip: epsilon values must be >= 0");
}

ClipSpec parse_clip_schedule(const std::string& schedule, const SkeletonTopology& topo) {
    Eigen::VectorXd eps = Eigen::VectorXd::Zero(topo.joints());
    std::string_view rest(schedule);
    while (!rest.empty()) {
        const auto comma = rest.find(',');
        const auto item = text::trim(rest.substr(0, comma));
        rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
        if (item.empty()) continue;
        const auto colon = item.find(':');
        double value = 0.0;
        if (colon == std::string_view::npos || !text::parse_number(text::trim(item.substr(colon + 1)), value)) {
            throw std::invalid_argument("clip schedule: expected '<joints>:<epsilon>', got '" + std::string(item) + "'");
        }
        if (!(value >= 0.0)) throw std::invalid_argument("clip schedule: negative epsilon in '" + std::string(item) + "'");
        for (int j : topo.resolve(std::string(text::trim(item.substr(0, colon))))) eps[j] = value;
    }
    return ClipSpec::hierarchical(std::move(eps));
}

ClipSpec incremental_schedule(const SkeletonTopology& topo, const std::vector<bool>& active,
                              const std::vector<double>& steps) {
    if (steps.empty()) throw std::invalid_argument("incremental_schedule: no steps");
    const int n = topo.joints();
    std::vector<int> level(static_cast<std::size_t>(n), -1);
    Eigen::VectorXd eps = Eigen::VectorXd::Zero(n);
    for (int j : topo.order()) {
        if (!active[static_cast<std::size_t>(j)]) continue;
        const int p = topo.parent(j);
        const int lvl = (p >= 0 && active[static_cast<std::size_t>(p)]) ? level[static_cast<std::size_t>(p)] + 1 : 0;
        level[static_cast<std::size_t>(j)] = lvl;
        eps[j] = steps[std::min(static_cast<std::size_t>(lvl), steps.size() - 1)];
    }
    return ClipSpec::hierarchical(std::move(eps));
}

std::vector<bool> parse_joint_mask(const std::string& spec, const SkeletonTopology& topo) {
    std::vector<bool> mask(static_cast<std::size_t>(topo.joints()), false);
    if (text::trim(spec) == "all") return std::vector<bool>(mask.size(), true);
    std::string_view rest(spec);
    while (!rest.empty()) {
        const auto comma = rest.find(',');
        const auto item = text::trim(rest.substr(0, comma));
        rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
        if (item.empty()) continue;
        for (int j : topo.resolve(std::string(item))) mask[static_cast<std::size_t>(j)] = true;
    }
    return mask;
}

std::vector<bool> AttackConfig::resolved_joints(int joints) const {
    return active_joints.empty() ? std::vector<bool>(static_cast<std::size_t>(joints), true) : active_joints;
}

void AttackConfig::validate(const SkeletonTopology& topo) const {
    const int n = topo.joints();
    clip.validate(n);
    if (!active_joints.empty() && static_cast<int>(active_joints.size()) != n) {
        throw std::invalid_argument("attack config: joint mask has " + std::to_string(active_joints.size()) +
                                    " entries for " + std::to_string(n) + " joints");
    }
    const auto joints = resolved_joints(n);
    const auto count = std::count(joints.begin(), joints.end(), true);
    if (mode == AttackMode::basic && count != n) {
        throw std::invalid_argument("attack config: basic mode perturbs every joint; use localized for a subset");
    }
    if (mode != AttackMode::basic && (count == 0 || count == n)) {
        throw std::invalid_argument("attack config: " + to_string(mode) + " mode needs a non-empty proper joint subset");
    }
    if (mode == AttackMode::advanced && clip.kind != ClipSpec::Kind::hierarchical) {
        throw std::invalid_argument("attack config: advanced mode needs hierarchical clipping");
    }
    if (!(lambda >= 0.0)) throw std::invalid_argument("attack config: lambda must be >= 0");
    if (!(alpha > 0.0)) throw std::invalid_argument("attack config: alpha must be > 0");
    if (max_iterations < 0) throw std::invalid_argument("attack config: max_iterations must be >= 0");
    if (target_policy == TargetPolicy::explicit_class && target_class < 0) {
        throw std::invalid_argument("attack config: explicit target needs a class index");
    }
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    // splitmix64 finaliser
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------

RealSampleProvider::RealSampleProvider(const std::vector<LabeledSample>& pool, const SkeletonTopology& topo) {
    if (pool.empty()) throw std::invalid_argument("real sample provider: empty pool");
    for (const auto& s : pool) {
        ids_.push_back(s.id);
        features_.push_back(bone_angle_features(s.sequence, topo));
    }
}

std::size_t RealSampleProvider::draw(std::mt19937_64& rng, const std::string& exclude_id) const {
    if (ids_.size() == 1) return 0;
    const auto excluded = std::find(ids_.begin(), ids_.end(), exclude_id);
    const std::size_t n = ids_.size() - (excluded == ids_.end() ? 0 : 1);
    std::size_t k = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    if (excluded != ids_.end() && k >= static_cast<std::size_t>(excluded - ids_.begin())) ++k;
    return k;
}

// ---------------------------------------------------------------------------

Value smoothness_loss(const Value& coords) {
    const Index T = coords.dim(0);
    if (T < 3) {
        std::cerr << "warning: smoothness loss needs at least 3 frames; using 0\n";
        return Value::constant(0.0);
    }
    const Value accel = ad::slice(coords, 0, 2, T) + ad::slice(coords, 0, 0, T - 2) - 2.0 * ad::slice(coords, 0, 1, T - 1);
    return ad::sum(ad::square(accel)) * (1.0 / static_cast<double>(T - 1));
}

double smoothness_loss(const SkeletonSequence& seq) {
    const Index T = seq.frames();
    if (T < 3) {
        std::cerr << "warning: smoothness loss needs at least 3 frames; using 0\n";
        return 0.0;
    }
    return acceleration_field(seq).squaredNorm() / static_cast<double>(T - 1);
}

Value ciasa_total_loss(const Value& prediction, const Value& smoothness, const Value& adversarial, double lambda) {
    return prediction + lambda * (smoothness + adversarial);
}

double ciasa_total_loss(double prediction, double smoothness, double adversarial, double lambda) {
    return prediction + lambda * (smoothness + adversarial);
}

namespace {

// Per-coordinate eligibility (1/0) and bound, laid out like seq.coords.
struct CoordinateMask {
    ad::Array eligible;
    ad::Array bound;
};

CoordinateMask coordinate_mask(const SkeletonSequence& seq, const ClipSpec& clip, const std::vector<bool>& joints,
                               const std::vector<bool>& channels) {
    const Index T = seq.frames(), N = seq.joints(), D = seq.dims;
    CoordinateMask m{ad::Array::Zero(T * N * D), ad::Array::Zero(T * N * D)};
    for (Index j = 0; j < N; ++j) {
        const bool joint_on = joints.empty() || joints[static_cast<std::size_t>(j)];
        for (Index a = 0; a < D; ++a) {
            const bool axis_on = channels.empty() || static_cast<std::size_t>(a) >= channels.size() ||
                                 channels[static_cast<std::size_t>(a)];
            if (!(joint_on && axis_on)) continue;
            for (Index t = 0; t < T; ++t) {
                m.eligible[(t * N + j) * D + a] = 1.0;
                m.bound[(t * N + j) * D + a] = clip.bound(static_cast<int>(j));
            }
        }
    }
    return m;
}

// clean +/- bound can round outward; pull it in so the measured |v - clean|
// never exceeds the bound.
double exact_limit(double clean, double bound, double direction) {
    double x = clean + direction * bound;
    while (std::abs(x - clean) > bound) x = std::nextafter(x, clean);
    return x;
}

void clip_in_place(double* v, const double* clean, const CoordinateMask& m) {
    for (Index i = 0; i < m.eligible.size(); ++i) {
        if (!(m.eligible[i] > 0.0)) {
            v[i] = clean[i];
        } else if (v[i] > clean[i] + m.bound[i] || v[i] < clean[i] - m.bound[i] || std::abs(v[i] - clean[i]) > m.bound[i]) {
            const double dir = v[i] > clean[i] ? 1.0 : -1.0;
            v[i] = exact_limit(clean[i], m.bound[i], dir);
        }
    }
}

double max_abs_diff(const SkeletonSequence& a, const SkeletonSequence& b) {
    return a.coords.size() ? (a.coords - b.coords).cwiseAbs().maxCoeff() : 0.0;
}

void check_sample(const Classifier& model, const SkeletonSequence& seq, const char* op) {
    detail::check_against(seq, model.topology, op);
    if (seq.dims != model.config.input_dims || seq.has_confidence() != model.config.confidence) {
        throw std::invalid_argument(std::string(op) + ": sequence layout does not match the classifier input");
    }
}

} // namespace

SkeletonSequence clip_perturbation(const SkeletonSequence& perturbed, const SkeletonSequence& clean,
                                   const ClipSpec& clip, const std::vector<bool>& active_joints,
                                   const std::vector<bool>& channels) {
    if (perturbed.coords.rows() != clean.coords.rows() || perturbed.coords.cols() != clean.coords.cols() ||
        perturbed.dims != clean.dims) {
        throw std::invalid_argument("clip_perturbation: shape mismatch");
    }
    clip.validate(static_cast<int>(clean.joints()));
    SkeletonSequence out = perturbed;
    const CoordinateMask m = coordinate_mask(clean, clip, active_joints, channels);
    clip_in_place(out.coords.data(), clean.coords.data(), m);
    out.confidence = clean.confidence;
    return out;
}

SkeletonSequence fgsm_step(const Classifier& model, const SkeletonSequence& clean, double epsilon,
                           const FgsmDirection& direction, const std::vector<bool>& active_joints,
                           const std::vector<bool>& channels) {
    check_sample(model, clean, "fgsm_step");
    if (!(epsilon >= 0.0)) throw std::invalid_argument("fgsm_step: epsilon must be >= 0");
    if (direction.label < 0 || direction.label >= model.config.classes) {
        throw std::out_of_range("fgsm_step: class " + std::to_string(direction.label) + " outside [0," +
                                std::to_string(model.config.classes) + ")");
    }
    const Classifier net = clone(model, false);
    const Index T = clean.frames(), N = clean.joints(), D = clean.dims;
    Value coords = Value::parameter({T, N, D}, Eigen::Map<const ad::Array>(clean.coords.data(), clean.coords.size()));
    Value input = coords;
    if (clean.has_confidence()) {
        const Value conf = Value::constant({T, N, 1}, Eigen::Map<const ad::Array>(clean.confidence->data(), T * N));
        const Value parts[] = {coords, conf};
        input = ad::concat(parts, -1);
    }
    ad::backward(ad::cross_entropy(logits(net, input), direction.label));

    const CoordinateMask m = coordinate_mask(clean, ClipSpec::global(epsilon), active_joints, channels);
    const double sign = direction.targeted ? -1.0 : 1.0;
    SkeletonSequence out = clean;
    const ad::Array& g = coords.grad();
    for (Index i = 0; i < g.size(); ++i) {
        if (m.eligible[i] > 0.0 && g[i] != 0.0) out.coords.data()[i] += sign * epsilon * (g[i] > 0.0 ? 1.0 : -1.0);
    }
    return out;
}

SkeletonSequence random_perturbation(const SkeletonSequence& clean, const ClipSpec& clip,
                                     const std::vector<bool>& active_joints, const std::vector<bool>& channels,
                                     std::mt19937_64& rng) {
    const CoordinateMask m = coordinate_mask(clean, clip, active_joints, channels);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    SkeletonSequence out = clean;
    for (Index i = 0; i < m.eligible.size(); ++i) {
        if (m.eligible[i] > 0.0) out.coords.data()[i] += m.bound[i] * u(rng);
    }
    clip_in_place(out.coords.data(), clean.coords.data(), m);
    return out;
}

AttackResult ciasa_attack(const Classifier& model, const LabeledSample& sample, const AttackConfig& config,
                          const RealSampleProvider* real, const IterationObserver& observer) {
    const SkeletonSequence& clean = sample.sequence;
    const SkeletonTopology& topo = model.topology;
    check_sample(model, clean, "ciasa_attack");
    config.validate(topo);
    if (clean.frames() < 3) throw std::invalid_argument("ciasa_attack: needs at least 3 frames");
    if (config.gan && real == nullptr) throw std::invalid_argument("ciasa_attack: GAN regularisation needs real samples");

    const Classifier net = clone(model, false);
    AttackResult result;
    result.ground_truth = sample.label;
    const Eigen::VectorXd clean_probs = forward(net, clean);
    clean_probs.maxCoeff(&result.clean_prediction);
    result.target = config.target_policy == TargetPolicy::least_likely ? least_likely_class(clean_probs, sample.label)
                                                                             : config.target_class;
    if (result.target < 0 || result.target >= net.config.classes) {
        throw std::out_of_range("ciasa_attack: target class " + std::to_string(result.target) + " out of range");
    }
    if (result.target == sample.label) {
        throw std::invalid_argument("ciasa_attack: target class equals the ground truth of " + sample.id);
    }

    const Index T = clean.frames(), N = clean.joints(), D = clean.dims;
    const BoneLengthTable clean_lengths = bone_lengths(clean, topo);
    const std::vector<bool> joints = config.resolved_joints(topo.joints());
    const CoordinateMask mask = coordinate_mask(clean, config.clip, joints, config.channels);
    // Realignment must not drag joints outside the attack region along.
    const bool partial = std::find(joints.begin(), joints.end(), false) != joints.end();
    const std::vector<bool> movable = partial ? joints : std::vector<bool>{};

    Value coords = Value::parameter({T, N, D}, Eigen::Map<const ad::Array>(clean.coords.data(), clean.coords.size()));
    Value confidence;
    if (clean.has_confidence()) {
        confidence = Value::constant({T, N, 1}, Eigen::Map<const ad::Array>(clean.confidence->data(), T * N));
    }

    std::vector<Value> params = {coords};
    Discriminator disc;
    if (config.gan) {
        disc = make_discriminator(static_cast<int>(topo.major_bones().size()), derive_seed(config.seed, 1));
        for (const Value& w : disc.parameters()) params.push_back(w);
    }
    ad::AdamState adam = ad::make_adam_state(params, {.learning_rate = config.alpha});
    std::mt19937_64 rng(derive_seed(config.seed, 2));

    SkeletonSequence current = clean;
    SkeletonSequence clipped = clean;
    const Value zero = Value::constant(0.0);

    for (int it = 0; it < config.max_iterations; ++it) {
        Value input = coords;
        if (confidence.defined()) {
            const Value parts[] = {coords, confidence};
            input = ad::concat(parts, -1);
        }
        const Value z = logits(net, input);
        if (config.early_stop) {
            const ad::Array p = ad::softmax(z).data();
            if (p[result.target] >= *config.early_stop) {
                result.status = "early stop";
                break;
            }
        }
        const Value l_pred = ad::cross_entropy(z, result.target);
        const Value l_smooth = config.smoothness ? smoothness_loss(coords) : zero;
        Value l_adv = zero;
        if (config.gan) {
            // D(X') appears in both the attacker and discriminator terms; score it once.
            const Value fake = discriminate(disc, bone_angle_features(coords, topo));
            const Value real_scores = discriminate(disc, real->features(real->draw(rng, sample.id)));
            l_adv = ad::mean(ad::square(fake - 1.0)) + ad::mean(ad::square(real_scores - 1.0)) + ad::mean(ad::square(fake));
        }
        const Value total = ciasa_total_loss(l_pred, l_smooth, l_adv, config.lambda);

        result.trace.prediction.push_back(l_pred.item());
        result.trace.smoothness.push_back(l_smooth.item());
        result.trace.adversarial.push_back(l_adv.item());
        result.trace.total.push_back(total.item());
        if (!std::isfinite(total.item())) {
            result.status = "aborted: non-finite loss at iteration " + std::to_string(it);
            break;
        }

        ad::backward(total);
        coords.grad() *= mask.eligible;
        ad::adam_step(params, adam);

        double* v = coords.data().data();
        clip_in_place(v, clean.coords.data(), mask);
        std::copy_n(v, clipped.coords.size(), clipped.coords.data());
        result.constraints.max_displacement_pre_ssr =
            std::max(result.constraints.max_displacement_pre_ssr, max_abs_diff(clipped, clean));

        current = config.ssr ? ssr_realign(clipped, clean, clean_lengths, topo, movable) : clipped;
        std::copy_n(current.coords.data(), current.coords.size(), v);
        ++result.iterations;
        if (observer) observer({it, clipped, current});
    }

    result.perturbed = current;
    const Eigen::VectorXd probs = forward(net, current);
    Eigen::Index best = 0;
    probs.maxCoeff(&best);
    result.predicted = static_cast<int>(best);
    result.confidence = probs[best];
    result.success = result.predicted == result.target;

    ConstraintReport& c = result.constraints;
    c.max_displacement_post_ssr = max_abs_diff(current, clean);
    const ad::Array diff = Eigen::Map<const ad::Array>(current.coords.data(), current.coords.size()) -
                           Eigen::Map<const ad::Array>(clean.coords.data(), clean.coords.size());
    c.max_epsilon_excess = 0.0;
    for (Index i = 0; i < diff.size(); ++i) {
        const double excess = std::abs(diff[i]) - (mask.eligible[i] > 0.0 ? mask.bound[i] : 0.0);
        c.max_epsilon_excess = std::max(c.max_epsilon_excess, excess);
    }
    const BoneLengthTable final_lengths = bone_lengths(current, topo);
    c.max_bone_drift = (final_lengths.lengths - clean_lengths.lengths).cwiseAbs().maxCoeff();
    return result;
}

} // namespace ciasa
