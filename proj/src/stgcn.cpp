#include "ciasa/stgcn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace ciasa {

using ad::Value;

std::string to_string(PartitionStrategy p) { return p == PartitionStrategy::uniform ? "uniform" : "distance"; }

PartitionStrategy parse_partition(const std::string& name) {
    if (name == "uniform") return PartitionStrategy::uniform;
    if (name == "distance") return PartitionStrategy::distance;
    throw std::invalid_argument("unknown partition strategy '" + name + "' (expected uniform or distance)");
}

std::vector<int> ClassifierConfig::widths() const {
    std::vector<int> w;
    int c = base_width;
    for (int l = 0; l < layers; ++l) {
        if (std::find(double_at.begin(), double_at.end(), l) != double_at.end()) c *= 2;
        w.push_back(c);
    }
    return w;
}

void ClassifierConfig::validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("classifier config: " + m); };
    if (classes < 2) fail("needs at least 2 classes");
    if (layers < 1) fail("needs at least 1 layer");
    if (base_width < 1) fail("base width must be positive");
    if (temporal_kernel < 1 || temporal_kernel % 2 == 0) fail("temporal kernel must be odd and >= 1");
    if (input_dims != 2 && input_dims != 3) fail("input dims must be 2 or 3");
    if (joints < 2) fail("needs at least 2 joints");
}

ClassifierConfig ClassifierConfig::full_scale() {
    ClassifierConfig c;
    c.layers = 9;
    c.base_width = 64;
    c.double_at = {3, 6};
    c.temporal_kernel = 9;
    return c;
}

PartitionedAdjacency build_partitioned_adjacency(const SkeletonTopology& topo, PartitionStrategy strategy) {
    const int n = topo.joints();
    ad::RowMatrix neighbours = ad::RowMatrix::Zero(n, n);
    for (const Bone& b : topo.bones()) {
        neighbours(b.parent, b.child) = 1.0;
        neighbours(b.child, b.parent) = 1.0;
    }
    auto normalise = [](ad::RowMatrix m) {
        for (Index r = 0; r < m.rows(); ++r) {
            const double s = m.row(r).sum();
            if (s > 0.0) m.row(r) /= s;
        }
        return m;
    };
    PartitionedAdjacency adj;
    switch (strategy) {
    case PartitionStrategy::uniform:
        adj.matrices.push_back(normalise(neighbours + ad::RowMatrix::Identity(n, n)));
        break;
    case PartitionStrategy::distance:
        adj.matrices.push_back(ad::RowMatrix::Identity(n, n));
        adj.matrices.push_back(normalise(neighbours));
        break;
    }
    return adj;
}

std::vector<Value> ModelParams::all() const {
    std::vector<Value> out;
    for (const auto& l : layers) {
        out.insert(out.end(), l.spatial.begin(), l.spatial.end());
        out.push_back(l.spatial_bias);
        out.push_back(l.temporal);
        out.push_back(l.temporal_bias);
    }
    out.push_back(fc_weight);
    out.push_back(fc_bias);
    return out;
}

namespace {

std::vector<Value> adjacency_values(const SkeletonTopology& topo, PartitionStrategy strategy) {
    std::vector<Value> out;
    for (const auto& m : build_partitioned_adjacency(topo, strategy).matrices) {
        out.push_back(Value::constant({m.rows(), m.cols()}, Eigen::Map<const ad::Array>(m.data(), m.size())));
    }
    return out;
}

} // namespace

Classifier make_classifier(const ClassifierConfig& config, const SkeletonTopology& topo) {
    config.validate();
    if (topo.joints() != config.joints) {
        throw std::invalid_argument("make_classifier: config expects " + std::to_string(config.joints) +
                                    " joints, topology has " + std::to_string(topo.joints()));
    }
    std::mt19937_64 rng(config.seed);
    auto uniform = [&rng](ad::Shape shape, double bound) {
        std::uniform_real_distribution<double> u(-bound, bound);
        ad::Array data(ad::numel(shape));
        for (Index i = 0; i < data.size(); ++i) data[i] = u(rng);
        return Value::parameter(std::move(shape), std::move(data));
    };

    Classifier model;
    model.config = config;
    model.topology = topo;
    model.adjacency = adjacency_values(topo, config.partition);
    const auto K = static_cast<Index>(model.adjacency.size());
    const Index G = config.temporal_kernel;
    Index cin = config.input_channels();
    for (int width : config.widths()) {
        const Index cout = width;
        GraphConvLayer layer;
        for (Index k = 0; k < K; ++k) layer.spatial.push_back(uniform({cin, cout}, std::sqrt(6.0 / static_cast<double>(cin * K))));
        layer.spatial_bias = Value::zeros({cout}, true);
        layer.temporal = uniform({G, cout, cout}, std::sqrt(6.0 / static_cast<double>(G * cout)));
        layer.temporal_bias = Value::zeros({cout}, true);
        model.params.layers.push_back(std::move(layer));
        cin = cout;
    }
    model.params.fc_weight = uniform({cin, config.classes}, std::sqrt(6.0 / static_cast<double>(cin + config.classes)));
    model.params.fc_bias = Value::zeros({config.classes}, true);
    return model;
}

Classifier clone(const Classifier& model, bool trainable) {
    Classifier out = model;
    auto copy = [trainable](const Value& v) {
        Value c = Value::constant(v.shape(), v.data());
        c.set_requires_grad(trainable);
        return c;
    };
    for (auto& l : out.params.layers) {
        for (auto& w : l.spatial) w = copy(w);
        l.spatial_bias = copy(l.spatial_bias);
        l.temporal = copy(l.temporal);
        l.temporal_bias = copy(l.temporal_bias);
    }
    out.params.fc_weight = copy(out.params.fc_weight);
    out.params.fc_bias = copy(out.params.fc_bias);
    return out;
}

ad::Value input_tensor(const SkeletonSequence& seq) {
    const Index T = seq.frames(), N = seq.joints(), D = seq.dims;
    if (!seq.has_confidence()) {
        return Value::constant({T, N, D}, Eigen::Map<const ad::Array>(seq.coords.data(), seq.coords.size()));
    }
    ad::Array data(T * N * (D + 1));
    for (Index t = 0; t < T; ++t) {
        for (Index j = 0; j < N; ++j) {
            const Index base = (t * N + j) * (D + 1);
            data.segment(base, D) = seq.joint(t, j).transpose();
            data[base + D] = (*seq.confidence)(t, j);
        }
    }
    return Value::constant({T, N, D + 1}, std::move(data));
}

ad::Value batch_tensor(std::span<const SkeletonSequence* const> seqs) {
    if (seqs.empty()) throw std::invalid_argument("batch_tensor: empty batch");
    const Value first = input_tensor(*seqs[0]);
    ad::Shape shape = first.shape();
    ad::Array data(first.size() * static_cast<Index>(seqs.size()));
    for (std::size_t b = 0; b < seqs.size(); ++b) {
        const Value v = b == 0 ? first : input_tensor(*seqs[b]);
        if (v.shape() != shape) {
            throw ad::ShapeError("batch_tensor: sample " + std::to_string(b) + " has shape " + ad::to_string(v.shape()) +
                                 ", expected " + ad::to_string(shape));
        }
        data.segment(static_cast<Index>(b) * v.size(), v.size()) = v.data();
    }
    shape.insert(shape.begin(), static_cast<Index>(seqs.size()));
    return Value::constant(std::move(shape), std::move(data));
}

ad::Value logits(const Classifier& model, const ad::Value& input) {
    const ClassifierConfig& cfg = model.config;
    const bool batched = input.rank() == 4;
    if (input.rank() != 3 && !batched) {
        throw ad::ShapeError("classifier: input must be (T,N,C) or (B,T,N,C), got " + ad::to_string(input.shape()));
    }
    if (input.dim(-2) != cfg.joints || input.dim(-1) != cfg.input_channels()) {
        throw ad::ShapeError("classifier: input " + ad::to_string(input.shape()) + " does not match " +
                             std::to_string(cfg.joints) + " joints x " + std::to_string(cfg.input_channels()) +
                             " channels");
    }
    const Index T = input.dim(-3);
    if (T < cfg.temporal_kernel) {
        throw ad::ShapeError("classifier: " + std::to_string(T) + " frames is shorter than the temporal kernel " +
                             std::to_string(cfg.temporal_kernel));
    }
    Value x = input;
    for (const auto& layer : model.params.layers) {
        Value s;
        for (std::size_t k = 0; k < layer.spatial.size(); ++k) {
            Value term = ad::matmul(model.adjacency[k], ad::matmul(x, layer.spatial[k]));
            s = k == 0 ? term : s + term;
        }
        s = s + layer.spatial_bias;
        x = ad::relu(ad::temporal_conv(s, layer.temporal) + layer.temporal_bias);
    }
    const Index C = x.dim(-1);
    const Index B = batched ? input.dim(0) : 1;
    Value pooled = ad::mean(ad::reshape(x, {B, x.size() / (B * C), C}), 1);
    Value out = ad::matmul(pooled, model.params.fc_weight) + model.params.fc_bias;
    return batched ? out : ad::reshape(out, {cfg.classes});
}

Eigen::VectorXd forward(const Classifier& model, const SkeletonSequence& seq) {
    const Value p = ad::softmax(logits(model, input_tensor(seq)));
    return p.data().matrix();
}

int predict(const Classifier& model, const SkeletonSequence& seq) {
    Eigen::Index best = 0;
    forward(model, seq).maxCoeff(&best);
    return static_cast<int>(best);
}

std::vector<int> predict_batch(const Classifier& model, std::span<const SkeletonSequence* const> seqs) {
    std::vector<int> out;
    constexpr std::size_t chunk = 64;
    for (std::size_t i = 0; i < seqs.size(); i += chunk) {
        const auto part = seqs.subspan(i, std::min(chunk, seqs.size() - i));
        const Value z = logits(model, batch_tensor(part));
        const Index C = z.dim(-1);
        for (std::size_t b = 0; b < part.size(); ++b) {
            Eigen::Index best = 0;
            z.data().segment(static_cast<Index>(b) * C, C).maxCoeff(&best);
            out.push_back(static_cast<int>(best));
        }
    }
    return out;
}

int least_likely_class(const Eigen::VectorXd& probabilities, int exclude) {
    Eigen::Index worst = -1;
    for (Eigen::Index i = 0; i < probabilities.size(); ++i) {
        if (i == exclude) continue;
        if (worst < 0 || probabilities[i] < probabilities[worst]) worst = i;
    }
    if (worst < 0) throw std::invalid_argument("least_likely_class: no eligible class");
    return static_cast<int>(worst);
}

int least_likely_class(const Classifier& model, const SkeletonSequence& seq) {
    return least_likely_class(forward(model, seq));
}

double accuracy(const Classifier& model, const std::vector<LabeledSample>& samples) {
    if (samples.empty()) return 0.0;
    std::vector<const SkeletonSequence*> seqs;
    for (const auto& s : samples) seqs.push_back(&s.sequence);
    const auto pred = predict_batch(model, seqs);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) hits += pred[i] == samples[i].label ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(samples.size());
}

TrainingResult train_classifier(const ClassifierConfig& config, const SkeletonTopology& topo,
                                const std::vector<LabeledSample>& samples, const TrainOptions& options) {
    if (samples.empty()) throw std::invalid_argument("train_classifier: empty dataset");
    for (const auto& s : samples) {
        if (s.label < 0 || s.label >= config.classes) {
            throw std::invalid_argument("train_classifier: sample " + s.id + " has label " + std::to_string(s.label) +
                                        " outside [0," + std::to_string(config.classes) + ")");
        }
    }
    if (options.batch_size < 1 || options.epochs < 0) throw std::invalid_argument("train_classifier: bad options");

    TrainingResult result{make_classifier(config, topo), {}};
    std::vector<Value> params = result.model.params.all();
    ad::AdamState adam = ad::make_adam_state(params, {.learning_rate = options.learning_rate});
    std::mt19937_64 rng(options.seed);
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const auto bs = static_cast<std::size_t>(options.batch_size);

    for (int epoch = 0; epoch < options.epochs; ++epoch) {
        if (std::find(options.decay_epochs.begin(), options.decay_epochs.end(), epoch) != options.decay_epochs.end()) {
            adam.options.learning_rate *= options.decay_factor;
        }
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        std::size_t hits = 0;
        for (std::size_t start = 0; start < order.size(); start += bs) {
            const std::size_t end = std::min(order.size(), start + bs);
            std::vector<const SkeletonSequence*> seqs;
            std::vector<int> labels;
            for (std::size_t i = start; i < end; ++i) {
                seqs.push_back(&samples[order[i]].sequence);
                labels.push_back(samples[order[i]].label);
            }
            const Value z = logits(result.model, batch_tensor(seqs));
            const Value loss = ad::cross_entropy(z, labels);
            ad::backward(loss);
            ad::adam_step(params, adam);
            loss_sum += loss.item() * static_cast<double>(labels.size());
            const Index C = z.dim(-1);
            for (std::size_t b = 0; b < labels.size(); ++b) {
                Eigen::Index best = 0;
                z.data().segment(static_cast<Index>(b) * C, C).maxCoeff(&best);
                hits += static_cast<int>(best) == labels[b] ? 1 : 0;
            }
        }
        const auto n = static_cast<double>(samples.size());
        result.log.push_back({epoch + 1, loss_sum / n, static_cast<double>(hits) / n});
        if (options.target_loss && loss_sum / n <= *options.target_loss) break;
    }
    return result;
}

} // namespace ciasa
