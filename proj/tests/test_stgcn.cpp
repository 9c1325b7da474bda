#include "ciasa/stgcn.hpp"

#include <doctest.h>

using namespace ciasa;

namespace {

ClassifierConfig tiny_config(int classes = 5) {
    ClassifierConfig c;
    c.classes = classes;
    c.layers = 2;
    c.base_width = 6;
    c.double_at = {1};
    c.temporal_kernel = 3;
    return c;
}

LabeledDataset toy_data(int classes, int train, int test, std::uint64_t seed = 3) {
    auto suite = default_motion_suite();
    suite.resize(static_cast<std::size_t>(classes));
    GenerationOptions o;
    o.frames = 12;
    o.train_per_class = train;
    o.test_per_class = test;
    o.seed = seed;
    return generate_dataset(humanoid15_rest_pose(), suite, o);
}

} // namespace

TEST_SUITE("stgcn") {

TEST_CASE("partitioned adjacency") {
    const SkeletonTopology topo = humanoid15();
    const auto dist = build_partitioned_adjacency(topo, PartitionStrategy::distance);
    REQUIRE(dist.labels() == 2);
    CHECK(dist.matrices[0].isApprox(ad::RowMatrix::Identity(15, 15)));
    for (Index r = 0; r < 15; ++r) CHECK(dist.matrices[1].row(r).sum() == doctest::Approx(1.0));
    // The neck has three neighbours: torso, head and both shoulders.
    CHECK(dist.matrices[1](1, 0) == doctest::Approx(0.25));
    CHECK(dist.matrices[1](1, 1) == 0.0);

    const auto uni = build_partitioned_adjacency(topo, PartitionStrategy::uniform);
    REQUIRE(uni.labels() == 1);
    for (Index r = 0; r < 15; ++r) {
        CHECK(uni.matrices[0].row(r).sum() == doctest::Approx(1.0));
        CHECK(uni.matrices[0](r, r) > 0.0);
    }
    CHECK(parse_partition(to_string(PartitionStrategy::uniform)) == PartitionStrategy::uniform);
    CHECK_THROWS_AS(parse_partition("spatial"), std::invalid_argument);
}

TEST_CASE("config validation") {
    CHECK_NOTHROW(tiny_config().validate());
    CHECK_NOTHROW(ClassifierConfig::full_scale().validate());
    CHECK(ClassifierConfig::full_scale().widths().back() == 256);
    auto bad = tiny_config();
    bad.classes = 1;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = tiny_config();
    bad.temporal_kernel = 4;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = tiny_config();
    bad.input_dims = 4;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    auto wrong_joints = tiny_config();
    wrong_joints.joints = 16;
    CHECK_THROWS_AS(make_classifier(wrong_joints, humanoid15()), std::invalid_argument);
}

TEST_CASE("forward produces a distribution") {
    const auto data = toy_data(5, 1, 1);
    const Classifier m = make_classifier(tiny_config(), data.topology);
    for (const auto& s : data.train) {
        const Eigen::VectorXd p = forward(m, s.sequence);
        REQUIRE(p.size() == 5);
        CHECK(p.sum() == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(p.minCoeff() > 0.0);
        CHECK(predict(m, s.sequence) == static_cast<int>(std::distance(p.data(), std::max_element(p.data(), p.data() + 5))));
    }
}

TEST_CASE("zero output layer gives a uniform distribution") {
    const auto data = toy_data(5, 1, 0);
    Classifier m = make_classifier(tiny_config(), data.topology);
    m.params.fc_weight.data().setZero();
    m.params.fc_bias.data().setZero();
    const Eigen::VectorXd p = forward(m, data.train[0].sequence);
    for (Index k = 0; k < 5; ++k) CHECK(p[k] == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("sequences shorter than the temporal kernel are rejected") {
    const Classifier m = make_classifier(tiny_config(), humanoid15());
    CHECK_THROWS_AS(forward(m, SkeletonSequence(2, 15, 3)), ad::ShapeError);
    CHECK_NOTHROW(forward(m, SkeletonSequence(3, 15, 3)));
    CHECK_THROWS_AS(forward(m, SkeletonSequence(8, 14, 3)), ad::ShapeError);
}

TEST_CASE("batched and single forward agree") {
    const auto data = toy_data(5, 2, 0);
    const Classifier m = make_classifier(tiny_config(), data.topology);
    std::vector<const SkeletonSequence*> seqs;
    for (const auto& s : data.train) seqs.push_back(&s.sequence);
    const ad::Value batch = logits(m, batch_tensor(seqs));
    REQUIRE(batch.shape() == ad::Shape{10, 5});
    const auto preds = predict_batch(m, seqs);
    for (std::size_t b = 0; b < seqs.size(); ++b) {
        const ad::Value one = logits(m, input_tensor(*seqs[b]));
        for (Index k = 0; k < 5; ++k) CHECK(batch.data()[static_cast<Index>(b) * 5 + k] == doctest::Approx(one.data()[k]).epsilon(1e-12));
        CHECK(preds[b] == predict(m, *seqs[b]));
    }
}

TEST_CASE("permuting output units permutes the prediction") {
    const auto data = toy_data(3, 1, 0);
    const Classifier m = make_classifier(tiny_config(3), data.topology);
    Classifier p = clone(m, false);
    // Swap classes 0 and 2.
    const Index C = m.params.fc_weight.dim(0);
    for (Index c = 0; c < C; ++c) std::swap(p.params.fc_weight.data()[c * 3], p.params.fc_weight.data()[c * 3 + 2]);
    std::swap(p.params.fc_bias.data()[0], p.params.fc_bias.data()[2]);
    const Eigen::VectorXd a = forward(m, data.train[0].sequence);
    const Eigen::VectorXd b = forward(p, data.train[0].sequence);
    CHECK(a[0] == doctest::Approx(b[2]).epsilon(1e-12));
    CHECK(a[1] == doctest::Approx(b[1]).epsilon(1e-12));
    CHECK(a[2] == doctest::Approx(b[0]).epsilon(1e-12));
}

TEST_CASE("clone is deep") {
    const Classifier m = make_classifier(tiny_config(), humanoid15());
    Classifier c = clone(m, true);
    c.params.fc_bias.data()[0] += 1.0;
    CHECK(m.params.fc_bias.data()[0] != c.params.fc_bias.data()[0]);
    CHECK(c.params.fc_bias.requires_grad());
}

TEST_CASE("least likely class") {
    Eigen::VectorXd p(4);
    p << 0.4, 0.1, 0.3, 0.2;
    CHECK(least_likely_class(p) == 1);
    p << 0.25, 0.25, 0.25, 0.25;
    CHECK(least_likely_class(p) == 0);
    p << 0.5, 0.2, 0.1, 0.1;
    CHECK(least_likely_class(p) == 2);
    CHECK(least_likely_class(p, 2) == 3);
    p << 0.1, 0.2, 0.3, 0.4;
    CHECK(least_likely_class(p, 0) == 1);
    Eigen::VectorXd single(1);
    single << 1.0;
    CHECK_THROWS_AS(least_likely_class(single, 0), std::invalid_argument);
}

TEST_CASE("repeated steps on one sample reduce its loss") {
    const auto data = toy_data(2, 1, 0);
    TrainOptions o;
    o.batch_size = 1;
    o.learning_rate = 0.01;
    o.target_loss.reset();
    o.epochs = 10;
    const std::vector<LabeledSample> one{data.train[0]};
    const auto r = train_classifier(tiny_config(2), data.topology, one, o);
    REQUIRE(r.log.size() == 10);
    for (std::size_t e = 1; e < r.log.size(); ++e) CHECK(r.log[e].loss <= r.log[e - 1].loss + 1e-12);
    CHECK(r.log.back().loss < r.log.front().loss);
}

TEST_CASE("two-class toy problem is learned, deterministically") {
    const auto data = toy_data(2, 10, 5);
    TrainOptions o;
    o.batch_size = 4;
    o.learning_rate = 0.01;
    o.epochs = 30;
    const auto a = train_classifier(tiny_config(2), data.topology, data.train, o);
    CHECK(accuracy(a.model, data.train) == 1.0);
    CHECK(accuracy(a.model, data.test) == 1.0);
    const auto b = train_classifier(tiny_config(2), data.topology, data.train, o);
    REQUIRE(a.log.size() == b.log.size());
    CHECK(a.log.back().loss == b.log.back().loss);
    const auto pa = a.model.params.all();
    const auto pb = b.model.params.all();
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK((pa[i].data() == pb[i].data()).all());
}

TEST_CASE("training rejects bad labels") {
    auto data = toy_data(2, 1, 0);
    data.train[0].label = 7;
    CHECK_THROWS_AS(train_classifier(tiny_config(2), data.topology, data.train, {}), std::invalid_argument);
    CHECK_THROWS_AS(train_classifier(tiny_config(2), data.topology, {}, {}), std::invalid_argument);
}

} // TEST_SUITE
