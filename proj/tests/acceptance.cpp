// Acceptance suite: one PASS/FAIL line per top-level criterion. Tolerances and
// budgets are fixed here; the process exits non-zero if any criterion fails.

#include "ciasa/harness.hpp"

#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

using namespace ciasa;
namespace fs = std::filesystem;

namespace {

constexpr double kGradTolerance = 1e-4;
constexpr double kGradBudgetSeconds = 60.0;
constexpr double kGeometryTolerance = 1e-9;
constexpr double kSsrBudgetSeconds = 60.0;
constexpr int kSsrTrials = 1000;
constexpr double kSmoothTolerance = 1e-12;
constexpr double kTrainAccuracy = 0.95;
constexpr double kTrainBudgetSeconds = 600.0;
constexpr double kTargetedRate = 90.0;
constexpr double kEndToEndBudgetSeconds = 1800.0;
constexpr double kLocalizedRate = 50.0;
constexpr double kTransferMargin = 20.0;
constexpr int kAttackSamples = 100;
constexpr int kAblationSamples = 50;
constexpr int kRegionSamples = 10;
constexpr int kTraceIterations = 50;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(const std::string& name, bool pass, const std::string& detail) {
    if (!pass) ++failures;
    std::cout << (pass ? "PASS " : "FAIL ") << name << ": " << detail << std::endl;
}

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

std::vector<LabeledSample> first(const std::vector<LabeledSample>& v, std::size_t n) {
    return {v.begin(), v.begin() + static_cast<std::ptrdiff_t>(std::min(n, v.size()))};
}

ClassifierConfig model_config(std::uint64_t seed) {
    ClassifierConfig c;
    c.seed = seed;
    return c;
}

TrainOptions train_options(std::uint64_t seed) {
    TrainOptions o;
    o.seed = seed;
    return o;
}

AttackConfig basic_attack(double eps) {
    AttackConfig c;
    c.clip = ClipSpec::global(eps);
    c.max_iterations = 400;
    c.lambda = 10.0;
    c.alpha = 0.01;
    c.target_policy = TargetPolicy::least_likely;
    return c;
}

double mean_acceleration(const SkeletonSequence& s) {
    const auto acc = acceleration_field(s);
    const Index D = s.dims;
    double total = 0.0;
    for (Index t = 0; t < acc.rows(); ++t) {
        for (Index j = 0; j < s.joints(); ++j) total += acc.row(t).segment(j * D, D).norm();
    }
    return total / static_cast<double>(acc.rows() * s.joints());
}

// ---------------------------------------------------------------------------

void gradient_criterion() {
    const auto t0 = Clock::now();
    const auto checks = run_gradient_checks(1);
    const double elapsed = seconds_since(t0);
    double worst = 0.0;
    bool all = true;
    for (const auto& c : checks) {
        worst = std::max(worst, c.result.max_relative_error);
        all = all && c.result.passed(kGradTolerance);
    }
    report("gradient correctness", all && elapsed < kGradBudgetSeconds,
           fmt("%zu checks, max relative error %.3g (< %.0e), %.1fs (< %.0fs)", checks.size(), worst, kGradTolerance,
               elapsed, kGradBudgetSeconds));
}

void ssr_criterion(const LabeledDataset& data) {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(2024);
    std::uniform_real_distribution<double> scale(0.005, 0.2);
    double drift = 0.0, idempotence = 0.0;
    for (int k = 0; k < kSsrTrials; ++k) {
        const SkeletonSequence& clean = data.test[static_cast<std::size_t>(k) % data.test.size()].sequence;
        const BoneLengthTable ref = bone_lengths(clean, data.topology);
        const double amp = scale(rng);
        std::uniform_real_distribution<double> u(-amp, amp);
        SkeletonSequence pert = clean;
        for (Index i = 0; i < pert.coords.size(); ++i) pert.coords.data()[i] += u(rng);
        const SkeletonSequence once = ssr_realign(pert, clean, ref, data.topology);
        const SkeletonSequence twice = ssr_realign(once, clean, ref, data.topology);
        drift = std::max(drift, (bone_lengths(once, data.topology).lengths - ref.lengths).cwiseAbs().maxCoeff());
        idempotence = std::max(idempotence, (twice.coords - once.coords).cwiseAbs().maxCoeff());
    }
    const double elapsed = seconds_since(t0);
    report("SSR contract", drift <= kGeometryTolerance && idempotence <= kGeometryTolerance && elapsed < kSsrBudgetSeconds,
           fmt("%d perturbations, max bone drift %.3g, max idempotence gap %.3g (<= %.0e), %.1fs", kSsrTrials, drift,
               idempotence, kGeometryTolerance, elapsed));
}

void clip_criterion(const LabeledDataset& data, const Classifier& model, const RealSampleProvider& real) {
    const SkeletonTopology& topo = data.topology;
    struct Case {
        std::string name;
        AttackConfig config;
    };
    std::vector<Case> cases;
    {
        AttackConfig c = basic_attack(0.03);
        cases.push_back({"global eps=0.03", c});
    }
    {
        // Torso -> hip -> knee -> ankle gives four levels: 0.01/0.05/0.15/0.25.
        AttackConfig c = basic_attack(0.0);
        c.mode = AttackMode::advanced;
        c.active_joints = parse_joint_mask("torso,hips,knees,ankles", topo);
        c.clip = incremental_schedule(topo, c.active_joints, {0.01, 0.05, 0.15, 0.25});
        cases.push_back({"hierarchical 0.01/0.05/0.15/0.25", c});
    }
    {
        AttackConfig c = basic_attack(0.05);
        c.mode = AttackMode::localized;
        c.active_joints = parse_joint_mask("arms", topo);
        c.channels = {true, false, true};
        cases.push_back({"localized arms, y frozen", c});
    }

    bool ok = true;
    long checked = 0;
    double worst_excess = -1.0;
    std::set<double> bounds_seen;
    for (const auto& cs : cases) {
        AttackConfig c = cs.config;
        c.max_iterations = kTraceIterations;
        const auto joints = c.resolved_joints(topo.joints());
        for (int k = 0; k < 3; ++k) {
            const LabeledSample& sample = data.test[static_cast<std::size_t>(k * 37) % data.test.size()];
            const SkeletonSequence& clean = sample.sequence;
            const Index D = clean.dims;
            c.seed = static_cast<std::uint64_t>(k);
            int iterations = 0;
            (void)ciasa_attack(model, sample, c, &real, [&](const IterationSnapshot& s) {
                ++iterations;
                for (Index t = 0; t < clean.frames(); ++t) {
                    for (Index j = 0; j < clean.joints(); ++j) {
                        const double bound = c.clip.bound(static_cast<int>(j));
                        for (Index d = 0; d < D; ++d) {
                            const double v = s.clipped.coords(t, j * D + d);
                            const double v0 = clean.coords(t, j * D + d);
                            const bool eligible = joints[static_cast<std::size_t>(j)] &&
                                                  (c.channels.empty() || c.channels[static_cast<std::size_t>(d)]);
                            ++checked;
                            if (eligible) {
                                worst_excess = std::max(worst_excess, std::abs(v - v0) - bound);
                                if (!(std::abs(v - v0) <= bound)) ok = false;
                                bounds_seen.insert(bound);
                            } else if (std::memcmp(&v, &v0, sizeof v) != 0) {
                                ok = false;
                            }
                        }
                    }
                }
            });
            if (iterations != kTraceIterations) ok = false;
        }
    }
    const bool schedule = bounds_seen.count(0.01) && bounds_seen.count(0.05) && bounds_seen.count(0.15) &&
                          bounds_seen.count(0.25) && bounds_seen.count(0.03);
    report("clip contract", ok && schedule,
           fmt("%ld coordinate checks over %zu configs x 3 samples x %d iterations, max excess over bound %.3g",
               checked, cases.size(), kTraceIterations, worst_excess));
}

void smoothness_criterion(const LabeledDataset& data, const Classifier& model, const RealSampleProvider& real) {
    // Affine-in-time sequences.
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    double affine = 0.0;
    for (int k = 0; k < 20; ++k) {
        SkeletonSequence s(24, 15, 3);
        Eigen::RowVectorXd a(45), b(45);
        for (Index i = 0; i < 45; ++i) {
            a[i] = u(rng);
            b[i] = 0.1 * u(rng);
        }
        for (Index t = 0; t < 24; ++t) s.coords.row(t) = a + static_cast<double>(t) * b;
        affine = std::max(affine, std::abs(smoothness_loss(s)));
    }
    // Three-frame single-joint fixtures, computed by hand:
    // x = (0, 0, 1): one unit acceleration, divided by T-1 = 2.
    // x = (0, 1, 0) on two axes: |(-2, -2, 0)|^2 = 8, divided by 2.
    auto three = [](Eigen::Vector3d p0, Eigen::Vector3d p1, Eigen::Vector3d p2) {
        SkeletonSequence s(3, 1, 3);
        s.coords.row(0) = p0.transpose();
        s.coords.row(1) = p1.transpose();
        s.coords.row(2) = p2.transpose();
        return smoothness_loss(s);
    };
    const double f1 = three({0, 0, 0}, {0, 0, 0}, {1, 0, 0});
    const double f2 = three({0, 0, 0}, {1, 1, 0}, {0, 0, 0});
    const double f3 = three({2, 2, 2}, {2, 2, 2}, {2, 2, 2});
    const bool fixtures = std::abs(f1 - 0.5) <= kSmoothTolerance && std::abs(f2 - 4.0) <= kSmoothTolerance &&
                          std::abs(f3) <= kSmoothTolerance;

    // Ablation: same samples and seeds, smoothness term on vs off.
    const auto samples = first(data.test, kAblationSamples);
    AttackConfig on = basic_attack(0.03);
    AttackConfig off = on;
    off.smoothness = false;
    const auto with = attack_samples(model, samples, on, &real, 11);
    const auto without = attack_samples(model, samples, off, &real, 11);
    double acc_on = 0.0, acc_off = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (with.report.rows[i].status != "ok" || without.report.rows[i].status != "ok") continue;
        acc_on += mean_acceleration(with.results[i].perturbed);
        acc_off += mean_acceleration(without.results[i].perturbed);
        ++n;
    }
    acc_on /= static_cast<double>(std::max<std::size_t>(n, 1));
    acc_off /= static_cast<double>(std::max<std::size_t>(n, 1));
    report("smoothness", affine <= kSmoothTolerance && fixtures && n >= static_cast<std::size_t>(kAblationSamples) &&
                             acc_on < acc_off,
           fmt("affine max %.3g, fixtures %.17g/%.17g/%.3g, mean |acc| enabled %.6g vs ablated %.6g over %zu samples",
               affine, f1, f2, f3, acc_on, acc_off, n));
}

struct EndToEnd {
    SuiteResult eps03;
};

EndToEnd end_to_end_criterion(const LabeledDataset& data, const Classifier& model, double train_seconds,
                              const RealSampleProvider& real) {
    const auto t0 = Clock::now();
    const double test_accuracy = accuracy(model, data.test);
    const auto samples = first(data.test, kAttackSamples);
    std::vector<double> rates;
    EndToEnd out;
    for (double eps : {0.01, 0.02, 0.03}) {
        auto suite = attack_samples(model, samples, basic_attack(eps), &real, 1);
        rates.push_back(suite.report.targeted_rate);
        if (eps == 0.03) out.eps03 = std::move(suite);
    }
    const double elapsed = train_seconds + seconds_since(t0);
    const bool monotone = rates[0] <= rates[1] && rates[1] <= rates[2];
    report("end-to-end targeted attack",
           test_accuracy >= kTrainAccuracy && train_seconds < kTrainBudgetSeconds && rates[2] >= kTargetedRate &&
               monotone && elapsed < kEndToEndBudgetSeconds,
           fmt("test accuracy %.1f%% in %.0fs; targeted fooling %.0f%% / %.0f%% / %.0f%% at eps 0.01/0.02/0.03 on %zu "
               "samples; %.0fs total (< %.0fs)",
               100.0 * test_accuracy, train_seconds, rates[0], rates[1], rates[2], samples.size(), elapsed,
               kEndToEndBudgetSeconds));
    return out;
}

void localized_criterion(const LabeledDataset& data, const Classifier& model, const RealSampleProvider& real,
                         const fs::path& work) {
    const auto samples = first(data.test, kAttackSamples);
    AttackConfig c = basic_attack(0.08);
    c.mode = AttackMode::localized;
    c.active_joints = parse_joint_mask("legs", data.topology);
    const auto suite = attack_samples(model, samples, c, &real, 3);
    bool untouched = true;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (suite.report.rows[i].status != "ok") continue;
        const SkeletonSequence& clean = samples[i].sequence;
        const SkeletonSequence& adv = suite.results[i].perturbed;
        for (Index j = 0; j < clean.joints(); ++j) {
            if (c.active_joints[static_cast<std::size_t>(j)]) continue;
            for (Index t = 0; t < clean.frames(); ++t) {
                for (Index d = 0; d < clean.dims; ++d) {
                    const double a = adv.coords(t, j * clean.dims + d), b = clean.coords(t, j * clean.dims + d);
                    if (std::memcmp(&a, &b, sizeof a) != 0) untouched = false;
                }
            }
        }
    }

    ExperimentSpec spec;
    spec.manifest = work / "data" / "manifest.txt";
    spec.checkpoint = work / "model_a.ckpt";
    spec.output_dir = work / "regions";
    spec.protocol = "regions";
    spec.config = basic_attack(0.04);
    spec.seed = 5;
    spec.limit = kRegionSamples;
    const auto regions = run_attack_experiment(spec);
    int reports = 0;
    for (const auto& cell : regions.cells) reports += fs::exists(spec.output_dir / cell.name / "report.json") ? 1 : 0;
    const bool csv = fs::exists(spec.output_dir / "regions.csv");
    std::string rates;
    for (const auto& cell : regions.cells) rates += fmt(" %s=%.0f%%", cell.name.c_str(), cell.report.targeted_rate);

    report("localized mode",
           untouched && suite.report.targeted_rate >= kLocalizedRate && reports == 4 && csv && suite.report.errors == 0,
           fmt("legs at eps 0.08: %.0f%% targeted on %zu samples, non-leg joints %s; %d region reports (%d samples "
               "each, eps 0.04):%s",
               suite.report.targeted_rate, samples.size(), untouched ? "bit-identical" : "MOVED", reports, kRegionSamples,
               rates.c_str()));
}

void transfer_criterion(const LabeledDataset& data, const Classifier& model_b, const SuiteResult& from_a) {
    const auto samples = first(data.test, kAttackSamples);
    const auto perturbed = perturbed_samples(samples, from_a);
    const TransferReport adv = transfer_evaluate(samples, perturbed, model_b, data.classes());
    const TransferReport noise =
        noise_baseline(samples, model_b, data.classes(), ClipSpec::global(0.03), {}, {}, 77);
    const double margin = adv.fooling.fooling_rate - noise.fooling.fooling_rate;
    report("transferability", margin >= kTransferMargin && perturbed.size() == samples.size(),
           fmt("model B fooling %.0f%% from model A perturbations vs %.0f%% for equal-eps noise (margin %.0f pp, "
               "need %.0f) on %zu samples",
               adv.fooling.fooling_rate, noise.fooling.fooling_rate, margin, kTransferMargin, perturbed.size()));
}

void determinism_criterion(const LabeledDataset& data, const Classifier& model, const fs::path& work) {
    std::vector<std::string> problems;

    // Datasets.
    const auto again = generate_dataset(humanoid15_rest_pose(), default_motion_suite(), GenerationOptions{});
    save_dataset(work / "data_again", again);
    for (const auto& s : data.test) {
        const fs::path a = work / "data" / "test" / (s.id + ".seq");
        const fs::path b = work / "data_again" / "test" / (s.id + ".seq");
        if (slurp(a) != slurp(b)) {
            problems.push_back("dataset file " + s.id + " differs");
            break;
        }
    }
    if (slurp(work / "data" / "manifest.txt") != slurp(work / "data_again" / "manifest.txt")) {
        problems.push_back("manifest differs");
    }

    // Training: a short run twice with the same seed.
    TrainOptions quick = train_options(9);
    quick.epochs = 2;
    quick.target_loss.reset();
    const auto subset = first(data.train, 80);
    const auto r1 = train_classifier(model_config(9), data.topology, subset, quick);
    const auto r2 = train_classifier(model_config(9), data.topology, subset, quick);
    std::ostringstream c1, c2;
    write_checkpoint(c1, r1.model);
    write_checkpoint(c2, r2.model);
    if (c1.str() != c2.str()) problems.push_back("training is not reproducible");

    // Checkpoint round trip.
    const Classifier loaded = load_checkpoint(work / "model_a.ckpt", &model.config);
    const auto pa = model.params.all();
    const auto pb = loaded.params.all();
    bool same = pa.size() == pb.size();
    for (std::size_t i = 0; same && i < pa.size(); ++i) {
        same = pa[i].shape() == pb[i].shape() &&
               std::memcmp(pa[i].data().data(), pb[i].data().data(), sizeof(double) * static_cast<std::size_t>(pa[i].size())) == 0;
    }
    if (!same) problems.push_back("checkpoint round trip is not exact");

    // Sequence round trip.
    const LabeledDataset reread = load_dataset(work / "data" / "manifest.txt");
    for (std::size_t i = 0; i < data.test.size(); ++i) {
        const auto& a = data.test[i].sequence.coords;
        const auto& b = reread.test[i].sequence.coords;
        if (a.size() != b.size() || std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) != 0) {
            problems.push_back("sequence round trip is not exact for " + data.test[i].id);
            break;
        }
    }

    // Attack reports.
    ExperimentSpec spec;
    spec.manifest = work / "data" / "manifest.txt";
    spec.checkpoint = work / "model_a.ckpt";
    spec.config = basic_attack(0.03);
    spec.config.max_iterations = 60;
    spec.seed = 21;
    spec.limit = 4;
    for (const char* name : {"run1", "run2"}) {
        spec.output_dir = work / name;
        (void)run_attack_experiment(spec);
    }
    if (slurp(work / "run1" / "attack" / "report.json") != slurp(work / "run2" / "attack" / "report.json")) {
        problems.push_back("attack reports differ");
    }
    for (const auto& s : first(data.test, 4)) {
        if (slurp(work / "run1" / "attack" / "samples" / (s.id + ".seq")) !=
            slurp(work / "run2" / "attack" / "samples" / (s.id + ".seq"))) {
            problems.push_back("perturbed sequence " + s.id + " differs");
            break;
        }
    }

    std::string detail = "datasets, training, checkpoint and sequence round trips, attack reports";
    if (!problems.empty()) {
        detail = problems.front();
        for (std::size_t i = 1; i < problems.size(); ++i) detail += "; " + problems[i];
    }
    report("determinism and persistence", problems.empty(), detail);
}

} // namespace

int main(int argc, char** argv) {
    const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "ciasa_acceptance";
    fs::remove_all(work);
    fs::create_directories(work);

    try {
        gradient_criterion();

        const LabeledDataset data = generate_dataset(humanoid15_rest_pose(), default_motion_suite(), GenerationOptions{});
        save_dataset(work / "data", data);
        ssr_criterion(data);

        const auto t0 = Clock::now();
        const TrainingResult a = train_classifier(model_config(1), data.topology, data.train, train_options(1));
        const double train_seconds = seconds_since(t0);
        save_checkpoint(work / "model_a.ckpt", a.model);
        const RealSampleProvider real(data.train, data.topology);

        clip_criterion(data, a.model, real);
        smoothness_criterion(data, a.model, real);
        const EndToEnd e2e = end_to_end_criterion(data, a.model, train_seconds, real);
        localized_criterion(data, a.model, real, work);

        const TrainingResult b = train_classifier(model_config(2), data.topology, data.train, train_options(2));
        transfer_criterion(data, b.model, e2e.eps03);

        determinism_criterion(data, a.model, work);
    } catch (const std::exception& e) {
        report("acceptance run", false, std::string("aborted: ") + e.what());
    }

    fs::remove_all(work);
    std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
    return failures == 0 ? 0 : 1;
}
