#include "ciasa/harness.hpp"

#include "text_util.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <iostream>

namespace ciasa {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

/// Failure while running a subcommand (exit 1).
struct RunError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

json classifier_json(const ClassifierConfig& c) {
    return {{"classes", c.classes},       {"layers", c.layers},       {"base_width", c.base_width},
            {"double_at", c.double_at},   {"temporal_kernel", c.temporal_kernel},
            {"partition", to_string(c.partition)}, {"input_dims", c.input_dims},
            {"confidence", c.confidence}, {"joints", c.joints},       {"seed", c.seed}};
}

void write_json(const fs::path& path, const json& j) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    write_file_atomic(path, j.dump(2) + "\n");
}

json base_metadata(const std::string& command) {
    return {{"version", kVersion}, {"command", command}};
}

// --- gen-data ---------------------------------------------------------------------

struct GenArgs {
    fs::path out;
    GenerationOptions options;
    double noise = -1.0;
};

int run_gen_data(const GenArgs& a) {
    GenerationOptions opt = a.options;
    if (a.noise >= 0.0) opt.noise = a.noise;
    const auto suite = default_motion_suite();
    const LabeledDataset data = generate_dataset(humanoid15_rest_pose(), suite, opt);
    save_dataset(a.out, data);
    json meta = base_metadata("gen-data");
    meta["frames"] = opt.frames;
    meta["train_per_class"] = opt.train_per_class;
    meta["test_per_class"] = opt.test_per_class;
    meta["seed"] = opt.seed;
    meta["noise"] = opt.noise ? json(*opt.noise) : json(nullptr);
    meta["variation"] = {{"amplitude", opt.variation.amplitude}, {"yaw", opt.variation.yaw}, {"posture", opt.variation.posture}};
    json classes = json::array();
    for (const auto& s : suite) classes.push_back({{"name", s.name}, {"noise", s.noise}});
    meta["classes"] = std::move(classes);
    write_json(a.out / "metadata.json", meta);
    std::cout << "wrote " << data.train.size() << " train and " << data.test.size() << " test samples to "
              << (a.out / "manifest.txt").string() << '\n';
    return 0;
}

// --- train ------------------------------------------------------------------------

struct TrainArgs {
    fs::path data;
    fs::path out;
    ClassifierConfig config;
    TrainOptions options;
    std::string partition = "distance";
    double target_loss = 0.1;
};

int run_train(TrainArgs a) {
    const LabeledDataset data = load_dataset(a.data);
    a.config.classes = data.classes();
    a.config.joints = data.topology.joints();
    a.config.partition = parse_partition(a.partition);
    if (!data.train.empty()) {
        a.config.input_dims = static_cast<int>(data.train.front().sequence.dims);
        a.config.confidence = data.train.front().sequence.has_confidence();
    }
    if (a.target_loss > 0.0) a.options.target_loss = a.target_loss;
    else a.options.target_loss.reset();
    a.config.validate();
    const auto t0 = std::chrono::steady_clock::now();
    const TrainingResult result = train_classifier(a.config, data.topology, data.train, a.options);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const double acc = data.test.empty() ? 0.0 : accuracy(result.model, data.test);
    save_checkpoint(a.out, result.model);

    json meta = base_metadata("train");
    meta["data"] = a.data.string();
    meta["checkpoint"] = a.out.string();
    meta["model"] = classifier_json(a.config);
    meta["training"] = {{"epochs", a.options.epochs},
                        {"batch_size", a.options.batch_size},
                        {"learning_rate", a.options.learning_rate},
                        {"decay_epochs", a.options.decay_epochs},
                        {"decay_factor", a.options.decay_factor},
                        {"target_loss", a.options.target_loss ? json(*a.options.target_loss) : json(nullptr)},
                        {"seed", a.options.seed}};
    json log = json::array();
    for (const auto& e : result.log) log.push_back({{"epoch", e.epoch}, {"loss", e.loss}, {"accuracy", e.accuracy}});
    meta["log"] = std::move(log);
    meta["test_accuracy"] = acc;
    write_json(fs::path(a.out.string() + ".json"), meta);
    std::cout << "trained " << result.log.size() << " epochs in " << text::format_double(seconds) << " s, test accuracy "
              << text::format_double(acc) << '\n';
    return 0;
}

// --- attack -----------------------------------------------------------------------

struct AttackArgs {
    fs::path data, model, out, config_file;
    std::string mode = "basic";
    double eps = 0.03;
    std::string schedule;
    std::string mask = "all";
    std::string channels;
    double lambda = 10.0;
    double alpha = 0.01;
    int iterations = 400;
    std::string target = "least_likely";
    double early_stop = -1.0;
    std::uint64_t seed = 0;
    std::vector<std::string> samples;
    std::size_t limit = 0;
    std::vector<double> sweep;
    std::vector<std::string> regions;
    bool no_gan = false, no_smoothness = false, no_ssr = false;
};

AttackConfig attack_config_from(const AttackArgs& a, const SkeletonTopology& topo) {
    AttackConfig c;
    c.mode = parse_attack_mode(a.mode);
    if (a.mask != "all") c.active_joints = parse_joint_mask(a.mask, topo);
    if (!a.schedule.empty()) {
        c.clip = parse_clip_schedule(a.schedule, topo);
    } else if (c.mode == AttackMode::advanced) {
        // Without a schedule the bound grows away from the region's top joints.
        c.clip = incremental_schedule(topo, c.resolved_joints(topo.joints()));
    } else {
        c.clip = ClipSpec::global(a.eps);
    }
    for (char ch : a.channels) {
        if (ch == ',') continue;
        if (ch != '0' && ch != '1') throw RunError("--channels takes 0/1 flags");
        c.channels.push_back(ch == '1');
    }
    c.lambda = a.lambda;
    c.alpha = a.alpha;
    c.max_iterations = a.iterations;
    if (a.target != "least_likely") {
        c.target_policy = TargetPolicy::explicit_class;
        if (!text::parse_number(std::string_view(a.target), c.target_class)) throw RunError("--target: bad class index");
    }
    if (a.early_stop >= 0.0) c.early_stop = a.early_stop;
    c.seed = a.seed;
    c.smoothness = !a.no_smoothness;
    c.gan = !a.no_gan;
    c.ssr = !a.no_ssr;
    c.validate(topo);
    return c;
}

int run_attack(const AttackArgs& a) {
    ExperimentSpec spec;
    spec.manifest = a.data;
    spec.checkpoint = a.model;
    spec.output_dir = a.out;
    spec.seed = a.seed;
    spec.sample_ids = a.samples;
    if (a.limit > 0) spec.limit = a.limit;
    if (!a.config_file.empty()) {
        spec.attack_config = a.config_file;
    } else {
        if (!fs::exists(a.data)) throw RunError("manifest " + a.data.string() + " does not exist");
        spec.config = attack_config_from(a, load_dataset(a.data).topology);
    }
    if (!a.sweep.empty()) {
        spec.protocol = "sweep";
        spec.epsilons = a.sweep;
    } else if (!a.regions.empty()) {
        spec.protocol = "regions";
        if (!(a.regions.size() == 1 && a.regions.front() == "default")) spec.regions = a.regions;
    }
    const ExperimentResult result = run_attack_experiment(spec);
    for (const auto& cell : result.cells) {
        std::cout << cell.name << ": samples " << cell.report.samples << ", fooling " << text::format_double(cell.report.fooling_rate)
                  << "%, targeted " << text::format_double(cell.report.targeted_rate) << "%, errors " << cell.report.errors
                  << '\n';
    }
    return result.exit_status;
}

// --- eval / transfer ---------------------------------------------------------------

std::vector<LabeledSample> all_samples(const LabeledDataset& d) {
    std::vector<LabeledSample> out = d.test;
    out.insert(out.end(), d.train.begin(), d.train.end());
    return out;
}

struct EvalArgs {
    fs::path data, model, perturbed, out;
};

int run_eval(const EvalArgs& a) {
    const LabeledDataset data = load_dataset(a.data);
    const Classifier model = load_checkpoint(a.model);
    json meta = base_metadata("eval");
    meta["data"] = a.data.string();
    meta["model"] = a.model.string();
    meta["perturbed"] = a.perturbed.string();
    json out;
    if (a.perturbed.empty()) {
        if (data.test.empty()) throw RunError("eval: the test split is empty");
        const double acc = accuracy(model, data.test);
        out = {{"test_accuracy", acc}, {"samples", data.test.size()}};
        std::cout << "test accuracy " << text::format_double(acc) << '\n';
    } else {
        const LabeledDataset pert = load_dataset(a.perturbed);
        const TransferReport r = transfer_evaluate(data.test, all_samples(pert), model, data.classes());
        out = json::parse(transfer_json(r));
        std::cout << "clean accuracy " << text::format_double(r.clean_accuracy) << ", perturbed accuracy "
                  << text::format_double(r.perturbed_accuracy) << ", fooling " << text::format_double(r.fooling.fooling_rate)
                  << "%\n";
    }
    if (!a.out.empty()) {
        meta["result"] = out;
        write_json(a.out, meta);
    }
    return 0;
}

struct TransferArgs {
    fs::path data, perturbed, out;
    std::vector<fs::path> models;
    double eps = 0.03;
    std::string mask = "all";
    std::uint64_t seed = 0;
};

int run_transfer(const TransferArgs& a) {
    const LabeledDataset data = load_dataset(a.data);
    const LabeledDataset pert = load_dataset(a.perturbed);
    const std::vector<LabeledSample> perturbed = all_samples(pert);
    std::vector<LabeledSample> clean;
    for (const auto& s : data.test) {
        if (std::any_of(perturbed.begin(), perturbed.end(), [&](const LabeledSample& p) { return p.id == s.id; })) {
            clean.push_back(s);
        }
    }
    if (clean.empty()) throw RunError("transfer: no perturbed sample matches the test split");
    const std::vector<bool> joints = parse_joint_mask(a.mask, data.topology);
    json meta = base_metadata("transfer");
    meta["data"] = a.data.string();
    meta["perturbed"] = a.perturbed.string();
    meta["noise"] = {{"epsilon", a.eps}, {"mask", a.mask}, {"seed", a.seed}};
    json models = json::array();
    for (const auto& path : a.models) {
        const Classifier model = load_checkpoint(path);
        const TransferReport adv = transfer_evaluate(clean, perturbed, model, data.classes());
        const TransferReport noise = noise_baseline(clean, model, data.classes(), ClipSpec::global(a.eps), joints, {}, a.seed);
        models.push_back({{"checkpoint", path.string()},
                          {"adversarial", json::parse(transfer_json(adv))},
                          {"noise_baseline", json::parse(transfer_json(noise))},
                          {"margin", adv.fooling.fooling_rate - noise.fooling.fooling_rate}});
        std::cout << path.string() << ": fooling " << text::format_double(adv.fooling.fooling_rate) << "%, noise baseline "
                  << text::format_double(noise.fooling.fooling_rate) << "%\n";
    }
    meta["models"] = std::move(models);
    write_json(a.out, meta);
    return 0;
}

// --- gradcheck / validate ----------------------------------------------------------

int run_gradcheck(std::uint64_t seed, double tolerance, const fs::path& metadata) {
    const auto entries = run_gradient_checks(seed);
    bool ok = true;
    json checks = json::array();
    for (const auto& e : entries) {
        const bool pass = e.result.max_relative_error < tolerance;
        ok = ok && pass;
        std::cout << (pass ? "ok   " : "FAIL ") << e.name << ": max relative error "
                  << text::format_double(e.result.max_relative_error) << '\n';
        checks.push_back({{"name", e.name}, {"max_relative_error", e.result.max_relative_error}, {"pass", pass}});
    }
    if (!metadata.empty()) {
        json meta = base_metadata("gradcheck");
        meta["seed"] = seed;
        meta["tolerance"] = tolerance;
        meta["checks"] = std::move(checks);
        write_json(metadata, meta);
    }
    return ok ? 0 : 1;
}

int run_validate(const std::vector<fs::path>& files, const fs::path& reference, const fs::path& metadata) {
    bool ok = true;
    json results = json::array();
    std::optional<SkeletonSequence> ref;
    SkeletonTopology ref_topo;
    if (!reference.empty()) ref = load_sequence(reference, nullptr, &ref_topo);
    for (const auto& f : files) {
        json entry = {{"file", f.string()}};
        try {
            SkeletonTopology topo;
            const SkeletonSequence seq = load_sequence(f, ref ? &ref_topo : nullptr, &topo);
            const ValidationReport r = validate_sequence(seq, topo, ref ? &*ref : nullptr);
            json violations = json::array();
            for (const auto& v : r.violations) violations.push_back(v.message);
            entry["violations"] = std::move(violations);
            if (r.max_bone_drift) entry["max_bone_drift"] = *r.max_bone_drift;
            if (r.max_displacement) entry["max_displacement"] = *r.max_displacement;
            std::cout << f.string() << ": " << (r.ok() ? "ok" : "invalid");
            if (r.max_bone_drift) std::cout << ", bone drift " << text::format_double(*r.max_bone_drift);
            std::cout << '\n';
            for (const auto& v : r.violations) std::cout << "  " << v.message << '\n';
            ok = ok && r.ok();
        } catch (const std::exception& e) {
            entry["error"] = e.what();
            std::cout << f.string() << ": " << e.what() << '\n';
            ok = false;
        }
        results.push_back(std::move(entry));
    }
    if (!metadata.empty()) {
        json meta = base_metadata("validate");
        meta["reference"] = reference.string();
        meta["files"] = std::move(results);
        write_json(metadata, meta);
    }
    return ok ? 0 : 1;
}

} // namespace

int cli_main(int argc, char** argv) {
    CLI::App app{"Constrained adversarial attacks on skeleton action recognition"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kVersion);

    GenArgs gen;
    auto* gen_cmd = app.add_subcommand("gen-data", "Generate the synthetic action dataset");
    gen_cmd->add_option("--out", gen.out, "Output directory")->required();
    gen_cmd->add_option("--seed", gen.options.seed, "Generation seed")->capture_default_str();
    gen_cmd->add_option("--frames", gen.options.frames, "Frames per sequence")->capture_default_str()->check(CLI::PositiveNumber);
    gen_cmd->add_option("--train-per-class", gen.options.train_per_class)->capture_default_str()->check(CLI::NonNegativeNumber);
    gen_cmd->add_option("--test-per-class", gen.options.test_per_class)->capture_default_str()->check(CLI::NonNegativeNumber);
    gen_cmd->add_option("--noise", gen.noise, "Angle noise (radians) for every class; class default when omitted");
    gen_cmd->add_option("--vary-amplitude", gen.options.variation.amplitude)->check(CLI::NonNegativeNumber);
    gen_cmd->add_option("--vary-yaw", gen.options.variation.yaw)->check(CLI::NonNegativeNumber);
    gen_cmd->add_option("--vary-posture", gen.options.variation.posture)->check(CLI::NonNegativeNumber);

    TrainArgs train;
    auto* train_cmd = app.add_subcommand("train", "Train a classifier");
    train_cmd->add_option("--data", train.data, "Dataset manifest")->required();
    train_cmd->add_option("--out", train.out, "Checkpoint path")->required();
    train_cmd->add_option("--seed", train.config.seed, "Initialisation seed")->capture_default_str();
    train_cmd->add_option("--shuffle-seed", train.options.seed)->capture_default_str();
    train_cmd->add_option("--layers", train.config.layers)->capture_default_str();
    train_cmd->add_option("--width", train.config.base_width)->capture_default_str();
    train_cmd->add_option("--double-at", train.config.double_at)->capture_default_str();
    train_cmd->add_option("--kernel", train.config.temporal_kernel)->capture_default_str();
    train_cmd->add_option("--partition", train.partition)->capture_default_str()->check(CLI::IsMember({"uniform", "distance"}));
    train_cmd->add_option("--epochs", train.options.epochs)->capture_default_str();
    train_cmd->add_option("--batch", train.options.batch_size)->capture_default_str();
    train_cmd->add_option("--lr", train.options.learning_rate)->capture_default_str();
    train_cmd->add_option("--decay-at", train.options.decay_epochs);
    train_cmd->add_option("--decay-factor", train.options.decay_factor)->capture_default_str();
    train_cmd->add_option("--target-loss", train.target_loss, "Stop at this epoch loss; 0 disables")->capture_default_str();

    AttackArgs attack;
    auto* attack_cmd = app.add_subcommand("attack", "Attack test samples");
    attack_cmd->add_option("--data", attack.data, "Dataset manifest")->required();
    attack_cmd->add_option("--model", attack.model, "Checkpoint")->required();
    attack_cmd->add_option("--out", attack.out, "Output directory")->required();
    attack_cmd->add_option("--config", attack.config_file, "key=value attack config (overrides the flags below)");
    attack_cmd->add_option("--mode", attack.mode)->capture_default_str()->check(CLI::IsMember({"basic", "localized", "advanced"}));
    attack_cmd->add_option("--eps", attack.eps, "Global clipping bound")->capture_default_str();
    attack_cmd->add_option("--schedule", attack.schedule, "Hierarchical bounds, e.g. hips:0.01,knees:0.05");
    attack_cmd->add_option("--mask", attack.mask, "Active joints: groups, names or indices")->capture_default_str();
    attack_cmd->add_option("--channels", attack.channels, "Coordinate axes allowed to move, e.g. 1,1,0");
    attack_cmd->add_option("--lambda", attack.lambda)->capture_default_str();
    attack_cmd->add_option("--alpha", attack.alpha)->capture_default_str();
    attack_cmd->add_option("--iterations", attack.iterations)->capture_default_str();
    attack_cmd->add_option("--target", attack.target, "least_likely or a class index")->capture_default_str();
    attack_cmd->add_option("--early-stop", attack.early_stop, "Target probability that ends the run");
    attack_cmd->add_option("--seed", attack.seed)->capture_default_str();
    attack_cmd->add_option("--sample", attack.samples, "Sample id (repeatable); all test samples when omitted");
    attack_cmd->add_option("--limit", attack.limit, "Attack at most this many samples");
    auto* sweep_opt = attack_cmd->add_option("--sweep", attack.sweep, "Epsilon values, one run each")->delimiter(',');
    attack_cmd->add_option("--regions", attack.regions, "Region masks, one localized run each ('default' for four)")
        ->delimiter(';')
        ->excludes(sweep_opt);
    attack_cmd->add_flag("--no-gan", attack.no_gan);
    attack_cmd->add_flag("--no-smoothness", attack.no_smoothness);
    attack_cmd->add_flag("--no-ssr", attack.no_ssr);

    EvalArgs eval;
    auto* eval_cmd = app.add_subcommand("eval", "Accuracy, or fooling report against a perturbed set");
    eval_cmd->add_option("--data", eval.data, "Clean dataset manifest")->required();
    eval_cmd->add_option("--model", eval.model, "Checkpoint")->required();
    eval_cmd->add_option("--perturbed", eval.perturbed, "Manifest written by attack");
    eval_cmd->add_option("--out", eval.out, "JSON report path");

    TransferArgs transfer;
    auto* transfer_cmd = app.add_subcommand("transfer", "Evaluate perturbations on other models");
    transfer_cmd->add_option("--data", transfer.data, "Clean dataset manifest")->required();
    transfer_cmd->add_option("--perturbed", transfer.perturbed, "Manifest written by attack")->required();
    transfer_cmd->add_option("--model", transfer.models, "Checkpoint (repeatable)")->required();
    transfer_cmd->add_option("--out", transfer.out, "JSON report path")->required();
    transfer_cmd->add_option("--eps", transfer.eps, "Noise baseline bound")->capture_default_str();
    transfer_cmd->add_option("--mask", transfer.mask, "Noise baseline joints")->capture_default_str();
    transfer_cmd->add_option("--seed", transfer.seed)->capture_default_str();

    std::uint64_t grad_seed = 0;
    double grad_tol = 1e-4;
    fs::path grad_meta;
    auto* grad_cmd = app.add_subcommand("gradcheck", "Compare analytic gradients with central differences");
    grad_cmd->add_option("--seed", grad_seed)->capture_default_str();
    grad_cmd->add_option("--tolerance", grad_tol)->capture_default_str();
    grad_cmd->add_option("--metadata", grad_meta, "JSON record path");

    std::vector<fs::path> val_files;
    fs::path val_ref, val_meta;
    auto* val_cmd = app.add_subcommand("validate", "Lint sequence files");
    val_cmd->add_option("files", val_files, "Sequence files")->required();
    val_cmd->add_option("--reference", val_ref, "Clean sequence for bone drift and displacement");
    val_cmd->add_option("--metadata", val_meta, "JSON record path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        std::cerr << app.help();
        return 2;
    }

    try {
        if (*gen_cmd) return run_gen_data(gen);
        if (*train_cmd) return run_train(train);
        if (*attack_cmd) return run_attack(attack);
        if (*eval_cmd) return run_eval(eval);
        if (*transfer_cmd) return run_transfer(transfer);
        if (*grad_cmd) return run_gradcheck(grad_seed, grad_tol, grad_meta);
        if (*val_cmd) return run_validate(val_files, val_ref, val_meta);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 2;
}

} // namespace ciasa
