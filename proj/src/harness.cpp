#include "ciasa/harness.hpp"

#include "text_util.hpp"
#include "topology_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace ciasa {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Metrics

FoolingReport summarize(std::vector<FoolingRow> rows) {
    FoolingReport r;
    r.samples = rows.size();
    std::size_t changed = 0, hit = 0, ok = 0;
    for (const FoolingRow& row : rows) {
        changed += row.changed() ? 1 : 0;
        hit += row.hit() ? 1 : 0;
        if (row.status != "ok") {
            ++r.errors;
            continue;
        }
        ++ok;
        r.mean_iterations += row.iterations;
        r.mean_displacement_pre_ssr += row.displacement_pre_ssr;
        r.mean_displacement_post_ssr += row.displacement_post_ssr;
        r.mean_bone_drift += row.bone_drift;
    }
    if (r.samples > 0) {
        r.fooling_rate = 100.0 * static_cast<double>(changed) / static_cast<double>(r.samples);
        r.targeted_rate = 100.0 * static_cast<double>(hit) / static_cast<double>(r.samples);
    }
    if (ok > 0) {
        const auto n = static_cast<double>(ok);
        r.mean_iterations /= n;
        r.mean_displacement_pre_ssr /= n;
        r.mean_displacement_post_ssr /= n;
        r.mean_bone_drift /= n;
    }
    r.rows = std::move(rows);
    return r;
}

FoolingReport fooling_rate(std::span<const int> clean, std::span<const int> attacked,
                           std::optional<std::span<const int>> targets) {
    if (clean.size() != attacked.size() || (targets && targets->size() != clean.size())) {
        throw std::invalid_argument("fooling_rate: prediction lists differ in length");
    }
    std::vector<FoolingRow> rows(clean.size());
    for (std::size_t i = 0; i < clean.size(); ++i) {
        rows[i].id = std::to_string(i);
        rows[i].clean_prediction = clean[i];
        rows[i].attacked_prediction = attacked[i];
        rows[i].target = targets ? (*targets)[i] : -1;
    }
    return summarize(std::move(rows));
}

FoolingRow make_row(const LabeledSample& sample, const AttackResult& result) {
    FoolingRow row;
    row.id = sample.id;
    row.ground_truth = sample.label;
    row.clean_prediction = result.clean_prediction;
    row.attacked_prediction = result.predicted;
    row.target = result.target;
    row.iterations = result.iterations;
    row.displacement_pre_ssr = result.constraints.max_displacement_pre_ssr;
    row.displacement_post_ssr = result.constraints.max_displacement_post_ssr;
    row.bone_drift = result.constraints.max_bone_drift;
    row.status = result.status.rfind("aborted", 0) == 0 ? result.status : "ok";
    return row;
}

namespace {

json report_to_json(const FoolingReport& r) {
    json j;
    j["samples"] = r.samples;
    j["fooling_rate"] = r.fooling_rate;
    j["targeted_rate"] = r.targeted_rate;
    j["mean_iterations"] = r.mean_iterations;
    j["mean_displacement_pre_ssr"] = r.mean_displacement_pre_ssr;
    j["mean_displacement_post_ssr"] = r.mean_displacement_post_ssr;
    j["mean_bone_drift"] = r.mean_bone_drift;
    j["errors"] = r.errors;
    json rows = json::array();
    for (const FoolingRow& row : r.rows) {
        rows.push_back({{"id", row.id},
                        {"ground_truth", row.ground_truth},
                        {"clean_prediction", row.clean_prediction},
                        {"attacked_prediction", row.attacked_prediction},
                        {"target", row.target},
                        {"changed", row.changed()},
                        {"hit", row.hit()},
                        {"iterations", row.iterations},
                        {"displacement_pre_ssr", row.displacement_pre_ssr},
                        {"displacement_post_ssr", row.displacement_post_ssr},
                        {"bone_drift", row.bone_drift},
                        {"status", row.status}});
    }
    j["rows"] = std::move(rows);
    return j;
}

json result_to_json(const LabeledSample& sample, const AttackResult& r) {
    json j;
    j["id"] = sample.id;
    j["ground_truth"] = r.ground_truth;
    j["target"] = r.target;
    j["clean_prediction"] = r.clean_prediction;
    j["predicted"] = r.predicted;
    j["confidence"] = r.confidence;
    j["success"] = r.success;
    j["iterations"] = r.iterations;
    j["status"] = r.status;
    j["constraints"] = {{"max_displacement_pre_ssr", r.constraints.max_displacement_pre_ssr},
                        {"max_displacement_post_ssr", r.constraints.max_displacement_post_ssr},
                        {"max_epsilon_excess", r.constraints.max_epsilon_excess},
                        {"max_bone_drift", r.constraints.max_bone_drift}};
    j["trace"] = {{"prediction", r.trace.prediction},
                  {"smoothness", r.trace.smoothness},
                  {"adversarial", r.trace.adversarial},
                  {"total", r.trace.total}};
    return j;
}

json config_to_json(const ClassifierConfig& c) {
    return {{"classes", c.classes},
            {"layers", c.layers},
            {"base_width", c.base_width},
            {"double_at", c.double_at},
            {"temporal_kernel", c.temporal_kernel},
            {"partition", to_string(c.partition)},
            {"input_dims", c.input_dims},
            {"confidence", c.confidence},
            {"joints", c.joints},
            {"seed", c.seed}};
}

} // namespace

std::string report_json(const FoolingReport& report, int indent) { return report_to_json(report).dump(indent) + "\n"; }

// ---------------------------------------------------------------------------
// Attacks over a split

SuiteResult attack_samples(const Classifier& model, const std::vector<LabeledSample>& samples,
                           const AttackConfig& config, const RealSampleProvider* real, std::uint64_t seed) {
    SuiteResult out;
    std::vector<FoolingRow> rows;
    rows.reserve(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        AttackConfig c = config;
        c.seed = derive_seed(seed, i);
        try {
            AttackResult r = ciasa_attack(model, samples[i], c, real);
            rows.push_back(make_row(samples[i], r));
            out.results.push_back(std::move(r));
        } catch (const std::exception& e) {
            FoolingRow row;
            row.id = samples[i].id;
            row.ground_truth = samples[i].label;
            row.status = std::string("error: ") + e.what();
            rows.push_back(std::move(row));
            out.results.emplace_back();
            out.results.back().status = rows.back().status;
        }
    }
    out.report = summarize(std::move(rows));
    return out;
}

std::vector<LabeledSample> perturbed_samples(const std::vector<LabeledSample>& clean, const SuiteResult& suite) {
    std::vector<LabeledSample> out;
    for (std::size_t i = 0; i < clean.size() && i < suite.report.rows.size(); ++i) {
        if (suite.report.rows[i].status != "ok") continue;
        out.push_back({clean[i].id, clean[i].label, suite.results[i].perturbed});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Transfer

namespace {

void check_model_fits(const Classifier& model, int classes, const SkeletonTopology& topo, const char* op) {
    if (model.config.classes != classes) {
        throw std::invalid_argument(std::string(op) + ": model has " + std::to_string(model.config.classes) +
                                    " classes, data has " + std::to_string(classes));
    }
    if (!(model.topology == topo)) throw std::invalid_argument(std::string(op) + ": model topology differs from the data");
}

std::vector<int> predictions(const Classifier& model, const std::vector<const SkeletonSequence*>& seqs) {
    return predict_batch(model, seqs);
}

} // namespace

TransferReport transfer_evaluate(const std::vector<LabeledSample>& clean, const std::vector<LabeledSample>& perturbed,
                                 const Classifier& model, int classes, const std::vector<int>& targets) {
    if (!targets.empty() && targets.size() != clean.size()) {
        throw std::invalid_argument("transfer_evaluate: targets do not align with the clean set");
    }
    std::map<std::string, const LabeledSample*> by_id;
    for (const auto& p : perturbed) by_id[p.id] = &p;
    std::vector<const SkeletonSequence*> clean_seqs, pert_seqs;
    std::vector<const LabeledSample*> matched;
    std::vector<int> matched_targets;
    for (std::size_t i = 0; i < clean.size(); ++i) {
        const auto it = by_id.find(clean[i].id);
        if (it == by_id.end()) continue;
        if (it->second->label != clean[i].label) {
            throw std::invalid_argument("transfer_evaluate: label of " + clean[i].id + " differs between sets");
        }
        clean_seqs.push_back(&clean[i].sequence);
        pert_seqs.push_back(&it->second->sequence);
        matched.push_back(&clean[i]);
        matched_targets.push_back(targets.empty() ? -1 : targets[i]);
    }
    if (matched.empty()) throw std::invalid_argument("transfer_evaluate: no sample ids in common");
    for (const auto* s : matched) {
        if (s->label < 0 || s->label >= classes) {
            throw std::invalid_argument("transfer_evaluate: label of " + s->id + " outside the class set");
        }
    }
    if (model.config.classes != classes) {
        throw std::invalid_argument("transfer_evaluate: model has " + std::to_string(model.config.classes) +
                                    " classes, data has " + std::to_string(classes));
    }
    const std::vector<int> before = predictions(model, clean_seqs);
    const std::vector<int> after = predictions(model, pert_seqs);
    TransferReport rep;
    std::vector<FoolingRow> rows;
    std::size_t correct_before = 0, correct_after = 0;
    for (std::size_t i = 0; i < matched.size(); ++i) {
        correct_before += before[i] == matched[i]->label ? 1 : 0;
        correct_after += after[i] == matched[i]->label ? 1 : 0;
        FoolingRow row;
        row.id = matched[i]->id;
        row.ground_truth = matched[i]->label;
        row.clean_prediction = before[i];
        row.attacked_prediction = after[i];
        row.target = matched_targets[i];
        const double disp = (pert_seqs[i]->coords - clean_seqs[i]->coords).cwiseAbs().maxCoeff();
        row.displacement_pre_ssr = disp;
        row.displacement_post_ssr = disp;
        rows.push_back(std::move(row));
    }
    const auto n = static_cast<double>(matched.size());
    rep.clean_accuracy = static_cast<double>(correct_before) / n;
    rep.perturbed_accuracy = static_cast<double>(correct_after) / n;
    rep.accuracy_drop = rep.clean_accuracy - rep.perturbed_accuracy;
    rep.fooling = summarize(std::move(rows));
    return rep;
}

TransferReport noise_baseline(const std::vector<LabeledSample>& clean, const Classifier& model, int classes,
                              const ClipSpec& clip, const std::vector<bool>& active_joints,
                              const std::vector<bool>& channels, std::uint64_t seed) {
    if (!clean.empty()) check_model_fits(model, classes, model.topology, "noise_baseline");
    std::mt19937_64 rng(seed);
    std::vector<LabeledSample> noisy;
    noisy.reserve(clean.size());
    for (const auto& s : clean) noisy.push_back({s.id, s.label, random_perturbation(s.sequence, clip, active_joints, channels, rng)});
    return transfer_evaluate(clean, noisy, model, classes);
}

std::string transfer_json(const TransferReport& report, int indent) {
    json j;
    j["clean_accuracy"] = report.clean_accuracy;
    j["perturbed_accuracy"] = report.perturbed_accuracy;
    j["accuracy_drop"] = report.accuracy_drop;
    j["fooling"] = report_to_json(report.fooling);
    return j.dump(indent) + "\n";
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr const char* kCheckpointMagic = "ciasa-checkpoint";

[[noreturn]] void checkpoint_error(int line, const std::string& what) {
    throw CheckpointError("checkpoint:" + std::to_string(line) + ": " + what);
}

} // namespace

std::vector<std::string> config_diff(const ClassifierConfig& e, const ClassifierConfig& a) {
    std::vector<std::string> out;
    auto field = [&out](const char* name, const auto& x, const auto& y) {
        if (x == y) return;
        std::ostringstream s;
        s << name << ": expected ";
        if constexpr (std::is_same_v<std::decay_t<decltype(x)>, std::vector<int>>) {
            s << '[';
            for (std::size_t i = 0; i < x.size(); ++i) s << (i ? "," : "") << x[i];
            s << "], file has [";
            for (std::size_t i = 0; i < y.size(); ++i) s << (i ? "," : "") << y[i];
            s << ']';
        } else {
            s << x << ", file has " << y;
        }
        out.push_back(s.str());
    };
    field("classes", e.classes, a.classes);
    field("layers", e.layers, a.layers);
    field("base_width", e.base_width, a.base_width);
    field("double_at", e.double_at, a.double_at);
    field("temporal_kernel", e.temporal_kernel, a.temporal_kernel);
    field("partition", to_string(e.partition), to_string(a.partition));
    field("input_dims", e.input_dims, a.input_dims);
    field("confidence", e.confidence, a.confidence);
    field("joints", e.joints, a.joints);
    field("seed", e.seed, a.seed);
    return out;
}

void write_checkpoint(std::ostream& out, const Classifier& model) {
    const ClassifierConfig& c = model.config;
    out << kCheckpointMagic << " 1\nconfig\n";
    out << "classes " << c.classes << "\nlayers " << c.layers << "\nbase_width " << c.base_width << "\ndouble_at";
    for (int d : c.double_at) out << ' ' << d;
    out << "\ntemporal_kernel " << c.temporal_kernel << "\npartition " << to_string(c.partition) << "\ninput_dims "
        << c.input_dims << "\nconfidence " << (c.confidence ? 1 : 0) << "\njoints " << c.joints << "\nseed " << c.seed
        << "\ntopology\n";
    detail::write_topology(out, model.topology);
    const std::vector<ad::Value> params = model.params.all();
    out << "params " << params.size() << '\n';
    for (std::size_t i = 0; i < params.size(); ++i) {
        out << "param " << i << ' ' << params[i].rank();
        for (Index d : params[i].shape()) out << ' ' << d;
        out << '\n';
        const ad::Array& v = params[i].data();
        for (Index k = 0; k < v.size(); ++k) out << (k ? " " : "") << text::format_double(v[k]);
        out << '\n';
    }
    out << "end\n";
}

Classifier read_checkpoint(std::istream& in, const ClassifierConfig* expected) {
    text::LineReader reader(in);
    std::string line;
    if (!reader.next(line)) checkpoint_error(reader.number(), "empty file");
    {
        const auto tok = text::split_ws(line);
        if (tok.size() != 2 || tok[0] != kCheckpointMagic) checkpoint_error(reader.number(), "not a checkpoint file");
        if (tok[1] != "1") checkpoint_error(reader.number(), "unsupported checkpoint version '" + std::string(tok[1]) + "'");
    }
    auto next = [&](const char* what) {
        if (!reader.next(line)) checkpoint_error(reader.number(), std::string("truncated file: expected ") + what);
        return text::split_ws(line);
    };
    if (next("config")[0] != "config") checkpoint_error(reader.number(), "expected 'config'");

    ClassifierConfig c;
    c.double_at.clear();
    auto int_of = [&](std::string_view s, const std::string& field) {
        long v = 0;
        if (!text::parse_number(s, v)) checkpoint_error(reader.number(), "bad integer for " + field);
        return v;
    };
    for (;;) {
        const auto tok = next("config fields");
        const std::string key(tok[0]);
        if (key == "topology") break;
        if (key == "double_at") {
            for (std::size_t i = 1; i < tok.size(); ++i) c.double_at.push_back(static_cast<int>(int_of(tok[i], key)));
            continue;
        }
        if (tok.size() != 2) checkpoint_error(reader.number(), "field '" + key + "' takes one value");
        if (key == "classes") c.classes = static_cast<int>(int_of(tok[1], key));
        else if (key == "layers") c.layers = static_cast<int>(int_of(tok[1], key));
        else if (key == "base_width") c.base_width = static_cast<int>(int_of(tok[1], key));
        else if (key == "temporal_kernel") c.temporal_kernel = static_cast<int>(int_of(tok[1], key));
        else if (key == "input_dims") c.input_dims = static_cast<int>(int_of(tok[1], key));
        else if (key == "confidence") c.confidence = int_of(tok[1], key) != 0;
        else if (key == "joints") c.joints = static_cast<int>(int_of(tok[1], key));
        else if (key == "seed") {
            if (!text::parse_number(tok[1], c.seed)) checkpoint_error(reader.number(), "bad seed");
        } else if (key == "partition") {
            try {
                c.partition = parse_partition(std::string(tok[1]));
            } catch (const std::invalid_argument& e) {
                checkpoint_error(reader.number(), e.what());
            }
        } else {
            checkpoint_error(reader.number(), "unknown config field '" + key + "'");
        }
    }
    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        checkpoint_error(reader.number(), e.what());
    }
    if (expected != nullptr && !(*expected == c)) {
        std::string msg = "checkpoint config does not match:";
        for (const auto& d : config_diff(*expected, c)) msg += "\n  " + d;
        throw CheckpointError(msg);
    }

    detail::TopologyFields fields;
    std::vector<std::string_view> tok;
    for (;;) {
        tok = next("topology fields");
        if (tok[0] == "params") break;
        if (!fields.consume(tok, [&](const std::string& m) { checkpoint_error(reader.number(), m); })) {
            checkpoint_error(reader.number(), "unknown topology field '" + std::string(tok[0]) + "'");
        }
    }
    SkeletonTopology topo;
    try {
        topo = fields.build();
    } catch (const SkeletonError& e) {
        checkpoint_error(reader.number(), e.what());
    }
    Classifier model;
    try {
        model = make_classifier(c, topo);
    } catch (const std::exception& e) {
        checkpoint_error(reader.number(), e.what());
    }
    std::vector<ad::Value> params = model.params.all();
    if (tok.size() != 2 || int_of(tok[1], "params") != static_cast<long>(params.size())) {
        checkpoint_error(reader.number(), "expected " + std::to_string(params.size()) + " parameter blocks");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        tok = next("parameter header");
        if (tok.size() < 3 || tok[0] != "param" || int_of(tok[1], "param") != static_cast<long>(i)) {
            checkpoint_error(reader.number(), "expected 'param " + std::to_string(i) + "'");
        }
        ad::Shape shape;
        const long rank = int_of(tok[2], "rank");
        if (rank < 0 || static_cast<std::size_t>(rank) + 3 != tok.size()) checkpoint_error(reader.number(), "bad rank");
        for (long d = 0; d < rank; ++d) shape.push_back(int_of(tok[3 + static_cast<std::size_t>(d)], "shape"));
        if (shape != params[i].shape()) {
            checkpoint_error(reader.number(), "parameter " + std::to_string(i) + " has shape " + ad::to_string(shape) +
                                                  ", config implies " + ad::to_string(params[i].shape()));
        }
        const auto values = next("parameter values");
        ad::Array& v = params[i].data();
        if (static_cast<Index>(values.size()) != v.size()) {
            checkpoint_error(reader.number(), "parameter " + std::to_string(i) + " has " + std::to_string(values.size()) +
                                                  " values, expected " + std::to_string(v.size()));
        }
        for (Index k = 0; k < v.size(); ++k) {
            if (!text::parse_number(values[static_cast<std::size_t>(k)], v[k])) {
                checkpoint_error(reader.number(), "bad number in parameter " + std::to_string(i));
            }
        }
    }
    if (next("'end'")[0] != "end") checkpoint_error(reader.number(), "expected 'end'");
    return model;
}

void save_checkpoint(const fs::path& path, const Classifier& model) {
    std::ostringstream out;
    write_checkpoint(out, model);
    write_file_atomic(path, out.str());
}

Classifier load_checkpoint(const fs::path& path, const ClassifierConfig* expected) {
    std::ifstream in(path);
    if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
    try {
        return read_checkpoint(in, expected);
    } catch (const CheckpointError& e) {
        throw CheckpointError(path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Attack config files

namespace {

bool parse_bool(std::string_view v, bool& out) {
    if (v == "1" || v == "true" || v == "on") return out = true, true;
    if (v == "0" || v == "false" || v == "off") return out = false, true;
    return false;
}

std::string joints_to_string(const std::vector<bool>& joints) {
    if (joints.empty() || std::all_of(joints.begin(), joints.end(), [](bool b) { return b; })) return "all";
    std::string s;
    for (std::size_t j = 0; j < joints.size(); ++j) {
        if (!joints[j]) continue;
        if (!s.empty()) s += ',';
        s += std::to_string(j);
    }
    return s;
}

} // namespace

AttackConfig parse_attack_config(const std::string& text_in, const SkeletonTopology& topo) {
    AttackConfig c;
    std::istringstream in(text_in);
    text::LineReader reader(in);
    std::string line;
    std::optional<std::string> schedule;
    std::optional<double> epsilon;
    std::string clip_kind;
    auto fail = [&](const std::string& m) {
        throw std::invalid_argument("attack config:" + std::to_string(reader.number()) + ": " + m);
    };
    while (reader.next(line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) fail("expected key=value");
        const std::string key(text::trim(std::string_view(line).substr(0, eq)));
        const std::string value(text::trim(std::string_view(line).substr(eq + 1)));
        auto number = [&]() {
            double v = 0.0;
            if (!text::parse_number(std::string_view(value), v)) fail("bad number for " + key);
            return v;
        };
        auto integer = [&]() {
            long v = 0;
            if (!text::parse_number(std::string_view(value), v)) fail("bad integer for " + key);
            return v;
        };
        auto flag = [&]() {
            bool b = false;
            if (!parse_bool(value, b)) fail("bad boolean for " + key);
            return b;
        };
        try {
            if (key == "mode") c.mode = parse_attack_mode(value);
            else if (key == "clip") clip_kind = value;
            else if (key == "epsilon") epsilon = number();
            else if (key == "schedule") schedule = value;
            else if (key == "joints") c.active_joints = value == "all" ? std::vector<bool>{} : parse_joint_mask(value, topo);
            else if (key == "channels") {
                c.channels.clear();
                for (auto tok : text::split_ws(std::string(value.begin(), value.end()) == "all" ? "" : value)) {
                    for (char ch : tok) {
                        if (ch == ',') continue;
                        if (ch != '0' && ch != '1') fail("channels take 0/1 flags");
                        c.channels.push_back(ch == '1');
                    }
                }
            } else if (key == "lambda") c.lambda = number();
            else if (key == "alpha") c.alpha = number();
            else if (key == "iterations") c.max_iterations = static_cast<int>(integer());
            else if (key == "target") {
                if (value == "least_likely") {
                    c.target_policy = TargetPolicy::least_likely;
                } else {
                    c.target_policy = TargetPolicy::explicit_class;
                    c.target_class = static_cast<int>(integer());
                }
            } else if (key == "early_stop") {
                if (value == "none") c.early_stop.reset();
                else c.early_stop = number();
            } else if (key == "seed") {
                if (!text::parse_number(std::string_view(value), c.seed)) fail("bad seed");
            } else if (key == "smoothness") c.smoothness = flag();
            else if (key == "gan") c.gan = flag();
            else if (key == "ssr") c.ssr = flag();
            else fail("unknown key '" + key + "'");
        } catch (const SkeletonError& e) {
            fail(e.what());
        }
    }
    if (clip_kind == "hierarchical" || (clip_kind.empty() && schedule)) {
        if (!schedule) fail("hierarchical clipping needs a schedule");
        c.clip = parse_clip_schedule(*schedule, topo);
    } else if (clip_kind == "global" || clip_kind.empty()) {
        c.clip = ClipSpec::global(epsilon.value_or(c.clip.epsilon));
    } else {
        fail("clip must be global or hierarchical");
    }
    c.validate(topo);
    return c;
}

std::string format_attack_config(const AttackConfig& c) {
    std::ostringstream out;
    out << "mode=" << to_string(c.mode) << '\n';
    if (c.clip.kind == ClipSpec::Kind::global) {
        out << "clip=global\nepsilon=" << text::format_double(c.clip.epsilon) << '\n';
    } else {
        out << "clip=hierarchical\nschedule=";
        for (Index j = 0; j < c.clip.per_joint.size(); ++j) {
            out << (j ? "," : "") << j << ':' << text::format_double(c.clip.per_joint[j]);
        }
        out << '\n';
    }
    out << "joints=" << joints_to_string(c.active_joints) << '\n';
    out << "channels=";
    if (c.channels.empty()) out << "all";
    for (std::size_t i = 0; i < c.channels.size(); ++i) out << (i ? "," : "") << (c.channels[i] ? 1 : 0);
    out << "\nlambda=" << text::format_double(c.lambda) << "\nalpha=" << text::format_double(c.alpha)
        << "\niterations=" << c.max_iterations << "\ntarget="
        << (c.target_policy == TargetPolicy::least_likely ? std::string("least_likely") : std::to_string(c.target_class))
        << "\nearly_stop=" << (c.early_stop ? text::format_double(*c.early_stop) : std::string("none"))
        << "\nseed=" << c.seed << "\nsmoothness=" << (c.smoothness ? 1 : 0) << "\ngan=" << (c.gan ? 1 : 0)
        << "\nssr=" << (c.ssr ? 1 : 0) << '\n';
    return out.str();
}

AttackConfig load_attack_config(const fs::path& path, const SkeletonTopology& topo) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open attack config " + path.string());
    std::ostringstream s;
    s << in.rdbuf();
    return parse_attack_config(s.str(), topo);
}

// ---------------------------------------------------------------------------
// Experiments

namespace {

std::string cell_name_for_epsilon(double eps) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "eps_%.6g", eps);
    return buf;
}

void write_text(const fs::path& path, const std::string& s) { write_file_atomic(path, s); }

} // namespace

ExperimentResult run_attack_experiment(const ExperimentSpec& spec) {
    for (const auto& [what, p] : {std::pair{"manifest", spec.manifest}, std::pair{"checkpoint", spec.checkpoint}}) {
        if (!fs::exists(p)) throw std::invalid_argument(std::string("experiment: ") + what + " " + p.string() + " does not exist");
    }
    if (!spec.attack_config.empty() && !fs::exists(spec.attack_config)) {
        throw std::invalid_argument("experiment: attack config " + spec.attack_config.string() + " does not exist");
    }
    if (spec.output_dir.empty()) throw std::invalid_argument("experiment: no output directory");

    const LabeledDataset data = load_dataset(spec.manifest);
    const Classifier model = load_checkpoint(spec.checkpoint);
    if (model.config.classes != data.classes() || !(model.topology == data.topology)) {
        throw std::invalid_argument("experiment: model does not match the dataset's topology or class set");
    }
    const AttackConfig base = spec.attack_config.empty() ? spec.config : load_attack_config(spec.attack_config, data.topology);

    std::vector<LabeledSample> samples;
    for (const auto& s : data.test) {
        if (!spec.sample_ids.empty() && std::find(spec.sample_ids.begin(), spec.sample_ids.end(), s.id) == spec.sample_ids.end()) {
            continue;
        }
        samples.push_back(s);
        if (spec.limit && samples.size() >= *spec.limit) break;
    }
    if (samples.empty()) throw std::invalid_argument("experiment: no test samples to attack");

    std::vector<ExperimentCell> cells;
    if (spec.protocol == "single") {
        cells.push_back({"attack", base, {}});
    } else if (spec.protocol == "sweep") {
        if (spec.epsilons.empty()) throw std::invalid_argument("experiment: sweep needs epsilon values");
        for (double eps : spec.epsilons) {
            AttackConfig c = base;
            c.clip = ClipSpec::global(eps);
            c.validate(data.topology);
            cells.push_back({cell_name_for_epsilon(eps), c, {}});
        }
    } else if (spec.protocol == "regions") {
        std::vector<std::string> regions = spec.regions;
        if (regions.empty()) regions = {"head_torso", "arms", "hips_knees", "ankles"};
        for (const auto& region : regions) {
            AttackConfig c = base;
            c.active_joints = parse_joint_mask(region, data.topology);
            if (c.mode == AttackMode::advanced) {
                c.clip = incremental_schedule(data.topology, c.active_joints);
            } else {
                c.mode = AttackMode::localized;
            }
            c.validate(data.topology);
            cells.push_back({region, c, {}});
        }
    } else {
        throw std::invalid_argument("experiment: unknown protocol '" + spec.protocol + "'");
    }

    fs::create_directories(spec.output_dir);
    json meta;
    meta["version"] = kVersion;
    meta["protocol"] = spec.protocol;
    meta["seed"] = spec.seed;
    meta["manifest"] = spec.manifest.string();
    meta["checkpoint"] = spec.checkpoint.string();
    meta["attack_config_file"] = spec.attack_config.string();
    meta["model"] = config_to_json(model.config);
    meta["classes"] = data.class_names;
    json ids = json::array();
    for (const auto& s : samples) ids.push_back(s.id);
    meta["samples"] = std::move(ids);
    meta["limit"] = spec.limit ? json(*spec.limit) : json(nullptr);
    json cell_meta = json::array();
    for (const auto& cell : cells) cell_meta.push_back({{"name", cell.name}, {"config", format_attack_config(cell.config)}});
    meta["cells"] = std::move(cell_meta);
    write_text(spec.output_dir / "metadata.json", meta.dump(2) + "\n");

    std::optional<RealSampleProvider> real;
    if (std::any_of(cells.begin(), cells.end(), [](const ExperimentCell& c) { return c.config.gan; })) {
        if (data.train.empty()) throw std::invalid_argument("experiment: GAN regularisation needs a train split");
        real.emplace(data.train, data.topology);
    }

    ExperimentResult result;
    for (auto& cell : cells) {
        const SuiteResult suite = attack_samples(model, samples, cell.config, real ? &*real : nullptr, spec.seed);
        const fs::path dir = spec.output_dir / cell.name;
        fs::create_directories(dir / "samples");
        Manifest manifest;
        manifest.class_names = data.class_names;
        for (std::size_t i = 0; i < samples.size(); ++i) {
            const AttackResult& r = suite.results[i];
            write_text(dir / "samples" / (samples[i].id + ".json"), result_to_json(samples[i], r).dump(2) + "\n");
            if (suite.report.rows[i].status != "ok") continue;
            save_sequence(dir / "samples" / (samples[i].id + ".seq"), r.perturbed, data.topology);
            manifest.records.push_back({"test", samples[i].label, samples[i].id, fs::path("samples") / (samples[i].id + ".seq")});
        }
        save_manifest(dir / "manifest.txt", manifest);
        write_text(dir / "report.json", report_json(suite.report));
        cell.report = suite.report;
        if (static_cast<double>(suite.report.errors) > 0.1 * static_cast<double>(suite.report.samples)) result.exit_status = 1;
    }

    if (cells.size() > 1) {
        std::ostringstream csv;
        const bool sweep = spec.protocol == "sweep";
        csv << (sweep ? "epsilon" : "region")
            << ",samples,fooling_rate,targeted_rate,mean_iterations,mean_displacement_pre_ssr,mean_displacement_post_ssr,"
               "mean_bone_drift,errors\n";
        for (std::size_t k = 0; k < cells.size(); ++k) {
            const FoolingReport& r = cells[k].report;
            csv << (sweep ? text::format_double(spec.epsilons[k]) : cells[k].name) << ',' << r.samples << ','
                << text::format_double(r.fooling_rate) << ',' << text::format_double(r.targeted_rate) << ','
                << text::format_double(r.mean_iterations) << ',' << text::format_double(r.mean_displacement_pre_ssr) << ','
                << text::format_double(r.mean_displacement_post_ssr) << ',' << text::format_double(r.mean_bone_drift)
                << ',' << r.errors << '\n';
        }
        write_text(spec.output_dir / (sweep ? "sweep.csv" : "regions.csv"), csv.str());
    }
    result.cells = std::move(cells);
    return result;
}

// ---------------------------------------------------------------------------
// Gradient checks

std::vector<GradCheckEntry> run_gradient_checks(std::uint64_t seed) {
    const RestPose pose = humanoid15_rest_pose();
    const SkeletonTopology& topo = pose.topology;
    const auto suite = default_motion_suite();
    std::mt19937_64 rng(seed);
    SampleVariation v;
    v.shift = 0.25;
    const SkeletonSequence seq = synthesize(pose, suite.front(), 6, v, 0.02, rng);

    ClassifierConfig cfg;
    cfg.classes = 3;
    cfg.layers = 2;
    cfg.base_width = 4;
    cfg.double_at = {1};
    cfg.temporal_kernel = 3;
    cfg.seed = seed;
    // Zero-initialised biases put dead units exactly on the ReLU kink, where
    // no derivative exists; jitter every parameter to check at a generic point.
    auto jitter = [&rng](const std::vector<ad::Value>& params) {
        std::normal_distribution<double> n(0.0, 0.05);
        for (ad::Value p : params) {
            for (Index i = 0; i < p.size(); ++i) p.data()[i] += n(rng);
        }
    };
    const Classifier model = make_classifier(cfg, topo);
    jitter(model.params.all());

    std::vector<GradCheckEntry> out;
    ad::GradCheckOptions opts;
    opts.seed = seed;

    {
        std::vector<ad::Value> params = {
            ad::Value::parameter(input_tensor(seq).shape(), input_tensor(seq).data())};
        const Classifier frozen = clone(model, false);
        out.push_back({"classifier cross-entropy / input",
                       ad::gradient_check([&] { return ad::cross_entropy(logits(frozen, params[0]), 1); }, params, opts)});
    }
    {
        Classifier trainable = clone(model, true);
        std::vector<ad::Value> params = trainable.params.all();
        const ad::Value x = input_tensor(seq);
        out.push_back({"classifier cross-entropy / parameters",
                       ad::gradient_check([&] { return ad::cross_entropy(logits(trainable, x), 2); }, params, opts)});
    }
    const ad::Value coords_init = ad::Value::parameter({seq.frames(), seq.joints(), seq.dims},
                                                       Eigen::Map<const ad::Array>(seq.coords.data(), seq.coords.size()));
    {
        std::vector<ad::Value> params = {coords_init.detach()};
        params[0].set_requires_grad(true);
        out.push_back({"smoothness loss", ad::gradient_check([&] { return smoothness_loss(params[0]); }, params, opts)});
    }
    const Discriminator disc = make_discriminator(static_cast<int>(topo.major_bones().size()), seed);
    jitter(disc.parameters());
    {
        std::vector<ad::Value> params = {coords_init.detach()};
        params[0].set_requires_grad(true);
        for (const auto& w : disc.parameters()) params.push_back(w);
        out.push_back({"attacker adversarial loss",
                       ad::gradient_check([&] { return attacker_adv_loss(disc, bone_angle_features(params[0], topo)); }, params,
                                          opts)});
    }
    {
        std::vector<ad::Value> params = {coords_init.detach()};
        params[0].set_requires_grad(true);
        for (const auto& w : disc.parameters()) params.push_back(w);
        SampleVariation v2;
        v2.shift = 0.6;
        const ad::Value real = bone_angle_features(synthesize(pose, suite[1], 6, v2, 0.02, rng), topo);
        out.push_back({"discriminator adversarial loss",
                       ad::gradient_check(
                           [&] { return discriminator_adv_loss(disc, real, bone_angle_features(params[0], topo)); }, params,
                           opts)});
    }
    return out;
}

} // namespace ciasa
