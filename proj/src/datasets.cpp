#include "ciasa/datasets.hpp"

#include "text_util.hpp"
#include "topology_io.hpp"

#include <Eigen/Geometry>

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <unistd.h>

namespace ciasa {

namespace {

enum : int {
    torso, neck, head,
    l_shoulder, l_elbow, l_wrist,
    r_shoulder, r_elbow, r_wrist,
    l_hip, l_knee, l_ankle,
    r_hip, r_knee, r_ankle,
};

constexpr double kTwoPi = 2.0 * std::numbers::pi;

Eigen::Matrix3d euler(const Eigen::Vector3d& a) {
    return (Eigen::AngleAxisd(a.z(), Eigen::Vector3d::UnitZ()) * Eigen::AngleAxisd(a.y(), Eigen::Vector3d::UnitY()) *
            Eigen::AngleAxisd(a.x(), Eigen::Vector3d::UnitX()))
        .toRotationMatrix();
}

double evaluate(const SinusoidTerm& s, double time, double shift) {
    return s.amplitude * std::sin(kTwoPi * s.frequency * (time + shift) + s.phase);
}

[[noreturn]] void parse_error(const std::string& where, int line, const std::string& what) {
    throw FormatError(where + ":" + std::to_string(line) + ": " + what);
}

} // namespace

RestPose humanoid15_rest_pose() {
    RestPose pose{humanoid15(), Eigen::MatrixX3d::Zero(15, 3)};
    auto& o = pose.offsets;
    o.row(torso) << 0.0, 0.54, 0.0;
    o.row(neck) << 0.0, 0.25, 0.0;
    o.row(head) << 0.0, 0.17, 0.0;
    o.row(l_shoulder) << 0.17, -0.03, 0.0;
    o.row(l_elbow) << 0.0, -0.27, 0.0;
    o.row(l_wrist) << 0.0, -0.25, 0.0;
    o.row(r_shoulder) << -0.17, -0.03, 0.0;
    o.row(r_elbow) << 0.0, -0.27, 0.0;
    o.row(r_wrist) << 0.0, -0.25, 0.0;
    o.row(l_hip) << 0.09, -0.06, 0.0;
    o.row(l_knee) << 0.0, -0.24, 0.0;
    o.row(l_ankle) << 0.0, -0.24, 0.0;
    o.row(r_hip) << -0.09, -0.06, 0.0;
    o.row(r_knee) << 0.0, -0.24, 0.0;
    o.row(r_ankle) << 0.0, -0.24, 0.0;
    return pose;
}

namespace {

// Held pose component: sin(pi/2) is 1 at every frame.
SinusoidTerm constant_term(int joint, int axis, double value) { return {joint, axis, value, 0.0, std::numbers::pi / 2.0}; }

std::vector<MotionClassSpec> raw_motion_suite() {
    auto blank = [](std::string name) {
        MotionClassSpec s;
        s.name = std::move(name);
        s.base_angles = Eigen::MatrixX3d::Zero(15, 3);
        s.noise = 0.005;
        return s;
    };
    std::vector<MotionClassSpec> suite;

    auto wave = blank("arm_wave");
    wave.base_angles.row(r_elbow) << 0.0, 0.0, -2.3;
    wave.rotations = {{r_wrist, 2, 0.6, 2.0, 0.0}, {r_elbow, 2, 0.2, 2.0, 0.5}};
    suite.push_back(wave);

    auto squat = blank("squat");
    squat.base_angles.row(l_elbow) << -1.2, 0.0, 0.0;
    squat.base_angles.row(r_elbow) << -1.2, 0.0, 0.0;
    squat.rotations = {
        constant_term(l_knee, 0, 0.7),   {l_knee, 0, 0.7, 1.5, 0.0},   constant_term(r_knee, 0, 0.7),
        {r_knee, 0, 0.7, 1.5, 0.0},      constant_term(l_ankle, 0, -1.4), {l_ankle, 0, -1.4, 1.5, 0.0},
        constant_term(r_ankle, 0, -1.4), {r_ankle, 0, -1.4, 1.5, 0.0}, {torso, 0, 0.2, 1.5, 0.0},
    };
    squat.translation = {constant_term(0, 1, -0.07), {0, 1, -0.07, 1.5, 0.0}};
    suite.push_back(squat);

    auto kick = blank("kick");
    kick.rotations = {constant_term(r_knee, 0, 0.3), {r_knee, 0, 0.9, 1.5, 0.0}, {r_ankle, 0, 0.5, 1.5, 1.0},
                      {l_elbow, 0, 0.3, 1.5, 0.0}, {r_elbow, 0, -0.3, 1.5, 0.0}};
    suite.push_back(kick);

    auto twist = blank("twist");
    twist.base_angles.row(l_elbow) << 0.0, 0.0, 1.4;
    twist.base_angles.row(r_elbow) << 0.0, 0.0, -1.4;
    twist.rotations = {{torso, 1, 0.7, 1.5, 0.0}};
    suite.push_back(twist);

    auto sway = blank("idle_sway");
    sway.rotations = {{torso, 2, 0.06, 1.0, 0.0}, {head, 0, 0.1, 1.0, 1.0}};
    sway.translation = {{0, 0, 0.04, 1.0, 0.0}};
    suite.push_back(sway);
    return suite;
}

} // namespace

MotionClassSpec scale_motion(MotionClassSpec spec, double factor) {
    spec.base_angles *= factor;
    for (auto& t : spec.rotations) t.amplitude *= factor;
    for (auto& t : spec.translation) t.amplitude *= factor;
    return spec;
}

double peak_displacement(const RestPose& pose, const MotionClassSpec& spec, int frames) {
    MotionClassSpec neutral;
    neutral.base_angles = Eigen::MatrixX3d::Zero(pose.topology.joints(), 3);
    std::mt19937_64 rng(0);
    const SkeletonSequence ref = synthesize(pose, neutral, frames, {}, 0.0, rng);
    const SkeletonSequence seq = synthesize(pose, spec, frames, {}, 0.0, rng);
    return (seq.coords - ref.coords).cwiseAbs().maxCoeff();
}

std::vector<MotionClassSpec> balance_motion_suite(std::vector<MotionClassSpec> suite, const RestPose& pose, double target,
                                                  int frames) {
    if (!(target > 0.0)) throw std::invalid_argument("balance_motion_suite: target must be positive");
    for (auto& spec : suite) {
        double lo = 0.0, hi = 5.0;
        for (int it = 0; it < 40; ++it) {
            const double mid = 0.5 * (lo + hi);
            (peak_displacement(pose, scale_motion(spec, mid), frames) < target ? lo : hi) = mid;
        }
        spec = scale_motion(spec, lo);
    }
    return suite;
}

std::vector<MotionClassSpec> default_motion_suite() {
    // Each class is scaled so its largest joint excursion from the neutral
    // stance is the same; otherwise the big movers are far from any boundary.
    static const std::vector<MotionClassSpec> suite = balance_motion_suite(raw_motion_suite(), humanoid15_rest_pose(), 0.04);
    return suite;
}

SampleVariation draw_variation(const VariationRanges& ranges, int joints, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    SampleVariation v;
    v.shift = unit(rng);
    if (ranges.amplitude > 0.0) v.amplitude_scale = 1.0 + ranges.amplitude * (2.0 * unit(rng) - 1.0);
    if (ranges.yaw > 0.0) v.yaw = ranges.yaw * (2.0 * unit(rng) - 1.0);
    if (ranges.posture > 0.0) {
        v.posture.resize(joints, 3);
        for (int j = 0; j < joints; ++j) {
            for (int a = 0; a < 3; ++a) v.posture(j, a) = ranges.posture * gauss(rng);
        }
    }
    return v;
}

SkeletonSequence synthesize(const RestPose& pose, const MotionClassSpec& spec, int frames,
                            const SampleVariation& variation, double noise, std::mt19937_64& rng) {
    const SkeletonTopology& topo = pose.topology;
    const int n = topo.joints();
    if (pose.offsets.rows() != n || spec.base_angles.rows() != n) {
        throw SkeletonError("synthesize: motion spec '" + spec.name + "' does not match the rest pose");
    }
    for (const Bone& b : topo.bones()) {
        if (pose.offsets.row(b.child).norm() == 0.0) {
            throw SkeletonError("synthesize: zero-length bone " + topo.names()[static_cast<std::size_t>(b.parent)] + "-" +
                                topo.names()[static_cast<std::size_t>(b.child)] + " in rest pose");
        }
    }
    if (frames < 1) throw SkeletonError("synthesize: frames must be positive");
    if (variation.posture.size() != 0 && variation.posture.rows() != n) {
        throw SkeletonError("synthesize: posture offsets do not match the rest pose");
    }
    const double shift = variation.shift;
    const double gain = variation.amplitude_scale;
    const Eigen::Matrix3d yaw = Eigen::AngleAxisd(variation.yaw, Eigen::Vector3d::UnitY()).toRotationMatrix();
    std::normal_distribution<double> gauss(0.0, 1.0);
    SkeletonSequence seq(frames, n, 3);
    Eigen::MatrixX3d angles(n, 3);
    std::vector<Eigen::Matrix3d> global(static_cast<std::size_t>(n));
    std::vector<Eigen::Vector3d> pos(static_cast<std::size_t>(n));
    for (int t = 0; t < frames; ++t) {
        const double time = static_cast<double>(t) / frames;
        angles = spec.base_angles;
        if (variation.posture.size() != 0) angles += variation.posture;
        for (const SinusoidTerm& s : spec.rotations) angles(s.joint, s.axis) += gain * evaluate(s, time, shift);
        if (noise > 0.0) {
            for (int j = 0; j < n; ++j) {
                for (int a = 0; a < 3; ++a) angles(j, a) += noise * gauss(rng);
            }
        }
        Eigen::Vector3d root = pose.offsets.row(topo.root()).transpose();
        for (const SinusoidTerm& s : spec.translation) root(s.axis) += gain * evaluate(s, time, shift);

        const auto r = static_cast<std::size_t>(topo.root());
        global[r] = yaw * euler(angles.row(topo.root()).transpose());
        pos[r] = yaw * root;
        for (const Bone& b : topo.bones()) {
            const auto p = static_cast<std::size_t>(b.parent);
            const auto c = static_cast<std::size_t>(b.child);
            global[c] = global[p] * euler(angles.row(b.child).transpose());
            pos[c] = pos[p] + global[c] * pose.offsets.row(b.child).transpose();
        }
        for (int j = 0; j < n; ++j) seq.joint(t, j) = pos[static_cast<std::size_t>(j)].transpose();
    }
    return seq;
}

LabeledDataset generate_dataset(const RestPose& pose, const std::vector<MotionClassSpec>& specs,
                                const GenerationOptions& options) {
    if (specs.size() < 2) throw std::invalid_argument("generate_dataset: needs at least 2 classes");
    if (options.train_per_class < 0 || options.test_per_class < 0 ||
        options.train_per_class + options.test_per_class == 0) {
        throw std::invalid_argument("generate_dataset: sample counts must be non-negative and not both zero");
    }
    LabeledDataset data;
    data.topology = pose.topology;
    for (const auto& s : specs) data.class_names.push_back(s.name);

    std::mt19937_64 rng(options.seed);
    auto fill = [&](const std::string& split, int per_class, std::vector<LabeledSample>& out) {
        for (std::size_t c = 0; c < specs.size(); ++c) {
            const double noise = options.noise.value_or(specs[c].noise);
            for (int k = 0; k < per_class; ++k) {
                char id[128];
                std::snprintf(id, sizeof id, "%s_%s_%03d", split.c_str(), specs[c].name.c_str(), k);
                const SampleVariation v = draw_variation(options.variation, pose.topology.joints(), rng);
                out.push_back({id, static_cast<int>(c), synthesize(pose, specs[c], options.frames, v, noise, rng)});
            }
        }
    };
    fill("train", options.train_per_class, data.train);
    fill("test", options.test_per_class, data.test);
    return data;
}

std::vector<bool> mask_channels(const SkeletonSequence& seq, const std::vector<bool>& requested) {
    const auto coords = static_cast<std::size_t>(seq.dims);
    const std::size_t total = coords + (seq.has_confidence() ? 1 : 0);
    std::vector<bool> eligible(total, true);
    for (std::size_t c = 0; c < std::min(requested.size(), total); ++c) eligible[c] = requested[c];
    if (seq.has_confidence()) eligible[coords] = false;
    return eligible;
}

// ---------------------------------------------------------------------------

void write_sequence(std::ostream& out, const SkeletonSequence& seq, const SkeletonTopology& topo) {
    detail::check_against(seq, topo, "write_sequence");
    out << "ciasa-sequence 1\n";
    out << "joints " << seq.joints() << "\nframes " << seq.frames() << "\ndims " << seq.dims << "\nconfidence "
        << (seq.has_confidence() ? 1 : 0) << '\n';
    detail::write_topology(out, topo);
    out << "data\n";
    for (Index t = 0; t < seq.frames(); ++t) {
        for (Index j = 0; j < seq.joints(); ++j) {
            for (Index a = 0; a < seq.dims; ++a) out << (j == 0 && a == 0 ? "" : " ") << text::format_double(seq.joint(t, j)(a));
            if (seq.has_confidence()) out << ' ' << text::format_double((*seq.confidence)(t, j));
        }
        out << '\n';
    }
}

SkeletonSequence read_sequence(std::istream& in, const SkeletonTopology* expected, SkeletonTopology* header_topology) {
    const std::string where = "sequence";
    text::LineReader reader(in);
    std::string line;
    if (!reader.next(line) || text::trim(line) != "ciasa-sequence 1") {
        parse_error(where, reader.number(), "missing or unsupported header (expected 'ciasa-sequence 1')");
    }
    long joints = -1, frames = -1, dims = -1, confidence = -1;
    detail::TopologyFields fields;
    auto read_int = [&](std::string_view tok, long& dst, const char* field) {
        if (!text::parse_number(tok, dst)) parse_error(where, reader.number(), std::string("bad integer for ") + field);
    };
    for (;;) {
        if (!reader.next(line)) parse_error(where, reader.number(), "unexpected end of header");
        const auto tok = text::split_ws(line);
        const std::string key(tok[0]);
        if (key == "data") break;
        if (key == "joints" || key == "frames" || key == "dims" || key == "confidence") {
            if (tok.size() != 2) parse_error(where, reader.number(), "field '" + key + "' takes one value");
            long& dst = key == "joints" ? joints : key == "frames" ? frames : key == "dims" ? dims : confidence;
            read_int(tok[1], dst, key.c_str());
        } else if (!fields.consume(tok, [&](const std::string& m) { parse_error(where, reader.number(), m); })) {
            parse_error(where, reader.number(), "unknown header field '" + key + "'");
        }
    }
    if (joints < 1 || frames < 1 || (dims != 2 && dims != 3) || (confidence != 0 && confidence != 1)) {
        parse_error(where, reader.number(), "header needs joints>0, frames>0, dims in {2,3}, confidence in {0,1}");
    }
    if (static_cast<long>(fields.parents.size()) != joints) {
        parse_error(where, reader.number(),
                    "parents lists " + std::to_string(fields.parents.size()) + " joints, header says " + std::to_string(joints));
    }
    SkeletonTopology topo;
    try {
        topo = fields.build();
    } catch (const SkeletonError& e) {
        parse_error(where, reader.number(), e.what());
    }
    if (expected != nullptr) {
        if (expected->joints() != joints) {
            throw FormatError("sequence: expected N=" + std::to_string(expected->joints()) + " joints, file has N=" +
                              std::to_string(joints));
        }
        if (!(*expected == topo)) throw FormatError("sequence: parent links differ from the expected topology");
    }

    SkeletonSequence seq(frames, joints, dims, confidence == 1);
    const long per_joint = dims + confidence;
    for (long t = 0; t < frames; ++t) {
        if (!reader.next(line)) {
            parse_error(where, reader.number(), "expected " + std::to_string(frames) + " frames, got " + std::to_string(t));
        }
        const auto tok = text::split_ws(line);
        if (static_cast<long>(tok.size()) != joints * per_joint) {
            parse_error(where, reader.number(),
                        "frame " + std::to_string(t) + " has " + std::to_string(tok.size()) + " values, expected " +
                            std::to_string(joints * per_joint));
        }
        for (long j = 0; j < joints; ++j) {
            for (long a = 0; a < per_joint; ++a) {
                double v = 0.0;
                if (!text::parse_number(tok[static_cast<std::size_t>(j * per_joint + a)], v)) {
                    parse_error(where, reader.number(),
                                "bad number at frame " + std::to_string(t) + ", joint " + std::to_string(j) +
                                    ", field " + std::to_string(a));
                }
                if (a < dims) {
                    seq.joint(t, j)(a) = v;
                } else {
                    (*seq.confidence)(t, j) = v;
                }
            }
        }
    }
    if (reader.next(line)) parse_error(where, reader.number(), "trailing data after last frame");
    if (header_topology != nullptr) *header_topology = std::move(topo);
    return seq;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp" + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out << contents;
        out.flush();
        if (!out) throw std::runtime_error("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

void save_sequence(const std::filesystem::path& path, const SkeletonSequence& seq, const SkeletonTopology& topo) {
    std::ostringstream os;
    write_sequence(os, seq, topo);
    write_file_atomic(path, os.str());
}

SkeletonSequence load_sequence(const std::filesystem::path& path, const SkeletonTopology* expected,
                               SkeletonTopology* header_topology) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open sequence file " + path.string());
    try {
        return read_sequence(in, expected, header_topology);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------

void save_manifest(const std::filesystem::path& path, const Manifest& manifest) {
    std::ostringstream os;
    os << "ciasa-manifest 1\nclasses";
    for (const auto& c : manifest.class_names) os << ' ' << c;
    os << '\n';
    for (const auto& r : manifest.records) {
        os << r.split << ' ' << r.label << ' ' << r.id << ' ' << r.path.generic_string() << '\n';
    }
    write_file_atomic(path, os.str());
}

Manifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open manifest " + path.string());
    const std::string where = path.string();
    text::LineReader reader(in);
    std::string line;
    if (!reader.next(line) || text::trim(line) != "ciasa-manifest 1") {
        parse_error(where, reader.number(), "missing header 'ciasa-manifest 1'");
    }
    Manifest m;
    if (!reader.next(line)) parse_error(where, reader.number(), "missing classes line");
    auto tok = text::split_ws(line);
    if (tok.empty() || tok[0] != "classes" || tok.size() < 3) {
        parse_error(where, reader.number(), "expected 'classes <name> <name> ...' with at least 2 classes");
    }
    for (std::size_t i = 1; i < tok.size(); ++i) m.class_names.emplace_back(tok[i]);
    while (reader.next(line)) {
        tok = text::split_ws(line);
        if (tok.size() != 4) parse_error(where, reader.number(), "expected '<split> <label> <id> <path>'");
        ManifestRecord r;
        r.split = std::string(tok[0]);
        if (!text::parse_number(tok[1], r.label) || r.label < 0 || r.label >= static_cast<int>(m.class_names.size())) {
            parse_error(where, reader.number(), "label '" + std::string(tok[1]) + "' outside the class set");
        }
        r.id = std::string(tok[2]);
        r.path = std::filesystem::path(std::string(tok[3]));
        if (r.path.is_relative()) r.path = path.parent_path() / r.path;
        m.records.push_back(std::move(r));
    }
    return m;
}

void save_dataset(const std::filesystem::path& dir, const LabeledDataset& data) {
    Manifest m;
    m.class_names = data.class_names;
    auto emit = [&](const std::string& split, const std::vector<LabeledSample>& samples) {
        for (const auto& s : samples) {
            const auto rel = std::filesystem::path(split) / (s.id + ".seq");
            save_sequence(dir / rel, s.sequence, data.topology);
            m.records.push_back({split, s.label, s.id, rel});
        }
    };
    emit("train", data.train);
    emit("test", data.test);
    save_manifest(dir / "manifest.txt", m);
}

LabeledDataset load_dataset(const std::filesystem::path& manifest_path) {
    const Manifest m = load_manifest(manifest_path);
    LabeledDataset data;
    data.class_names = m.class_names;
    bool have_topology = false;
    for (const auto& r : m.records) {
        SkeletonTopology header;
        SkeletonSequence seq = load_sequence(r.path, have_topology ? &data.topology : nullptr, &header);
        if (!have_topology) {
            data.topology = std::move(header);
            have_topology = true;
        }
        LabeledSample sample{r.id, r.label, std::move(seq)};
        if (r.split == "train") {
            data.train.push_back(std::move(sample));
        } else if (r.split == "test") {
            data.test.push_back(std::move(sample));
        } else {
            throw FormatError(manifest_path.string() + ": unknown split '" + r.split + "' for " + r.id);
        }
    }
    return data;
}

} // namespace ciasa
