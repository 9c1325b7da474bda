#include "ciasa/skeleton.hpp"

#include <algorithm>
#include <charconv>

namespace ciasa {

SkeletonTopology SkeletonTopology::from_parents(std::vector<int> parents, std::vector<std::string> names,
                                                std::vector<bool> extremity,
                                                std::map<std::string, std::vector<int>> groups) {
    const int n = static_cast<int>(parents.size());
    if (n < 2) throw SkeletonError("topology: needs at least 2 joints, got " + std::to_string(n));
    if (!names.empty() && static_cast<int>(names.size()) != n) {
        throw SkeletonError("topology: " + std::to_string(names.size()) + " names for " + std::to_string(n) + " joints");
    }
    if (!extremity.empty() && static_cast<int>(extremity.size()) != n) {
        throw SkeletonError("topology: extremity flags do not match joint count");
    }

    SkeletonTopology topo;
    topo.parents_ = std::move(parents);
    topo.children_.assign(static_cast<std::size_t>(n), {});
    int roots = 0;
    for (int j = 0; j < n; ++j) {
        const int p = topo.parents_[static_cast<std::size_t>(j)];
        if (p == -1) {
            topo.root_ = j;
            ++roots;
        } else if (p < 0 || p >= n || p == j) {
            throw SkeletonError("topology: joint " + std::to_string(j) + " has invalid parent " + std::to_string(p));
        } else {
            topo.children_[static_cast<std::size_t>(p)].push_back(j);
        }
    }
    if (roots != 1) throw SkeletonError("topology: expected exactly one root, found " + std::to_string(roots));

    // Breadth-first from the root; children lists are already ascending.
    topo.depth_.assign(static_cast<std::size_t>(n), -1);
    topo.order_.push_back(topo.root_);
    topo.depth_[static_cast<std::size_t>(topo.root_)] = 0;
    for (std::size_t k = 0; k < topo.order_.size(); ++k) {
        const int j = topo.order_[k];
        for (int c : topo.children_[static_cast<std::size_t>(j)]) {
            topo.depth_[static_cast<std::size_t>(c)] = topo.depth_[static_cast<std::size_t>(j)] + 1;
            topo.order_.push_back(c);
            topo.bones_.push_back({j, c});
        }
    }
    if (static_cast<int>(topo.order_.size()) != n) {
        throw SkeletonError("topology: " + std::to_string(n - static_cast<int>(topo.order_.size())) +
                            " joints are not reachable from the root (cycle)");
    }

    if (names.empty()) {
        for (int j = 0; j < n; ++j) names.push_back("j" + std::to_string(j));
    }
    topo.names_ = std::move(names);
    if (extremity.empty()) {
        extremity.assign(static_cast<std::size_t>(n), false);
    }
    topo.extremity_ = std::move(extremity);
    for (std::size_t b = 0; b < topo.bones_.size(); ++b) {
        if (!topo.extremity_[static_cast<std::size_t>(topo.bones_[b].child)]) {
            topo.major_bones_.push_back(static_cast<int>(b));
        }
    }
    for (const auto& [name, members] : groups) {
        for (int j : members) {
            if (j < 0 || j >= n) throw SkeletonError("topology: group '" + name + "' names joint " + std::to_string(j));
        }
    }
    topo.groups_ = std::move(groups);
    return topo;
}

int SkeletonTopology::joint_index(const std::string& name) const {
    const auto it = std::find(names_.begin(), names_.end(), name);
    return it == names_.end() ? -1 : static_cast<int>(it - names_.begin());
}

std::vector<int> SkeletonTopology::resolve(const std::string& token) const {
    if (const auto g = groups_.find(token); g != groups_.end()) return g->second;
    if (const int j = joint_index(token); j >= 0) return {j};
    int j = -1;
    const auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), j);
    if (ec == std::errc() && ptr == token.data() + token.size() && j >= 0 && j < joints()) return {j};
    throw SkeletonError("unknown joint or group '" + token + "'");
}

void SkeletonTopology::set_major_bones(std::vector<int> bone_indices) {
    for (int b : bone_indices) {
        if (b < 0 || b >= static_cast<int>(bones_.size())) {
            throw SkeletonError("set_major_bones: bone index " + std::to_string(b) + " out of range");
        }
    }
    major_bones_ = std::move(bone_indices);
}

SkeletonTopology humanoid15() {
    enum : int {
        torso, neck, head,
        l_shoulder, l_elbow, l_wrist,
        r_shoulder, r_elbow, r_wrist,
        l_hip, l_knee, l_ankle,
        r_hip, r_knee, r_ankle,
    };
    std::vector<int> parents = {-1,         torso,   neck,       neck,   l_shoulder,
                                l_elbow,    neck,    r_shoulder, r_elbow, torso,
                                l_hip,      l_knee,  torso,      r_hip,   r_knee};
    std::vector<std::string> names = {"torso",   "neck",       "head",    "l_shoulder", "l_elbow",
                                      "l_wrist", "r_shoulder", "r_elbow", "r_wrist",    "l_hip",
                                      "l_knee",  "l_ankle",    "r_hip",   "r_knee",     "r_ankle"};
    std::vector<bool> extremity(15, false);
    for (int j : {head, l_wrist, r_wrist, l_ankle, r_ankle}) extremity[static_cast<std::size_t>(j)] = true;
    std::map<std::string, std::vector<int>> groups = {
        {"head_torso", {torso, neck, head}},
        {"arms", {l_shoulder, l_elbow, l_wrist, r_shoulder, r_elbow, r_wrist}},
        {"hips_knees", {l_hip, l_knee, r_hip, r_knee}},
        {"ankles", {l_ankle, r_ankle}},
        {"legs", {l_hip, l_knee, l_ankle, r_hip, r_knee, r_ankle}},
        {"hips", {l_hip, r_hip}},
        {"knees", {l_knee, r_knee}},
        {"shoulders", {l_shoulder, r_shoulder}},
        {"elbows", {l_elbow, r_elbow}},
        {"wrists", {l_wrist, r_wrist}},
    };
    return SkeletonTopology::from_parents(std::move(parents), std::move(names), std::move(extremity), std::move(groups));
}

} // namespace ciasa
