#pragma once

// Topology header lines (parents / names / extremity / group) shared by the
// sequence and checkpoint formats.

#include "ciasa/skeleton.hpp"

#include "text_util.hpp"

#include <map>
#include <ostream>
#include <string>
#include <vector>

namespace ciasa::detail {

inline void write_topology(std::ostream& out, const SkeletonTopology& topo) {
    out << "parents";
    for (int p : topo.parents()) out << ' ' << p;
    out << "\nnames";
    for (const auto& nm : topo.names()) out << ' ' << nm;
    out << "\nextremity";
    for (bool e : topo.extremity()) out << ' ' << (e ? 1 : 0);
    out << '\n';
    for (const auto& [name, members] : topo.groups()) {
        out << "group " << name;
        for (int j : members) out << ' ' << j;
        out << '\n';
    }
}

/// Collects topology header lines; `consume` returns false for other keys and
/// throws the message of a malformed value via `fail`.
struct TopologyFields {
    std::vector<int> parents;
    std::vector<std::string> names;
    std::vector<bool> extremity;
    std::map<std::string, std::vector<int>> groups;

    template <typename Fail>
    bool consume(const std::vector<std::string_view>& tok, Fail&& fail) {
        const std::string_view key = tok[0];
        auto ints = [&](std::size_t from, std::vector<int>& dst, const char* field) {
            for (std::size_t i = from; i < tok.size(); ++i) {
                long v = 0;
                if (!text::parse_number(tok[i], v)) fail(std::string("bad integer for ") + field);
                dst.push_back(static_cast<int>(v));
            }
        };
        if (key == "parents") {
            ints(1, parents, "parents");
        } else if (key == "names") {
            for (std::size_t i = 1; i < tok.size(); ++i) names.emplace_back(tok[i]);
        } else if (key == "extremity") {
            for (std::size_t i = 1; i < tok.size(); ++i) extremity.push_back(tok[i] == "1");
        } else if (key == "group") {
            if (tok.size() < 2) fail("group needs a name");
            ints(2, groups[std::string(tok[1])], "group");
        } else {
            return false;
        }
        return true;
    }

    SkeletonTopology build() const { return SkeletonTopology::from_parents(parents, names, extremity, groups); }
};

} // namespace ciasa::detail
