#pragma once

#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lorarank/error.hpp"
#include "lorarank/rank_map.hpp"

// Exact LoRA parameter counting over an architecture descriptor: per module
// the trainable count is r * (in_dim + out_dim).

namespace lorarank {

inline const std::set<std::string>& known_towers() {
    static const std::set<std::string> towers = {"vision-local", "vision-global",
                                                 "language-self", "language-cross"};
    return towers;
}

inline const std::set<std::string>& known_groups() {
    static const std::set<std::string> groups = {"Q", "K", "V", "O", "G",
                                                 "U", "D", "FC1", "FC2"};
    return groups;
}

struct ArchModule {
    std::string name;
    std::size_t in_dim = 0;
    std::size_t out_dim = 0;
    std::string tower;
    std::string group;
};

struct ArchitectureDescriptor {
    std::string model_name;
    std::uint64_t total_params = 0;
    std::vector<ArchModule> modules;

    void validate() const {
        if (total_params == 0) {
            throw ValueError("descriptor: total_params must be positive");
        }
        if (modules.empty()) throw ValueError("descriptor: module list is empty");
        std::set<std::string> seen;
        for (const ArchModule& m : modules) {
            if (m.name.empty()) throw ValueError("descriptor: module with empty name");
            if (!seen.insert(m.name).second) {
                throw ValueError("descriptor: duplicate module name '" + m.name + "'");
            }
            if (m.in_dim == 0 || m.out_dim == 0) {
                throw ValueError("descriptor: module '" + m.name + "' has non-positive dims");
            }
            if (!known_towers().count(m.tower)) {
                throw ValueError("descriptor: module '" + m.name + "' has unknown tower '" +
                                 m.tower + "'");
            }
            if (!known_groups().count(m.group)) {
                throw ValueError("descriptor: module '" + m.name + "' has unknown group '" +
                                 m.group + "'");
            }
        }
    }
};

struct CountReport {
    std::vector<std::pair<std::string, std::uint64_t>> per_module;
    std::map<std::string, std::uint64_t> per_group;
    std::map<std::string, std::uint64_t> per_tower;
    std::uint64_t total = 0;
    double fraction = 0.0;  // of the base parameter count
};

// Group filter: empty selects every group; labels are the Table-style
// Q,K,V,O,G,U,D,FC1,FC2 (case-insensitive).
inline std::set<std::string> normalize_groups(const std::vector<std::string>& groups) {
    std::set<std::string> out;
    for (std::string g : groups) {
        for (char& c : g) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
        if (!known_groups().count(g)) {
            throw ValueError("unknown adapter group '" + g + "'");
        }
        out.insert(g);
    }
    return out;
}

namespace detail {

template <typename RankFor>
CountReport count_impl(const ArchitectureDescriptor& desc, RankFor&& rank_for,
                       const std::set<std::string>& groups) {
    desc.validate();
    CountReport report;
    for (const ArchModule& m : desc.modules) {
        if (!groups.empty() && !groups.count(m.group)) continue;
        const std::size_t r = rank_for(m);
        if (r == 0) throw ValueError("module '" + m.name + "': rank must be >= 1");
        const std::uint64_t count = static_cast<std::uint64_t>(r) * (m.in_dim + m.out_dim);
        report.per_module.emplace_back(m.name, count);
        report.per_group[m.group] += count;
        report.per_tower[m.tower] += count;
        report.total += count;
    }
    report.fraction = static_cast<double>(report.total) / static_cast<double>(desc.total_params);
    return report;
}

}  // namespace detail

inline CountReport lora_param_count(const ArchitectureDescriptor& desc, std::size_t uniform_rank,
                                    const std::set<std::string>& groups = {}) {
    return detail::count_impl(desc, [&](const ArchModule&) { return uniform_rank; }, groups);
}

inline CountReport lora_param_count(const ArchitectureDescriptor& desc, const RankMap& ranks,
                                    const std::set<std::string>& groups = {}) {
    const auto map = ranks.as_map();
    std::vector<std::string> missing;
    for (const ArchModule& m : desc.modules) {
        if (!groups.empty() && !groups.count(m.group)) continue;
        if (!map.count(m.name)) missing.push_back(m.name);
    }
    if (!missing.empty()) {
        std::string joined;
        for (std::size_t i = 0; i < missing.size() && i < 8; ++i) {
            if (i) joined += ", ";
            joined += missing[i];
        }
        if (missing.size() > 8) joined += ", ...";
        throw ValueError("rank map missing " + std::to_string(missing.size()) +
                         " modules: " + joined);
    }
    return detail::count_impl(desc, [&](const ArchModule& m) { return map.at(m.name); }, groups);
}

inline double compression_ratio(const CountReport& a, const CountReport& b) {
    if (b.total == 0) throw ValueError("compression_ratio: zero denominator");
    return static_cast<double>(a.total) / static_cast<double>(b.total);
}

inline double compression_ratio(std::uint64_t total_a, std::uint64_t total_b) {
    if (total_b == 0) throw ValueError("compression_ratio: zero denominator");
    return static_cast<double>(total_a) / static_cast<double>(total_b);
}

// Table-style display: one decimal.
inline std::string format_ratio(double ratio) {
    std::ostringstream out;
    out.setf(std::ios::fixed);
    out.precision(1);
    out << ratio;
    return out.str();
}

inline std::string format_millions(std::uint64_t count) {
    std::ostringstream out;
    out.setf(std::ios::fixed);
    out.precision(1);
    out << (static_cast<double>(count) / 1e6) << "M";
    return out.str();
}

inline std::string format_percent(double fraction) {
    std::ostringstream out;
    out.setf(std::ios::fixed);
    out.precision(1);
    out << (fraction * 100.0) << "%";
    return out.str();
}

inline ArchitectureDescriptor load_descriptor(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open descriptor: " + path);
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw ValueError("descriptor " + path + ": parse failure: " + e.what());
    }
    ArchitectureDescriptor desc;
    try {
        const int version = doc.at("schema_version").get<int>();
        if (version != 1) {
            throw ValueError("descriptor " + path + ": unsupported schema_version " +
                             std::to_string(version));
        }
        desc.model_name = doc.at("model_name").get<std::string>();
        desc.total_params = doc.at("total_params").get<std::uint64_t>();
        for (const auto& item : doc.at("modules")) {
            ArchModule m;
            m.name = item.at("name").get<std::string>();
            m.in_dim = item.at("in_dim").get<std::size_t>();
            m.out_dim = item.at("out_dim").get<std::size_t>();
            m.tower = item.at("tower").get<std::string>();
            m.group = item.at("group").get<std::string>();
            desc.modules.push_back(std::move(m));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValueError("descriptor " + path + ": missing or mistyped field: " + e.what());
    }
    desc.validate();
    return desc;
}

}  // namespace lorarank
