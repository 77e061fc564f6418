#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "lorarank/error.hpp"

namespace lorarank {

// The search's output artifact: one chosen rank per adapted module, in
// module order. Alongside each rank the exporter records the final
// post-softmax alpha distribution and the search space.
struct RankMap {
    struct Entry {
        std::string module;
        std::size_t rank = 0;
        std::vector<double> alphas;           // post-softmax, may be empty
        std::vector<std::size_t> search_space;  // may be empty
    };

    std::vector<Entry> entries;

    void add(Entry entry) {
        for (const Entry& e : entries) {
            if (e.module == entry.module) {
                throw ValueError("rank map: duplicate module '" + entry.module + "'");
            }
        }
        entries.push_back(std::move(entry));
    }

    std::size_t size() const { return entries.size(); }
    bool empty() const { return entries.empty(); }

    std::size_t rank_of(const std::string& module) const {
        for (const Entry& e : entries)
            if (e.module == module) return e.rank;
        throw ValueError("rank map: module '" + module + "' not present");
    }

    std::map<std::string, std::size_t> as_map() const {
        std::map<std::string, std::size_t> out;
        for (const Entry& e : entries) out[e.module] = e.rank;
        return out;
    }

    bool same_assignment(const RankMap& other) const {
        return as_map() == other.as_map();
    }
};

}  // namespace lorarank
