#pragma once

#include <cstddef>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "lorarank/error.hpp"

namespace lorarank {

// Centered window [(r_max-r)/2, (r_max+r)/2) embedding a rank-r candidate
// inside the maximal rank. Windows of ascending ranks are nested.
inline std::pair<std::size_t, std::size_t> slice_window(std::size_t r_max, std::size_t r) {
    if (r < 1 || r > r_max) {
        throw ValueError("slice_window: rank " + std::to_string(r) + " outside [1, " +
                         std::to_string(r_max) + "]");
    }
    if ((r_max - r) % 2 != 0) {
        throw ValueError("slice_window: r_max - r = " + std::to_string(r_max - r) +
                         " is odd; use a search space with even offsets so windows stay "
                         "centered");
    }
    const std::size_t start = (r_max - r) / 2;
    return {start, start + r};
}

// Ordered candidate ranks sharing one maximal-rank weight pair.
class RankSearchSpace {
  public:
    explicit RankSearchSpace(std::vector<std::size_t> ranks) : ranks_(std::move(ranks)) {
        if (ranks_.empty()) throw ValueError("rank search space: empty");
        for (std::size_t i = 0; i < ranks_.size(); ++i) {
            if (ranks_[i] == 0) throw ValueError("rank search space: ranks must be positive");
            if (i > 0 && ranks_[i] <= ranks_[i - 1]) {
                throw ValueError("rank search space: ranks must be strictly ascending, got " +
                                 std::to_string(ranks_[i - 1]) + " before " +
                                 std::to_string(ranks_[i]));
            }
        }
        for (std::size_t r : ranks_) slice_window(r_max(), r);  // validates even offsets
        if (ranks_.size() == 1) {
            std::clog << "note: singleton rank search space {" << ranks_[0]
                      << "} degenerates to plain LoRA\n";
        }
    }

    const std::vector<std::size_t>& ranks() const { return ranks_; }
    std::size_t size() const { return ranks_.size(); }
    std::size_t r_max() const { return ranks_.back(); }

    bool contains(std::size_t r) const {
        for (std::size_t v : ranks_)
            if (v == r) return true;
        return false;
    }

    std::size_t index_of(std::size_t r) const {
        for (std::size_t i = 0; i < ranks_.size(); ++i)
            if (ranks_[i] == r) return i;
        throw ValueError("rank " + std::to_string(r) + " not in search space");
    }

    std::pair<std::size_t, std::size_t> window(std::size_t r) const {
        if (!contains(r)) throw ValueError("rank " + std::to_string(r) + " not in search space");
        return slice_window(r_max(), r);
    }

    bool operator==(const RankSearchSpace& other) const { return ranks_ == other.ranks_; }

  private:
    std::vector<std::size_t> ranks_;
};

}  // namespace lorarank
