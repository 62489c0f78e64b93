#pragma once

#include <cstddef>
#include <stdexcept>
#include <vector>

namespace dilo {

/// Boundary cells of an n x n cell grid in counterclockwise order, starting
/// at the bottom-left cell. 4(n-1) cells; corners appear once.
inline std::vector<std::size_t> boundary_cells_ccw(std::size_t n) {
    if (n < 2) throw std::runtime_error("boundary_cells_ccw: grid must be at least 2x2");
    std::vector<std::size_t> cells;
    cells.reserve(4 * (n - 1));
    for (std::size_t c = 0; c < n; ++c) cells.push_back(0 * n + c);          // bottom
    for (std::size_t r = 1; r < n; ++r) cells.push_back(r * n + (n - 1));    // right
    for (std::size_t c = n - 1; c-- > 0;) cells.push_back((n - 1) * n + c);  // top
    for (std::size_t r = n - 2; r >= 1; --r) cells.push_back(r * n + 0);     // left
    return cells;
}

}  // namespace dilo
