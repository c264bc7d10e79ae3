#include "dkn/patch_table.hpp"

#include <string>

namespace dkn {

PatchTable build_patch_table(int h, int w, int p, int s) {
    if (h < 1 || w < 1) throw DomainError("build_patch_table: grid dims must be positive");
    if (p < 1) throw DomainError("build_patch_table: patch side must be >= 1");
    if (s < 1 || s > p)
        throw DomainError("build_patch_table: stride must satisfy 1 <= s <= p, got s=" +
                          std::to_string(s) + " p=" + std::to_string(p));

    PatchTable t;
    t.h = h;
    t.w = w;
    t.p = p;
    t.s = s;

    const int lo = -((p - 1) / 2);
    const int hi = p / 2;
    t.member_offsets.push_back(0);
    for (int cy = 0; cy < h; cy += s) {
        for (int cx = 0; cx < w; cx += s) {
            t.centers.push_back(cy * w + cx);
            for (int dy = lo; dy <= hi; ++dy) {
                const int y = cy + dy;
                if (y < 0 || y >= h) continue;
                for (int dx = lo; dx <= hi; ++dx) {
                    const int x = cx + dx;
                    if (x < 0 || x >= w) continue;
                    t.member_indices.push_back(y * w + x);
                }
            }
            t.member_offsets.push_back(static_cast<int>(t.member_indices.size()));
        }
    }

    // Reverse map site -> covering centers, and the coverage check.
    const int n = h * w;
    std::vector<int> counts(n, 0);
    for (int j : t.member_indices) ++counts[j];
    t.site_offsets.assign(n + 1, 0);
    for (int j = 0; j < n; ++j) {
        if (counts[j] == 0)
            throw CoverageError("pixel (" + std::to_string(j / w) + "," + std::to_string(j % w) +
                                ") is not covered by any patch (p=" + std::to_string(p) +
                                ", s=" + std::to_string(s) + ")");
        t.site_offsets[j + 1] = t.site_offsets[j] + counts[j];
    }
    t.site_centers.resize(t.member_indices.size());
    std::vector<int> cursor(t.site_offsets.begin(), t.site_offsets.end() - 1);
    for (int ci = 0; ci < t.num_centers(); ++ci)
        for (const int* j = t.members_begin(ci); j != t.members_end(ci); ++j)
            t.site_centers[cursor[*j]++] = ci;

    return t;
}

}  // namespace dkn
