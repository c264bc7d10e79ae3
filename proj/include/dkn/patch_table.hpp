#pragma once

#include <vector>

#include "dkn/error.hpp"

namespace dkn {

// Square-patch neighbourhood structure on an h x w grid. Centers sit at
// positions (s*a, s*b); each patch spans offsets [-floor((p-1)/2),
// +floor(p/2)] per axis (side exactly p, even sizes lean forward), clipped
// to the grid. With s=1 there is one center per pixel.
struct PatchTable {
    int h = 0, w = 0;
    int p = 1, s = 1;
    std::vector<int> centers;           // flat site index per center
    std::vector<int> member_offsets;    // CSR over centers
    std::vector<int> member_indices;    // flat site indices
    std::vector<int> site_offsets;      // CSR over sites: centers covering a site
    std::vector<int> site_centers;      // center ordinals

    int num_centers() const { return static_cast<int>(centers.size()); }
    int num_sites() const { return h * w; }

    // Members of center ordinal ci.
    const int* members_begin(int ci) const { return member_indices.data() + member_offsets[ci]; }
    const int* members_end(int ci) const { return member_indices.data() + member_offsets[ci + 1]; }
    int member_count(int ci) const { return member_offsets[ci + 1] - member_offsets[ci]; }
};

// Throws CoverageError naming the first pixel no patch covers.
PatchTable build_patch_table(int h, int w, int p, int s);

}  // namespace dkn
