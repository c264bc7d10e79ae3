#pragma once

#include <cstdint>
#include <vector>

#include "dkn/tensor.hpp"

namespace dkn {

// Region ids in the label map.
enum Region : int {
    kBackground = 0,
    kGrayMatter = 1,
    kWhiteMatter = 2,
    kThalamus = 3,
    kPutamen = 4,
    kCaudate = 5,
};

const std::vector<std::string>& region_names();

// One synthetic subject: a short stack of correlated slices with labelled
// regions, an activity map carrying one PET-only uptake gradient, and two
// MR-like contrasts that share the geometry but not that gradient.
struct PhantomMaps {
    int size = 0;
    int slices = 0;
    std::uint64_t seed = 0;
    Tensor<double> labels;    // [H,W], central slice, integer region ids
    Tensor<double> activity;  // [S,H,W]
    Tensor<double> t1;        // [S,H,W]
    Tensor<double> t2;        // [S,H,W]
};

PhantomMaps generate_phantom(std::uint64_t seed, int size, int slices = 3);

}  // namespace dkn
