#include "dkn/tensor.hpp"

namespace dkn {

template struct Tensor<float>;
template struct Tensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace dkn
