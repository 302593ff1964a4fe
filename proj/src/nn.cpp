#include "genrec/nn.hpp"

namespace genrec {

template class Tape<float>;
template class Tape<double>;

}  // namespace genrec
