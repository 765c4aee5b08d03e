#include "cprune/matrix.hpp"

#include <cmath>

namespace cprune {

bool Matrix::all_finite() const {
  for (double v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace cprune
