#pragma once

// Small domain types shared across the detector, alignment modules and data
// pipeline.

#include <stdexcept>

#include "sa3/geometry.hpp"
#include "sa3/tensor.hpp"

namespace sa3 {

enum class Domain { source = 0, target = 1 };

inline double domain_label(Domain d) { return d == Domain::source ? 0.0 : 1.0; }

struct GTInstance {
  Box box;
  int class_id = 0;
};

// Shallow and deep backbone taps, the two alignment points.
struct FeaturePair {
  Tensor shallow;  // [Hs,Ws,Cs], stride 4
  Tensor deep;     // [Hd,Wd,Cd], stride 16
};

// Raised when a loss is fed an image from the wrong domain.
struct ContractViolation : std::logic_error {
  using std::logic_error::logic_error;
};

struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace sa3
