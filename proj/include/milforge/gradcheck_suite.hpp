#pragma once

#include <iosfwd>

namespace milforge {

// Finite-difference validation of every model block at 64-bit precision:
// gated attention, attention pooling, the 2DPE-augmented transformer, and
// full PathMIL with both losses, at small fixed shapes. Prints one line per
// block with its max relative error. inject_fault adds a block whose
// backward deliberately flips a sign, to prove the checker catches it.
// Returns true when every block passes its tolerance.
bool run_gradcheck_suite(std::ostream& out, bool inject_fault = false, unsigned long long seed = 7);

}  // namespace milforge
