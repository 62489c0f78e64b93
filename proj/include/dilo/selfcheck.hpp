#pragma once

#include <ostream>

namespace dilo {

/// Oracle-only property suite runnable with zero trained artifacts:
/// autodiff vs finite differences, sampling identities, solver invariants
/// and format round trips. Prints one line per check; returns the number of
/// failures.
int run_verify_suite(std::ostream& out);

}  // namespace dilo
