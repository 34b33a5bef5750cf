#pragma once

#include <string>

#include "pcml/project.hpp"

namespace pcml::detail {

// Rethrows the active exception with `prefix` prepended to its message,
// keeping the error category and any payload.
[[noreturn]] inline void rethrow_with_prefix(const std::string& prefix) {
  try {
    throw;
  } catch (const ProjectionFailure& e) {
    throw ProjectionFailure(prefix + e.what(), e.best());
  } catch (const DivergenceError& e) {
    throw DivergenceError(prefix + e.what(), e.residual());
  } catch (const BlowUpError& e) {
    throw BlowUpError(prefix + e.what(), e.time());
  } catch (const NumericError& e) {
    throw NumericError(prefix + e.what());
  } catch (const ShapeError& e) {
    throw ShapeError(prefix + e.what());
  } catch (const SingularityError& e) {
    throw SingularityError(prefix + e.what());
  } catch (const ValidationError& e) {
    throw ValidationError(prefix + e.what());
  } catch (const StaleGraphError& e) {
    throw StaleGraphError(prefix + e.what());
  }
}

}  // namespace pcml::detail
