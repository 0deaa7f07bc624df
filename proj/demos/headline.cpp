// Minimal coverage in the two-model nested setting at rho = 0.9, C = sqrt(2),
// known variance, for the naive and PoSI constants and both coverage targets.

#include "posi/posi.hpp"

#include <cmath>
#include <cstdio>

int main() {
  using namespace posi;
  const double rho = 0.9;
  const double c = std::sqrt(2.0);
  const Dof r = Dof::known();
  for (KKind kind : {KKind::Naive, KKind::Posi1, KKind::Posi, KKind::Scheffe, KKind::OptimalNested}) {
    const KConstant k = nested_constant(rho, kind, c, 0.05, r);
    const MinCoverage sel = min_coverage(rho, c, k.value, r, NestedTarget::SelectedModel);
    const MinCoverage full = min_coverage(rho, c, k.value, r, NestedTarget::FullModel);
    std::printf("%-8s K=%.6f  min coverage: selected %.4f (zeta*=%.3f)  full %.4f (zeta*=%.3f)\n", to_string(kind), k.value,
                sel.value, sel.zeta_star, full.value, full.zeta_star);
  }
}
