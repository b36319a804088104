"""Linear null control by moments, and the stacked exact steering to Phi."""

import numpy as np

from nhecontrol.exact import global_exact_pipeline, quadratic_ratio
from nhecontrol.moment import compute_targets, control_cost_probe, solve_moment, verify_null
from nhecontrol.potentials import preset
from nhecontrol.spectral import TorusField, cos_mode, ground_state, sin_mode

pot = preset("mtB_five", 128)

xi0 = cos_mode(5) + sin_mode(3)
sol = solve_moment(compute_targets(xi0, 0.5, 12, pot))
ratio, tail = verify_null(xi0, sol, pot)
print(f"linearized null control, T = 0.5: ||xi(T)|| / ||xi0|| = {ratio:.2e}, "
      f"||v||_H1 = {sol.h1_norm:.3e}")

probe = control_cost_probe([0.2, 0.4, 0.6, 0.8, 1.0], K=12, potentials=pot)
for T, c in zip(probe.T, probe.cost):
    print(f"  cost N(T = {T:.1f}) = {c:.3e}")
print(f"log N(T) ~ {probe.intercept:.2f} + {probe.nu_fit:.2f} / T (R^2 {probe.r_squared:.3f})")

d = cos_mode(1) + sin_mode(2)
print(f"one-window residual ratio at 2 eps vs eps: {quadratic_ratio(d, 1e-4):.3f}")

psi0 = ground_state(128) * TorusField.from_function(lambda x: 1 + 0.5 * np.cos(x), 128)
res = global_exact_pipeline(psi0, T=2.0, entry_radius=1e-6)
print(f"Phi (1 + 0.5 cos) -> Phi in T = 2: final H1 distance {res.residual:.2e}")
