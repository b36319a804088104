"""Free evolution, the stationary state and positivity under rough controls."""

import numpy as np

from nhecontrol.potentials import preset
from nhecontrol.schedule import ControlSchedule
from nhecontrol.solver import solve_nhe
from nhecontrol.spectral import TorusField, ground_state, ground_state_value, hs_norm

N = 64
pot = preset("mtA_d1", N)
phi = ground_state(N)
PHI = ground_state_value()

# The stationary control kappa Phi^p on Q_1 = 1 keeps Phi fixed.
hold = ControlSchedule.constant([PHI**2, 0, 0, 0, 0], 1.0)
tr = solve_nhe(phi, hold, pot, 1.0, 2)
print(f"stationary drift after T = 1: {hs_norm(tr.final - phi, 1):.2e}")

# A bump relaxes toward a constant and decays without control.
bump = TorusField.from_function(lambda x: 0.05 + 1.2 * (1 + np.cos(x)) ** 4 / 16, N)
free = solve_nhe(bump, ControlSchedule.free(1.0, 5), pot, 1.0, 2)
print(f"free decay: ||psi0||_H1 = {hs_norm(bump, 1):.3f}, ||psi(1)||_H1 = {hs_norm(free.final, 1):.3f}")

# Large sign-changing controls never make a positive state negative.
rough = ControlSchedule.concat([ControlSchedule.constant([-3.0, 5.0, -4.0, 0, 0], 0.3),
                                ControlSchedule.constant([2.0, -6.0, 3.0, 0, 0], 0.7)])
tr = solve_nhe(bump, rough, pot, 1.0, 2)
print(f"minimum grid value along the run: {np.min(tr.min_values):.3e}")
