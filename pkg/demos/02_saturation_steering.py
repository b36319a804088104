"""Approximate steering with the saturation compiler.

A term exp(B(phi)) is realized by conjugating the flow with exp(-a phi)
for a short time; sums of such terms are compiled into impulse schedules.
"""

import numpy as np

from nhecontrol.potentials import preset
from nhecontrol.saturation import (BApply, CompileBudget, Leaf, approx_steer_positive,
                                   compile_expr, null_steer, realization_error)
from nhecontrol.spectral import TorusField, ground_state, hs_norm

N = 128
pot = preset("mtA_d1", N)
phi = ground_state(N)


def field(f):
    return TorusField.from_function(f, N)


comp = compile_expr(BApply(Leaf((0.0, 1.0, 0.0))), pot, CompileBudget(), phi)
err = realization_error(comp, phi, pot)
print(f"exp(B(cos)) Phi: {comp.impulses} impulses, duration {comp.schedule.duration:.4g}, "
      f"H1 error {err:.3e}")

res = null_steer(phi + field(lambda x: 0.3 * np.cos(x)), 1e-2, 0.5, pot)
print(f"null steering to 1e-2 in T = 0.5: reached {res.error:.3e}")

res = approx_steer_positive(field(lambda x: 1 + 0.2 * np.cos(x)),
                            field(lambda x: 1 + 0.2 * np.sin(x)), 5e-2, 1.0, pot)
print(f"1 + 0.2 cos -> 1 + 0.2 sin in T = 1: H1 error {res.error:.3e}, "
      f"hold {res.diagnostics['hold']:.4f}")
