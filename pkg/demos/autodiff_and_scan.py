"""Gradients through a selective scan, checked against finite differences.

A tiny S6 layer is run once with the parallel scan and once with the
step-by-step recurrence; the outputs agree to rounding error.  Then the
gradient of a scalar loss is compared with central differences.
"""
import numpy as np

from ssmkt import S6, S6Config, Tensor, no_grad, recording
from ssmkt.gradcheck import grad_check
from ssmkt.nn import make_rng

rng = np.random.default_rng(0)
x = rng.normal(size=(32, 6))

parallel = S6(S6Config(d_inner=6, n_state=4, scan="parallel"), make_rng(1))
sequential = S6(S6Config(d_inner=6, n_state=4, scan="sequential"), make_rng(1))
with no_grad():
    y_par = parallel(Tensor(x)).data
    y_seq = sequential(Tensor(x)).data
print(f"max |parallel - sequential| = {np.max(np.abs(y_par - y_seq)):.2e}")



def loss():
    y = parallel(Tensor(x))
    return (y * y).sum()


with recording() as tape:
    loss()
print(f"scalars retained for backward: {tape.saved_scalars}")

print(grad_check(loss, dict(parallel.named_parameters())))
