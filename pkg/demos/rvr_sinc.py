"""
Relevance vector regression on the sinc function
================================================

One hundred noisy samples of ``sin(x)/x``.  Most basis functions are
pruned during training; the survivors are the relevance vectors.
"""

import time

import numpy as np

from modsoh.rvr import RvrConfig, identity_residual, predict_standardized, train

rng = np.random.default_rng(0)
x = rng.uniform(-10, 10, 100)[:, None]
y = np.sinc(x[:, 0] / np.pi) + 0.1 * rng.standard_normal(100)

t0 = time.perf_counter()
model = train(x, y, RvrConfig(rho=0.25))
print(f"trained in {time.perf_counter() - t0:.2f} s over {model.n_iter} iterations "
      f"(converged: {model.converged})")
print(f"{model.n_rv} relevance vectors, offset kept: {model.offset_used}")
print(f"noise sigma estimate {np.sqrt(1 / model.beta):.4f} (true 0.1)")
print(f"active bases after the first few rounds: {model.active_sizes[:8]}")
print(f"max |Sigma H - I| on the pruned system: {identity_residual(model, x):.1e}")

# held-out error and the three-sigma band
xt = np.linspace(-10, 10, 1000)[:, None]
mean, sd = predict_standardized(model, xt)
truth = np.sinc(xt[:, 0] / np.pi)
print(f"test RMSE {np.sqrt(np.mean((mean - truth) ** 2)):.4f}")
print(f"truth inside the 3-sigma band at {np.mean(np.abs(mean - truth) <= 3 * sd):.1%} of points")

for xv in (-8.0, -3.0, 0.0, 3.0, 8.0, 20.0):
    m, s = predict_standardized(model, np.array([[xv]]))
    print(f"  x = {xv:5.1f}: {m[0]: .3f} +/- {3 * s[0]:.3f}")
