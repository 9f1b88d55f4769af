"""The model underneath: a flat parameter vector, a hand-written backward
pass checked against finite differences, and the binary checkpoint format.

    python3 demos/04_model_internals.py
"""
import tempfile
from pathlib import Path

import numpy as np

from fedssl.nn import (
    LossSpec, LossTerm, finite_diff_check, forward, init_params, load_checkpoint, loss_and_grad,
    prox_sgd_step, save_checkpoint,
)

rng = np.random.default_rng(0)
w = init_params([8, 16, 4], rng)
print("parameters:", w.q, "layer shapes:", [lw.shape for lw, _ in w.layers()])

x = rng.normal(size=(5, 8))
y = rng.integers(0, 4, size=5)
soft = rng.dirichlet(np.ones(4), size=5)
spec = LossSpec([LossTerm("ce", x, y), LossTerm("kl", x, soft, np.full(5, 0.5))])
loss, grad = loss_and_grad(w, spec)
print(f"CE + 0.5 KL = {loss:.4f}; finite-difference rel. error {finite_diff_check(w, spec):.1e}")

# one FedProx-style step pulled back toward the starting point
w2 = prox_sgd_step(w, grad, lr=0.1, mu=0.01, anchor=w.flat)
print("step size:", float(np.linalg.norm(w2.flat - w.flat)))

with tempfile.TemporaryDirectory() as d:
    path = save_checkpoint(w2, Path(d) / "model.fssl")
    back = load_checkpoint(path)
    print("checkpoint bytes:", path.stat().st_size, "round trip exact:", np.array_equal(back.flat, w2.flat))
    print("predictions agree:", np.array_equal(forward(back, x), forward(w2, x)))
