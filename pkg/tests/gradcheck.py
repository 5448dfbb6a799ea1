"""Central finite-difference gradient oracle.

Independent of the autodiff engine: it only re-evaluates the forward
function at perturbed inputs, so it stays a valid cross-check for every
backward rule in the package.
"""

import numpy as np


def numerical_gradients(f, tensors, h=1e-5):
    """d f() / d t for each tensor, by central differences on every entry.

    ``f`` must rebuild its computation from the tensors' current data and
    return a plain float.
    """
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_error(got: np.ndarray, want: np.ndarray) -> float:
    """Per-element error relative to max(1, |got|, |want|), maximized."""
    denom = np.maximum(1.0, np.maximum(np.abs(got), np.abs(want)))
    return float((np.abs(got - want) / denom).max())


def check_gradients(build_loss, tensors, tol=1e-6, h=1e-5):
    """Assert autodiff gradients match finite differences for all tensors.

    ``build_loss`` constructs a fresh scalar loss Tensor from the given
    (Parameter) tensors each time it is called.
    """
    for t in tensors:
        t.grad = np.zeros_like(t.data)
    loss = build_loss()
    loss.backward()
    analytic = [t.grad.copy() for t in tensors]
    numeric = numerical_gradients(lambda: build_loss().item(), tensors, h=h)
    worst = 0.0
    for got, want in zip(analytic, numeric):
        worst = max(worst, max_rel_error(got, want))
    assert worst < tol, f"gradient mismatch: max relative error {worst:.3e} >= {tol:.1e}"
    return worst
