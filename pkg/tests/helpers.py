"""Shared test utilities: float64 finite-difference probes of the training loss."""
from __future__ import annotations

import numpy as np

from evolving_boxes import autodiff as ad
from evolving_boxes.train import forward_loss


def promote(model) -> None:
    """Hold every parameter in float64 so tiny perturbations survive."""
    for p in model.parameters():
        p.value = p.value.astype(np.float64)
        p.grad = np.zeros_like(p.value)


def loss_probe(model, sample, tcfg, probes, step=1e-5, seed=0):
    """Analytic vs central-difference derivative of the training loss.

    ``probes`` is a list of ``(parameter name, flat index)``. The discrete
    choices (targets, minibatch, hard-mined set) of the first pass are
    replayed for every perturbed pass, and batchnorm statistics are left
    untouched. Returns ``(analytic, numeric)`` arrays.
    """
    promote(model)
    rng = np.random.default_rng(seed)
    model.zero_grad()
    g, loss, _, batch = forward_loss(model, sample, tcfg, rng, graph=ad.Graph(np.float64),
                                     update_stats=False)
    g.backward(loss)
    analytic = np.array([model.params[n].grad.ravel()[i] for n, i in probes])

    def value():
        _, node, _, _ = forward_loss(model, sample, tcfg, batch=batch,
                                     graph=ad.Graph(np.float64), update_stats=False)
        return float(node.value[0])

    numeric = []
    for name, i in probes:
        flat = model.params[name].value.reshape(-1)
        saved = flat[i]
        flat[i] = saved + step
        up = value()
        flat[i] = saved - step
        down = value()
        flat[i] = saved
        numeric.append((up - down) / (2 * step))
    return analytic, np.array(numeric)


def probe_error(analytic, numeric) -> np.ndarray:
    """Per-probe relative error with a floor for near-zero derivatives."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return np.abs(analytic - numeric) / scale
