"""End-to-end SGD training of the cascade on one image per iteration."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .config import TrainConfig
from .data import Sample
from .errors import NonFiniteLossError
from .loss import (LossBreakdown, POSITIVE, assign_ftn_targets, assign_pn_targets,
                   combine_stage_losses, hard_mine, sample_minibatch, stage_loss_nodes)
from .model import EvolvingBoxes

log = logging.getLogger(__name__)


@dataclass
class LogRow:
    iteration: int
    lr: float
    loss: LossBreakdown

    def format(self) -> str:
        b = self.loss
        return "\t".join([str(self.iteration), repr(self.lr)] + [
            f"{v:.6g}" for v in (b.total, b.pn_cls, b.pn_loc, b.ftn_cls, b.ftn_loc)])


@dataclass
class StepBatch:
    """Indices and labels chosen for one iteration (exposed for gradient probes)."""

    pn_rows: np.ndarray
    pn_positive: np.ndarray
    pn_targets: np.ndarray
    ftn_proposals: np.ndarray   # rows of the filtered proposal list
    ftn_positive: np.ndarray
    ftn_targets: np.ndarray
    ftn_keep: np.ndarray        # hard-mined subset of ftn_proposals positions


def _ftn_cls_losses(logits: np.ndarray, positive: np.ndarray) -> np.ndarray:
    u = np.where(positive, -logits, logits).astype(np.float64)
    return np.maximum(u, 0) + np.log1p(np.exp(-np.abs(u)))


def forward_loss(model: EvolvingBoxes, sample: Sample, tcfg: TrainConfig,
                 rng: np.random.Generator | None = None, batch: StepBatch | None = None,
                 graph: ad.Graph | None = None, update_stats: bool = True):
    """Build the training graph for one image.

    With ``batch=None`` targets are assigned and sampled (consuming ``rng``);
    passing a previous :class:`StepBatch` replays exactly the same discrete
    choices, which is what finite-difference probes need.

    Returns ``(graph, loss_node, breakdown, batch)``.
    """
    cfg = model.config
    g = graph if graph is not None else ad.Graph()
    hyper = model.dcn_forward(g, sample.image, train=True, update_stats=update_stats)
    pn = model.pn_forward(g, hyper)
    proposals = model.filter_proposals(pn)
    if batch is None:
        pn_assign = assign_pn_targets(model.anchors, sample.annotations, cfg.image_w, cfg.image_h)
        rows = sample_minibatch(pn_assign, tcfg.minibatch, tcfg.pn_pos_fraction, rng)
        ftn_assign = assign_ftn_targets(proposals.boxes, sample.annotations,
                                        cfg.image_w, cfg.image_h)
        cand = np.nonzero(ftn_assign.labels != -1)[0]
        if len(cand) > tcfg.minibatch:
            cand = np.sort(rng.choice(cand, tcfg.minibatch, replace=False))
        batch = StepBatch(
            rows, pn_assign.labels[rows] == POSITIVE, pn_assign.targets[rows],
            cand, ftn_assign.labels[cand] == POSITIVE, ftn_assign.targets[cand],
            np.zeros(0, dtype=np.int64))
    sub = proposals.subset(batch.ftn_proposals)
    ftn = model.ftn_forward(g, hyper, sub)
    if batch.ftn_keep.size == 0 and len(sub):
        losses = _ftn_cls_losses(ftn.head.value[:, 4], batch.ftn_positive)
        batch.ftn_keep = np.sort(hard_mine(losses, tcfg.hard_mine_fraction))
    keep = batch.ftn_keep
    pn_terms = stage_loss_nodes(pn.head, batch.pn_rows, batch.pn_positive, batch.pn_targets)
    ftn_terms = stage_loss_nodes(ftn.head, keep, batch.ftn_positive[keep],
                                 batch.ftn_targets[keep])
    n_loc = int(batch.ftn_positive[keep].sum())
    if tcfg.hard_mine_scope == "classification" and len(sub):
        # easy positives still train the box regressor
        everything = np.arange(len(sub))
        loc = stage_loss_nodes(ftn.head, everything, batch.ftn_positive, batch.ftn_targets)[1]
        ftn_terms = (ftn_terms[0], loc)
        n_loc = int(batch.ftn_positive.sum())
    loss = combine_stage_losses(pn_terms, ftn_terms, tcfg.alpha, tcfg.lam, g)

    def val(node):
        return float(node.value[0]) if node is not None else 0.0

    breakdown = LossBreakdown(
        val(loss), val(pn_terms[0]), val(pn_terms[1]), val(ftn_terms[0]), val(ftn_terms[1]),
        int(batch.pn_positive.sum()), int((~batch.pn_positive).sum()),
        n_loc, int((~batch.ftn_positive[keep]).sum()))
    return g, loss, breakdown, batch


class SGD:
    """Plain SGD with optional momentum and L2 weight decay."""

    def __init__(self, params: Sequence[ad.Parameter], momentum: float = 0.0,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {p.name: np.zeros_like(p.value) for p in self.params}

    def step(self, lr: float) -> None:
        for p in self.params:
            grad = p.grad
            if self.weight_decay:
                grad = grad + self.weight_decay * p.value
            if self.momentum:
                v = self.velocity[p.name]
                v *= self.momentum
                v += grad
                grad = v
            if lr:
                p.value -= np.float32(lr) * grad.astype(np.float32, copy=False)


@dataclass
class TrainResult:
    model: EvolvingBoxes
    log: list[LogRow] = field(default_factory=list)
    iteration: int = 0
    lr: float = 0.0


def train(model: EvolvingBoxes, dataset: Sequence[Sample], tcfg: TrainConfig,
          start_iteration: int = 0, log_path: str | Path | None = None,
          checkpoint_path: str | Path | None = None,
          on_iteration: Callable[[LogRow], None] | None = None) -> TrainResult:
    """Run ``tcfg.total_iterations`` SGD steps, counting from ``start_iteration``.

    The image order and minibatch sampling are drawn from a generator
    seeded by ``(tcfg.seed, start_iteration)``, so a fresh run is
    reproducible bit for bit.
    """
    from .checkpoint import Checkpoint, save_checkpoint

    tcfg.validate()
    if not dataset:
        raise ValueError("training needs a non-empty dataset")
    rng = np.random.default_rng([tcfg.seed, start_iteration])
    opt = SGD(model.parameters(), tcfg.momentum, tcfg.weight_decay)
    result = TrainResult(model, iteration=start_iteration, lr=tcfg.learning_rate(start_iteration))
    log_fh = open(log_path, "a" if start_iteration else "w", encoding="utf-8") if log_path else None
    try:
        for it in range(start_iteration, start_iteration + tcfg.total_iterations):
            lr = tcfg.learning_rate(it)
            sample = dataset[int(rng.integers(len(dataset)))]
            model.zero_grad()
            g, loss, breakdown, _ = forward_loss(model, sample, tcfg, rng)
            if not np.isfinite(breakdown.total):
                raise NonFiniteLossError(it, breakdown.total)
            g.backward(loss)
            opt.step(lr)
            row = LogRow(it, lr, breakdown)
            result.log.append(row)
            result.iteration, result.lr = it + 1, lr
            if log_fh:
                log_fh.write(row.format() + "\n")
            if on_iteration:
                on_iteration(row)
            if checkpoint_path and tcfg.checkpoint_every and (it + 1) % tcfg.checkpoint_every == 0:
                save_checkpoint(f"{checkpoint_path}.iter{it + 1}",
                                Checkpoint.from_model(model, it + 1, lr))
            if it % 100 == 0:
                log.info("iter %d lr %g loss %.4f", it, lr, breakdown.total)
    finally:
        if log_fh:
            log_fh.close()
    return result
