"""Zero-order gradient estimation: single-direction differences and the split step.

All estimators perturb the parameter vector in place from a seed, measure
losses, and put the vector back with the mirror perturbation, so the only
state they need per direction is one seed and one scalar. The split step
perturbs the lower block a few times and, per lower-block direction, runs
many cheap central-difference cycles on the upper block against the cached
cut activation; the lower block's scalar gradient then comes from comparing
the loss populations seen under its +/- directions.

A ``seed_source`` is anything with ``next_seed() -> int``; training uses
``prng.SeedStream`` so a server holding the same root can replay every draw.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractViolation
from .models import Batch, BlockSplit, ModelSpec, forward_block1, forward_block2, forward_loss
from .prng import perturb_in_place

_M64 = 0xFFFFFFFFFFFFFFFF


@dataclass(frozen=True)
class SplitConfig:
    """Perturbation counts and scales for the split step.

    p2 must equal 2 * p1 * ps for an integer ps >= 1: every lower-block
    direction contributes two cut activations, each reused for ps
    upper-block cycles.
    """

    p1: int
    p2: int
    eps: float
    mu: float

    def __post_init__(self):
        if self.p1 < 1:
            raise ConfigError(f"p1 must be >= 1, got {self.p1}")
        if self.p2 < 2 * self.p1 or self.p2 % (2 * self.p1) != 0:
            raise ConfigError(
                f"p2 must equal 2*p1*ps for integer ps >= 1; got p1={self.p1}, p2={self.p2}")
        if not self.eps > 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if not self.mu > 0:
            raise ConfigError(f"mu must be positive, got {self.mu}")

    @property
    def ps(self) -> int:
        return self.p2 // (2 * self.p1)


def model_loss(spec: ModelSpec, values: np.ndarray, batch: Batch, counters=None):
    """Zero-arg loss closure over a (possibly perturbed) parameter vector."""
    def loss() -> float:
        return forward_loss(spec, values, batch, counters)
    return loss


def projected_gradient_central(values: np.ndarray, loss, seed: int, eps: float,
                               counters=None) -> float:
    """Two-sided directional derivative estimate along the seed's direction.

    Runs the in-place (+eps, -2eps, +eps) cycle, so the vector is restored
    to its entry value up to rounding when this returns.
    """
    if not eps > 0:
        raise ConfigError(f"eps must be positive, got {eps}")
    d = values.shape[0]
    perturb_in_place(values, seed, +eps)
    loss_plus = loss()
    perturb_in_place(values, seed, -2 * eps)
    loss_minus = loss()
    perturb_in_place(values, seed, +eps)
    if counters is not None:
        for _ in range(3):
            counters.add_perturb_pass(d)
    return (loss_plus - loss_minus) / (2 * eps)


def projected_gradient_forward(values: np.ndarray, loss, seed: int, eps: float,
                               base_loss: float, counters=None) -> float:
    """One-sided estimate against a base loss computed once per step."""
    if not eps > 0:
        raise ConfigError(f"eps must be positive, got {eps}")
    d = values.shape[0]
    perturb_in_place(values, seed, +eps)
    loss_plus = loss()
    perturb_in_place(values, seed, -eps)
    if counters is not None:
        for _ in range(2):
            counters.add_perturb_pass(d)
    return (loss_plus - base_loss) / eps


def g1_from_losses(l_plus: np.ndarray, l_minus: np.ndarray, eps: float, ps: int) -> float:
    """Lower-block scalar gradient from the two loss populations.

    Defined as the average of all pairwise differences
    (l_plus[l] - l_minus[k]) / (2 eps) over the 2ps x 2ps grid, which
    collapses to the difference of the population means over 2 eps; the
    closed form is what we compute.
    """
    l_plus = np.asarray(l_plus, dtype=np.float64)
    l_minus = np.asarray(l_minus, dtype=np.float64)
    if l_plus.shape != (2 * ps,) or l_minus.shape != (2 * ps,):
        raise ContractViolation(
            f"loss vectors must have length 2*ps={2 * ps}, got {l_plus.shape} and {l_minus.shape}")
    return float((l_plus.mean() - l_minus.mean()) / (2 * eps))


@dataclass(frozen=True)
class StepResult:
    """One training step's scalars and the seeds that replay it."""

    g1: float
    g2: float
    s1: tuple[int, ...]
    s2: tuple[int, ...]


def spzo_step(spec: ModelSpec, values: np.ndarray, batch: Batch, cfg: SplitConfig,
              seed_source, counters=None) -> StepResult:
    """Split-perturbation gradient step (estimation only; no update applied).

    Per lower-block direction: perturb block 1 by +eps, cache the cut
    activation, run ps upper-block cycles; flip to -eps with a fresh seed
    shift for the upper block, run ps more cycles; reset block 1. Exactly
    2*p1 lower-block forwards and 2*p2 upper-block forwards happen, and the
    parameter vector is restored (up to rounding) on return.

    Seed consumption order per direction: s1, then ps upper seeds, then the
    shift, then ps more upper seeds. Recorded upper seeds are post-shift, so
    replaying the returned lists needs no knowledge of the shift.
    """
    split = BlockSplit.from_spec(spec)
    theta1 = values[:split.d1]
    theta2 = values[split.d1:]
    eps = cfg.eps
    ps = cfg.ps

    g1_sum = 0.0
    g2_sum = 0.0
    s1_used: list[int] = []
    s2_used: list[int] = []

    def upper_cycles(y_cut: np.ndarray, shift: int) -> np.ndarray:
        nonlocal g2_sum
        losses = np.empty(2 * ps, dtype=np.float64)
        for j in range(ps):
            s2 = seed_source.next_seed()
            if shift:
                s2 = (s2 + shift) & _M64
            perturb_in_place(theta2, s2, +eps)
            loss_plus = forward_block2(spec, theta2, y_cut, batch.labels, counters)
            perturb_in_place(theta2, s2, -2 * eps)
            loss_minus = forward_block2(spec, theta2, y_cut, batch.labels, counters)
            g2_sum += (loss_plus - loss_minus) / (2 * eps)
            perturb_in_place(theta2, s2, +eps)
            if counters is not None:
                for _ in range(3):
                    counters.add_perturb_pass(split.d2)
            losses[2 * j] = loss_plus
            losses[2 * j + 1] = loss_minus
            s2_used.append(s2)
        return losses

    for _ in range(cfg.p1):
        s1 = seed_source.next_seed()
        perturb_in_place(theta1, s1, +eps)
        y_cut = forward_block1(spec, theta1, batch, counters)
        l_plus = upper_cycles(y_cut, shift=0)
        shift = seed_source.next_seed()
        perturb_in_place(theta1, s1, -2 * eps)
        y_cut = forward_block1(spec, theta1, batch, counters)
        l_minus = upper_cycles(y_cut, shift=shift)
        perturb_in_place(theta1, s1, +eps)
        if counters is not None:
            for _ in range(3):
                counters.add_perturb_pass(split.d1)
        g1_sum += g1_from_losses(l_plus, l_minus, eps, ps)
        s1_used.append(s1)

    return StepResult(g1=g1_sum / cfg.p1, g2=g2_sum / cfg.p2,
                      s1=tuple(s1_used), s2=tuple(s2_used))


def central_zo_training_step(spec: ModelSpec, values: np.ndarray, batch: Batch,
                             p: int, eps: float, seed_source, counters=None) -> StepResult:
    """Whole-model baseline: p independent central-difference directions."""
    if p < 1:
        raise ContractViolation(f"need at least one perturbation, got {p}")
    loss = model_loss(spec, values, batch, counters)
    seeds = []
    g_sum = 0.0
    for _ in range(p):
        s = seed_source.next_seed()
        g_sum += projected_gradient_central(values, loss, s, eps, counters)
        seeds.append(s)
    return StepResult(g1=g_sum / p, g2=0.0, s1=tuple(seeds), s2=())


def forward_zo_training_step(spec: ModelSpec, values: np.ndarray, batch: Batch,
                             p: int, eps: float, seed_source, counters=None) -> StepResult:
    """Whole-model baseline: one base loss, p one-sided directions."""
    if p < 1:
        raise ContractViolation(f"need at least one perturbation, got {p}")
    loss = model_loss(spec, values, batch, counters)
    base = loss()
    seeds = []
    g_sum = 0.0
    for _ in range(p):
        s = seed_source.next_seed()
        g_sum += projected_gradient_forward(values, loss, s, eps, base, counters)
        seeds.append(s)
    return StepResult(g1=g_sum / p, g2=0.0, s1=tuple(seeds), s2=())
