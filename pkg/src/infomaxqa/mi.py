"""Bilinear discriminator and mutual-information lower-bound objectives.

Three trainable lower bounds are provided: the shift-invariant bound built
from raw critic scores, a binary-cross-entropy bound on pair probabilities
(maximum zero), and its symmetrized two-view variant.  ``exact_mi_discrete``
and ``gaussian_mi`` are closed-form oracles used to validate the trained
estimators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    amax,
    exp,
    log,
    matmul,
    mean,
    multiply,
    sigmoid,
    subtract,
    total,
)

PROB_CLAMP = 1e-12  # floors log arguments in every loss below


class BilinearDiscriminator:
    """Pair critic ``score(x, y) = x W y^T`` with a learnable square matrix.

    Raw scores feed the shift-invariant bound; ``sigmoid(score)`` is the pair
    probability used by the cross-entropy bounds.  W starts uniform in
    ``[-1/sqrt(d), 1/sqrt(d)]`` so initial scores sit near zero and the
    losses start at their uninformative fixed points.
    """

    def __init__(self, dim: int, rng: np.random.Generator, name: str = "disc"):
        limit = 1.0 / math.sqrt(dim)
        self.dim = dim
        self.name = name
        self.W = Tensor(rng.uniform(-limit, limit, size=(dim, dim)),
                        requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return {f"{self.name}.W": self.W}

    def _check(self, xs: Tensor, ys: Tensor) -> None:
        if xs.shape[-1] != self.dim or ys.shape[-1] != self.dim:
            raise ShapeError(
                f"discriminator: expected width {self.dim}, "
                f"got {xs.shape} and {ys.shape}")

    def scores(self, xs: Tensor, ys: Tensor) -> Tensor:
        """Raw bilinear scores, one per row pair.

        ``xs`` is (n, d) or a broadcastable (1, d) row; ``ys`` is (m, d).
        """
        self._check(xs, ys)
        return total(multiply(matmul(xs, self.W), ys), axis=-1)

    def probs(self, xs: Tensor, ys: Tensor) -> Tensor:
        """Pair probabilities in (0, 1): sigmoid of the raw scores."""
        return sigmoid(self.scores(xs, ys))


@dataclass
class MIBatchScores:
    """Discriminator probabilities for one estimation batch.

    ``positive`` holds pairs drawn jointly; ``negative_y`` pairs each x with
    a mismatched y, ``negative_x`` pairs each y with a mismatched x.
    """

    positive: Tensor
    negative_y: Tensor
    negative_x: Tensor


def _require_nonempty(name: str, t: Tensor) -> Tensor:
    if t.data.size == 0:
        raise ValueError(f"{name}: empty sample list")
    return t


def dv_bound(pos_scores: Tensor, neg_scores: Tensor) -> Tensor:
    """mean(pos) - log(mean(exp(neg))) on raw scores.

    The log-mean-exp is guarded by max subtraction, so large scores do not
    overflow.  Invariant to adding a constant to both score sets.
    """
    pos = _require_nonempty("dv_bound", pos_scores)
    neg = _require_nonempty("dv_bound", neg_scores)
    m = amax(neg)
    return mean(pos) - (m + log(mean(exp(subtract(neg, m)))))


def js_bound(pos_probs: Tensor, neg_probs: Tensor) -> Tensor:
    """mean(log p_pos) + mean(log(1 - p_neg)); always <= 0."""
    pos = _require_nonempty("js_bound", pos_probs)
    neg = _require_nonempty("js_bound", neg_probs)
    return (mean(log(pos, clamp=PROB_CLAMP))
            + mean(log(subtract(1.0, neg), clamp=PROB_CLAMP)))


def multiview_js_bound(scores: MIBatchScores) -> Tensor:
    """Symmetrized bound: both directions of mismatched pairing, half weight
    each; always <= 0."""
    pos = _require_nonempty("multiview_js_bound", scores.positive)
    neg_y = _require_nonempty("multiview_js_bound", scores.negative_y)
    neg_x = _require_nonempty("multiview_js_bound", scores.negative_x)
    return (mean(log(pos, clamp=PROB_CLAMP))
            + 0.5 * mean(log(subtract(1.0, neg_y), clamp=PROB_CLAMP))
            + 0.5 * mean(log(subtract(1.0, neg_x), clamp=PROB_CLAMP)))


@dataclass
class DiscreteJoint:
    """Joint distribution over two finite variables as an m x n table."""

    table: np.ndarray

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=np.float64)
        if self.table.ndim != 2:
            raise ValueError("DiscreteJoint: table must be 2-D")
        if np.any(self.table < 0):
            raise ValueError("DiscreteJoint: negative probability entry")
        if abs(self.table.sum() - 1.0) > 1e-12:
            raise ValueError(
                f"DiscreteJoint: entries sum to {self.table.sum()!r}, not 1")

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Draw n (x, y) index pairs from the joint."""
        flat = rng.choice(self.table.size, size=n, p=self.table.reshape(-1))
        return np.unravel_index(flat, self.table.shape)


def exact_mi_discrete(joint: DiscreteJoint | np.ndarray) -> float:
    """Direct-summation mutual information of a discrete joint, in nats.

    Zero-probability cells contribute zero.  Used as the ground-truth oracle
    for the trained estimators.
    """
    if not isinstance(joint, DiscreteJoint):
        joint = DiscreteJoint(joint)
    p = joint.table
    px = p.sum(axis=1)
    py = p.sum(axis=0)
    out = 0.0
    for i in range(p.shape[0]):
        for j in range(p.shape[1]):
            if p[i, j] > 0.0:
                out += p[i, j] * math.log(p[i, j] / (px[i] * py[j]))
    return max(out, 0.0)


def gaussian_mi(rho: float) -> float:
    """Analytic MI of a bivariate standard Gaussian with correlation rho."""
    return -0.5 * math.log(1.0 - rho * rho)


def one_hot(ids: np.ndarray, k: int) -> np.ndarray:
    """Row-per-sample one-hot encoding used by the discrete sanity checks."""
    out = np.zeros((len(ids), k))
    out[np.arange(len(ids)), ids] = 1.0
    return out


def fit_discriminator(x_feats: np.ndarray, y_feats: np.ndarray,
                      rng: np.random.Generator, objective: str = "dv",
                      steps: int = 400, lr: float = 0.05) -> BilinearDiscriminator:
    """Train a bilinear critic to maximize an MI lower bound on paired
    feature rows; mismatched pairs come from reshuffling y each step."""
    from .autodiff import backward
    from .optim import Adam

    if objective not in ("dv", "js"):
        raise ValueError(f"fit_discriminator: unknown objective {objective!r}")
    disc = BilinearDiscriminator(x_feats.shape[1], rng)
    opt = Adam(disc.parameters(), lr=lr)
    xs = Tensor(x_feats)
    ys = Tensor(y_feats)
    for _ in range(steps):
        ys_neg = Tensor(y_feats[rng.permutation(len(y_feats))])
        if objective == "dv":
            bound = dv_bound(disc.scores(xs, ys), disc.scores(xs, ys_neg))
        else:
            bound = js_bound(disc.probs(xs, ys), disc.probs(xs, ys_neg))
        opt.zero_grad()
        backward(-bound)
        opt.step()
    return disc


def evaluate_bound(disc: BilinearDiscriminator, x_feats: np.ndarray,
                   y_feats: np.ndarray, rng: np.random.Generator,
                   objective: str = "dv", shuffles: int = 8) -> float:
    """Evaluate a bound with a frozen critic, averaging the mismatched-pair
    term over several reshuffles to damp sampling noise."""
    from .autodiff import no_grad

    xs = Tensor(x_feats)
    ys = Tensor(y_feats)
    with no_grad():
        neg_rows = np.concatenate(
            [y_feats[rng.permutation(len(y_feats))] for _ in range(shuffles)])
        xs_rep = Tensor(np.tile(x_feats, (shuffles, 1)))
        ys_neg = Tensor(neg_rows)
        if objective == "dv":
            val = dv_bound(disc.scores(xs, ys), disc.scores(xs_rep, ys_neg))
        else:
            val = js_bound(disc.probs(xs, ys), disc.probs(xs_rep, ys_neg))
    return float(val.data)
