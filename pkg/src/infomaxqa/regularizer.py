"""Local and global information constraints over encoded QA batches.

The local constraint ties each sampled answer-word representation to the
rest of its span and the surrounding passage window; the global constraint
ties a summary of the span to every question and passage representation
outside it.  Negatives come from deranging the batch, so each example is
contrasted against a genuinely different one.  Both constraints are the
symmetrized cross-entropy bound and are therefore always <= 0; the combined
penalty negates their weighted mean and is minimized alongside the span
loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .mi import BilinearDiscriminator, MIBatchScores, multiview_js_bound
from .model import EncodedBatch, EncodedExample

SUMMARIZERS = ("mean", "max", "sample")


@dataclass
class RegularizerWeights:
    """Loss weights and the context half-window size."""

    alpha: float = 1.0
    beta: float = 0.5
    gamma: float = 0.3
    context_window: int = 5

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("regularizer weights must be non-negative")
        if self.context_window < 0 or int(self.context_window) != self.context_window:
            raise ValueError("context_window must be a non-negative integer")


@dataclass
class NegativeAssignment:
    """Derangement of batch indices; example i draws negatives from
    ``permutation[i]``."""

    permutation: np.ndarray

    def __post_init__(self):
        perm = np.asarray(self.permutation, dtype=np.intp)
        n = len(perm)
        if sorted(perm.tolist()) != list(range(n)):
            raise ValueError("negative assignment must be a permutation")
        if np.any(perm == np.arange(n)):
            raise ValueError("negative assignment must have no fixed points")
        self.permutation = perm


def shuffle_negatives(batch_size: int, rng: np.random.Generator) -> NegativeAssignment:
    """Uniformly sampled derangement, by rejection from uniform permutations."""
    if batch_size < 2:
        raise ValueError(f"cannot derange a batch of size {batch_size}")
    while True:
        perm = rng.permutation(batch_size)
        if not np.any(perm == np.arange(batch_size)):
            return NegativeAssignment(perm)


@dataclass
class LocalPair:
    """One example's sampled answer word plus context, with the same
    structures from its assigned negative example."""

    x: Tensor
    context: Tensor
    neg_x: Tensor
    neg_context: Tensor
    x_index: int = field(default=-1)
    context_indices: tuple[int, ...] = field(default=())


def _context_indices(span: tuple[int, int], n: int, picked: int,
                     window: int) -> np.ndarray:
    start, end = span
    lo = max(0, start - window)
    hi = min(n, end + 1 + window)
    idx = np.arange(lo, hi)
    return idx[idx != picked]


def sample_local_pairs(batch: EncodedBatch, assignment: NegativeAssignment,
                       rng: np.random.Generator,
                       context_window: int = 5) -> list[LocalPair]:
    """Sample one answer word per example and slice its context window.

    The window covers the remaining span words plus up to ``context_window``
    passage words on each side, clipped at the passage boundaries; the
    sampled word is excluded from its own context.  Negatives reuse the
    sampled word and context of the assigned example.
    """
    if len(batch) < 2:
        raise ValueError("local constraint needs a batch of at least 2 examples")
    picks: list[tuple[int, np.ndarray]] = []
    for ex in batch:
        start, end = ex.span
        n = ex.r_p.shape[0]
        if not (0 <= start <= end < n):
            raise ValueError(f"invalid answer span {ex.span} for {n} passage words")
        picked = start + int(rng.integers(end - start + 1))
        ctx = _context_indices(ex.span, n, picked, context_window)
        if ctx.size == 0:
            raise ValueError(
                "local constraint: empty context set (single-word span with "
                "no surrounding window)")
        picks.append((picked, ctx))

    pairs = []
    for i, (ex, (picked, ctx)) in enumerate(zip(batch, picks)):
        j = assignment.permutation[i]
        neg_ex, (neg_picked, neg_ctx) = batch[j], picks[j]
        pairs.append(LocalPair(
            x=ad.gather_rows(ex.r_p, [picked]),
            context=ad.gather_rows(ex.r_p, ctx),
            neg_x=ad.gather_rows(neg_ex.r_p, [neg_picked]),
            neg_context=ad.gather_rows(neg_ex.r_p, neg_ctx),
            x_index=picked,
            context_indices=tuple(int(k) for k in ctx),
        ))
    return pairs


def local_constraint(x: Tensor, context: Tensor, neg_x: Tensor,
                     neg_context: Tensor, disc: BilinearDiscriminator) -> Tensor:
    """Symmetrized bound pairing the sampled word with its own context
    against the two mismatched pairings; always <= 0."""
    return multiview_js_bound(MIBatchScores(
        positive=disc.probs(x, context),
        negative_y=disc.probs(x, neg_context),
        negative_x=disc.probs(neg_x, context),
    ))


def summarize(answer_rows: Tensor, kind: str,
              rng: np.random.Generator | None = None) -> Tensor:
    """Reduce a span's rows to one summary row.

    ``mean`` and ``max`` squash through a sigmoid, putting every coordinate
    in (0, 1); ``sample`` returns one raw row unchanged, since a plain word
    representation is already the kind of vector the global constraint
    compares against.
    """
    if answer_rows.shape[0] == 0:
        raise ValueError("summarize: empty answer slice")
    if kind == "mean":
        return ad.sigmoid(ad.mean(answer_rows, axis=0, keepdims=True))
    if kind == "max":
        return ad.sigmoid(ad.amax(answer_rows, axis=0, keepdims=True))
    if kind == "sample":
        if rng is None:
            raise ValueError("summarize: sample kind needs a generator")
        return ad.gather_rows(answer_rows, [int(rng.integers(answer_rows.shape[0]))])
    raise ValueError(f"summarize: unknown kind {kind!r}")


def global_rest(example: EncodedExample) -> Tensor:
    """Question rows plus passage rows outside the answer span."""
    start, end = example.span
    n = example.r_p.shape[0]
    outside = np.concatenate([np.arange(0, start), np.arange(end + 1, n)])
    k = example.r_q.shape[0]
    if k == 0 and outside.size == 0:
        raise ValueError(
            "global constraint: answer spans the whole passage and the "
            "question is empty")
    if k == 0:
        return ad.gather_rows(example.r_p, outside)
    if outside.size == 0:
        return example.r_q
    return ad.concat([example.r_q, ad.gather_rows(example.r_p, outside)], axis=0)


def global_constraint(summary: Tensor, rest: Tensor, neg_summary: Tensor,
                      neg_rest: Tensor, disc: BilinearDiscriminator) -> Tensor:
    """Symmetrized bound pairing the span summary with everything outside
    the span, against the mismatched pairings; always <= 0."""
    return multiview_js_bound(MIBatchScores(
        positive=disc.probs(summary, rest),
        negative_y=disc.probs(summary, neg_rest),
        negative_x=disc.probs(neg_summary, rest),
    ))


def qainfomax_loss(batch: EncodedBatch, weights: RegularizerWeights,
                   lc_disc: BilinearDiscriminator | None,
                   gc_disc: BilinearDiscriminator | None,
                   rng: np.random.Generator,
                   summarizer: str = "mean") -> tuple[Tensor, dict]:
    """Combined penalty: minus the per-batch mean of the weighted local and
    global terms, so the result is >= 0 and shrinks as the bounds rise.

    Consumes the generator in a fixed order (derangement, per-example word
    picks, then summary draws), so a given seed replays exactly.  Returns
    the penalty and a float breakdown of the mean constraint values.
    """
    b = len(batch)
    if b < 2:
        raise ValueError("regularizer needs a batch of at least 2 examples")
    if weights.alpha == 0.0 and weights.beta == 0.0:
        return Tensor(0.0), {"lc": None, "gc": None}

    assignment = shuffle_negatives(b, rng)
    terms: list[Tensor] = []
    breakdown: dict[str, float | None] = {"lc": None, "gc": None}

    if weights.alpha > 0.0:
        if lc_disc is None:
            raise ValueError("local constraint enabled but no discriminator given")
        pairs = sample_local_pairs(batch, assignment, rng, weights.context_window)
        lc_terms = [local_constraint(p.x, p.context, p.neg_x, p.neg_context, lc_disc)
                    for p in pairs]
        breakdown["lc"] = float(np.mean([t.data for t in lc_terms]))
        terms.extend(ad.scale(t, weights.alpha) for t in lc_terms)

    if weights.beta > 0.0:
        if gc_disc is None:
            raise ValueError("global constraint enabled but no discriminator given")
        summaries = [summarize(ad.gather_rows(ex.r_p, np.arange(ex.span[0], ex.span[1] + 1)),
                               summarizer, rng) for ex in batch]
        rests = [global_rest(ex) for ex in batch]
        gc_terms = [global_constraint(summaries[i], rests[i],
                                      summaries[assignment.permutation[i]],
                                      rests[assignment.permutation[i]], gc_disc)
                    for i in range(b)]
        breakdown["gc"] = float(np.mean([t.data for t in gc_terms]))
        terms.extend(ad.scale(t, weights.beta) for t in gc_terms)

    stacked = terms[0]
    for t in terms[1:]:
        stacked = stacked + t
    return ad.scale(stacked, -1.0 / b), breakdown
