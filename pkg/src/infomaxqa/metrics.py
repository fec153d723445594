"""Span-level scoring: token-overlap F1 and exact match."""

from __future__ import annotations

from collections import Counter


def token_f1(predicted: list[str], gold: list[str]) -> float:
    """Harmonic mean of multiset token precision and recall.

    Zero when the prediction is empty or shares no tokens with the gold
    span.  The gold span must be non-empty.
    """
    if not gold:
        raise ValueError("token_f1: gold span must be non-empty")
    if not predicted:
        return 0.0
    overlap = sum((Counter(predicted) & Counter(gold)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(predicted)
    recall = overlap / len(gold)
    return 2 * precision * recall / (precision + recall)


def exact_match(predicted: list[str], gold: list[str]) -> float:
    return 1.0 if predicted == gold else 0.0
