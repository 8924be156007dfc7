"""Fuzzy 5-point label encoding, class balancing, and 3-point pooling.

A fractional Likert rating r becomes a 5-element probability vector with
mass split linearly between floor(r) and ceil(r), e.g. 4.5 -> [0,0,0,.5,.5].
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FuzzyLabel:
    """5-class probability vector for a (possibly fractional) 1-5 rating."""

    probs: tuple

    @property
    def mean_rating(self):
        return float(sum((i + 1) * p for i, p in enumerate(self.probs)))

    def primary_class(self):
        """argmax class in 1..5, ties broken toward the lower class."""
        return int(np.argmax(self.probs)) + 1

    def argmax_set(self, tol=1e-9):
        """All classes (1..5) tied for maximum probability."""
        probs = np.asarray(self.probs)
        return [int(i) + 1 for i in np.flatnonzero(probs >= probs.max() - tol)]


def encode(mean_rating):
    """Encode a rating in [1,5] as a FuzzyLabel.

    Mass is interpolated between the surrounding integer classes, so the
    expected value of the vector reproduces the rating exactly.
    """
    r = float(mean_rating)
    if not (1.0 <= r <= 5.0):
        raise ValidationError(f"rating {r} outside [1,5]")
    probs = [0.0] * 5
    lo = int(math.floor(r))
    frac = r - lo
    if lo == 5:
        probs[4] = 1.0
    else:
        probs[lo - 1] = 1.0 - frac
        probs[lo] = frac
    return FuzzyLabel(tuple(probs))


def oversample(items, rng, key=lambda item: item):
    """Duplicate minority-class items until every non-empty class matches the max.

    `key(item)` must return the item's FuzzyLabel. Duplicates are drawn
    uniformly at random from the class being topped up.
    """
    by_class = {c: [] for c in range(1, 6)}
    for item in items:
        by_class[key(item).primary_class()].append(item)
    counts = {c: len(v) for c, v in by_class.items()}
    nonempty = [c for c, n in counts.items() if n > 0]
    for c in range(1, 6):
        if counts[c] == 0:
            log.warning("oversample: class %d is empty and stays empty", c)
    if not nonempty:
        return list(items)
    target = max(counts.values())
    out = list(items)
    for c in nonempty:
        members = by_class[c]
        deficit = target - len(members)
        for _ in range(deficit):
            out.append(members[int(rng.integers(len(members)))])
    return out


def pool_to_3(probs):
    """Pool a 5-class vector to [neg, neutral, pos] = [p1+p2, p3, p4+p5]."""
    p = np.asarray(probs, dtype=np.float64)
    return np.array([p[0] + p[1], p[2], p[3] + p[4]])
