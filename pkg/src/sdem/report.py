"""Monte Carlo estimator reports."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass


@dataclass(frozen=True)
class EstimatorReport:
    """A Monte Carlo estimate with its standard error and provenance.

    ``excluded`` counts paths dropped because they went non-finite; accepted
    runs require ``excluded / samples < 1e-4``.
    """

    estimate: float
    se: float
    samples: int
    excluded: int = 0
    config_hash: str = ""
    overflowed: int = 0

    def __post_init__(self):
        if not (self.se >= 0.0 or math.isnan(self.se)):
            raise ValueError(f"standard error must be nonnegative, got {self.se}")
        if self.samples <= 0:
            raise ValueError("sample count must be positive")

    @property
    def excluded_fraction(self) -> float:
        return self.excluded / self.samples

    def within(self, target: float, k: float = 3.0) -> bool:
        """True if the estimate is within k standard errors of target."""
        return abs(self.estimate - target) <= k * self.se

    def to_dict(self) -> dict:
        return {
            "estimate": self.estimate,
            "se": self.se,
            "paths": self.samples,
            "excluded": self.excluded,
            "config_hash": self.config_hash,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def from_samples(values, config_hash: str = "", excluded: int = 0) -> EstimatorReport:
    """Build a report from per-path sample values (mean and SE of the mean)."""
    import numpy as np

    values = np.asarray(values, dtype=float)
    n = values.size
    if n == 0:
        raise ValueError("cannot build a report from an empty sample")
    est = float(values.mean())
    se = float(values.std(ddof=1) / math.sqrt(n)) if n > 1 else math.inf
    return EstimatorReport(est, se, n, excluded=excluded, config_hash=config_hash)
