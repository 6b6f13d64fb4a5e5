"""NaN-aware coordinate-wise aggregation of client submissions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .bundle import ParameterBundle, stack_flat

KINDS = ("mean", "median")


@dataclass(frozen=True)
class AggregationSpec:
    kind: str = "mean"
    weighted: bool = False  # weight the mean by shard size

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown aggregation {self.kind!r}")
        if self.weighted and self.kind != "mean":
            raise ValueError("only the mean supports shard-size weights")


def _weighted_nan_mean(stack: np.ndarray, weights: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    w = np.broadcast_to(np.asarray(weights, dtype=np.float64)[:, None], stack.shape)
    live = ~np.isnan(stack)
    num = np.where(live, stack * w, 0.0).sum(axis=0)
    den = np.where(live, w, 0.0).sum(axis=0)
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), fallback)


def aggregate(submissions: list, spec: AggregationSpec | str = "mean", fallback: ParameterBundle | None = None,
              weights=None) -> ParameterBundle:
    """Combine client bundles coordinate by coordinate, ignoring NaN entries.

    ``mean`` averages the non-NaN values (summed in ascending order, so the
    result is independent of submission order); ``median`` takes the middle
    non-NaN value, averaging the middle pair for even counts. A coordinate
    that is NaN in every submission takes its value from ``fallback``,
    normally the previous central model. The result never contains NaN.
    """
    if isinstance(spec, str):
        spec = AggregationSpec(spec)
    if not submissions:
        raise ValueError("no submissions to aggregate")
    stack = stack_flat(list(submissions))
    ref = submissions[0]
    if fallback is None:
        fb = np.full(stack.shape[1], np.nan)
    else:
        if not fallback.is_aligned(ref):
            raise ValueError("fallback bundle is not aligned with the submissions")
        fb = fallback.flatten()
        if np.isnan(fb).any():
            raise ValueError("fallback bundle must be dense")
    if spec.kind == "median":
        out = _kernels.nan_median(stack, fb)
    elif spec.weighted:
        if weights is None or len(weights) != len(submissions):
            raise ValueError("weighted mean needs one weight per submission")
        out = _weighted_nan_mean(stack, weights, fb)
    else:
        out = _kernels.nan_mean(stack, fb)
    if fallback is None and np.isnan(out).any():
        raise ValueError("coordinate masked in every submission and no fallback given")
    return ref.unflatten(out)


def contributor_counts(submissions: list) -> ParameterBundle:
    """Per-coordinate number of submissions with a non-NaN value, as a bundle."""
    stack = stack_flat(list(submissions))
    return submissions[0].unflatten((~np.isnan(stack)).sum(axis=0).astype(np.float64))
