"""Client-side obfuscation of parameter bundles: mask, noise, clip, prune.

Masking draws one uniform per scalar from a counter-based generator keyed by
``(seed, round, client)``, so a client's mask never depends on what other
clients did or on execution order. Clip and prune thresholds are computed per
bundle entry as a percentile of absolute values.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .bundle import ParameterBundle

METHODS = ("none", "mask", "noise", "clip", "prune")


@dataclass(frozen=True)
class ObfuscationSpec:
    method: str = "none"
    p: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown obfuscation method {self.method!r}")
        _check_p(self.method, self.p)

    @property
    def label(self) -> str:
        return "none" if self.method == "none" else f"{self.method}({self.p:g})"


def _check_p(method: str, p: float) -> None:
    if method in ("mask", "clip", "prune") and not (0.0 <= p < 1.0):
        raise ValueError(f"{method}: p must lie in [0, 1), got {p}")
    if method == "noise" and not p >= 0.0:
        raise ValueError(f"noise: sigma must be >= 0, got {p}")


def mask_key(seed: int, round_idx: int = 0, client: int = 0) -> int:
    return _kernels.mix_key(seed, round_idx, client)


def mask(bundle: ParameterBundle, p: float, seed: int = 0, round_idx: int = 0, client: int = 0,
         respect_exemption: bool = True) -> ParameterBundle:
    """Replace each maskable scalar by NaN with probability ``p``.

    Scalar ``i`` of the flattened bundle is masked when ``u_i < p``, where
    ``u_i`` comes from the counter generator keyed by (seed, round, client).
    ``respect_exemption=False`` also masks BatchNorm entries; it exists to
    reproduce the failure mode the exemption avoids.
    """
    _check_p("mask", p)
    flat = bundle.flatten()
    if p == 0.0:
        return bundle.copy()
    u = _kernels.counter_uniform(mask_key(seed, round_idx, client), 0, flat.size)
    hit = u < p
    if respect_exemption:
        hit &= ~bundle.exempt_mask()
    flat[hit] = np.nan
    return bundle.unflatten(flat)


def noise(bundle: ParameterBundle, sigma: float, seed: int = 0, round_idx: int = 0,
          client: int = 0) -> ParameterBundle:
    """Add i.i.d. N(0, sigma^2) to every scalar, BatchNorm entries included."""
    _check_p("noise", sigma)
    if sigma == 0.0:
        return bundle.copy()
    rng = np.random.default_rng([seed, round_idx, client, 0x4E4F4953])
    flat = bundle.flatten()
    return bundle.unflatten(flat + rng.normal(0.0, sigma, size=flat.size))


def percentile_threshold(values: np.ndarray, p: float) -> float:
    """The ``p`` quantile of ``|values|`` with linear interpolation between ranks."""
    return float(np.quantile(np.abs(values), p, method="linear"))


def clip_with_threshold(values: np.ndarray, threshold: float) -> np.ndarray:
    out = values.copy()
    over = np.abs(out) > threshold
    out[over] = np.sign(out[over]) * threshold
    return out


def prune_with_threshold(values: np.ndarray, threshold: float) -> np.ndarray:
    out = values.copy()
    out[np.abs(out) < threshold] = 0.0
    return out


def thresholds(bundle: ParameterBundle, p: float) -> dict:
    return {e.name: percentile_threshold(e.value, p) for e in bundle if e.value.size}


def _per_entry(bundle, p, method, fn):
    _check_p(method, p)
    ts = thresholds(bundle, p)
    return bundle.map(lambda e: fn(e.value, ts[e.name]) if e.value.size else e.value.copy())


def clip(bundle: ParameterBundle, p: float) -> ParameterBundle:
    """Per entry: magnitudes above the ``p`` percentile of ``|values|`` are cut to it."""
    return _per_entry(bundle, p, "clip", clip_with_threshold)


def prune(bundle: ParameterBundle, p: float) -> ParameterBundle:
    """Per entry: values with magnitude below the ``p`` percentile become 0."""
    return _per_entry(bundle, p, "prune", prune_with_threshold)


def obfuscate(bundle: ParameterBundle, spec: ObfuscationSpec, round_idx: int = 0, client: int = 0,
              respect_exemption: bool = True) -> ParameterBundle:
    if spec.method == "none":
        return bundle.copy()
    if spec.method == "mask":
        return mask(bundle, spec.p, spec.seed, round_idx, client, respect_exemption)
    if spec.method == "noise":
        return noise(bundle, spec.p, spec.seed, round_idx, client)
    if spec.method == "clip":
        return clip(bundle, spec.p)
    if spec.method == "prune":
        return prune(bundle, spec.p)
    raise ValueError(f"unknown obfuscation method {spec.method!r}")  # pragma: no cover


def masked_fraction(bundle: ParameterBundle, tag: str | None = None) -> float:
    entries = [e for e in bundle if tag is None or e.tag == tag]
    total = sum(e.value.size for e in entries)
    if not total:
        return 0.0
    return sum(int(np.isnan(e.value).sum()) for e in entries) / total

