"""Detection score, FIR-CUSUM and thresholding."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .data import runs


@dataclass
class DetectionConfig:
    """CUSUM settings.

    ``K=None`` means the allowance is calibrated on training scores as their
    mean plus one standard deviation.
    """

    K: float | None = None
    b: float = 0.0
    n: float = 3.0
    mu: float = 0.0
    reset_per_window: bool = False
    window: int | None = None

    def validate(self) -> None:
        from .errors import ConfigError

        if self.K is not None and self.K < 0:
            raise ConfigError("K must be >= 0")
        if self.b < 0:
            raise ConfigError("b must be >= 0")
        if self.n <= 0:
            raise ConfigError("n must be > 0")
        if self.reset_per_window and not self.window:
            raise ConfigError("reset_per_window needs a window length")


@dataclass
class DetectionResult:
    scores: np.ndarray
    cusum: np.ndarray
    threshold: float
    flags: np.ndarray
    segments: list[tuple[int, int]]
    meta: dict = field(default_factory=dict)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "AS", "CS", "flag"])
            for t, (a, c, f) in enumerate(zip(self.scores, self.cusum, self.flags)):
                w.writerow([t, repr(float(a)), repr(float(c)), int(f)])

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({"threshold": self.threshold, "segments": [list(s) for s in self.segments], **self.meta}, fh, indent=2)


def softmax_neg(d_div: np.ndarray) -> np.ndarray:
    z = -np.asarray(d_div, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def anomaly_score(recon_error, d_div) -> np.ndarray:
    """E_t * softmax(-D_div)_t with the softmax taken within each window (last axis)."""
    e = np.asarray(recon_error, dtype=float)
    d = np.asarray(d_div, dtype=float)
    if e.shape != d.shape:
        raise ValueError(f"length mismatch: {e.shape} vs {d.shape}")
    return e * softmax_neg(d)


def fir_cusum(scores, config: DetectionConfig, K: float | None = None) -> np.ndarray:
    """One-sided CUSUM with head start b.

    With ``reset_per_window`` the statistic restarts at b at the start of
    each window of ``config.window`` steps.
    """
    scores = np.asarray(scores, dtype=float).ravel()
    k = config.K if K is None else K
    if k is None:
        raise ValueError("allowance K is not set; calibrate it first")
    drift = config.mu + k
    out = np.empty_like(scores)
    prev = config.b
    period = config.window if config.reset_per_window else 0
    for t, a in enumerate(scores):
        if period and t % period == 0:
            prev = config.b
        prev = max(0.0, a - drift + prev)
        out[t] = prev
    return out


def default_allowance(train_scores) -> float:
    s = np.asarray(train_scores, dtype=float).ravel()
    return float(s.mean() + s.std())


def calibrate_sigma(train_scores, config: DetectionConfig, K: float | None = None) -> float:
    """Population standard deviation of the CUSUM over training scores."""
    s = np.asarray(train_scores, dtype=float).ravel()
    if s.size == 0:
        raise ValueError("no training scores")
    return float(np.std(fir_cusum(s, config, K)))


def detect(scores, sigma: float, config: DetectionConfig, K: float | None = None, train_cusum=None) -> DetectionResult:
    """Flag steps whose CUSUM exceeds n * sigma.

    If sigma is 0 the threshold falls back to the 99.9th percentile of the
    training CUSUM plus machine epsilon (needs ``train_cusum``).
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    scores = np.asarray(scores, dtype=float).ravel()
    cs = fir_cusum(scores, config, K)
    meta = {"K": config.K if K is None else K, "b": config.b, "n": config.n, "mu": config.mu, "sigma": sigma,
            "reset_per_window": config.reset_per_window}
    if sigma > 0:
        threshold = config.n * sigma
    else:
        base = np.percentile(np.asarray(train_cusum, dtype=float), 99.9) if train_cusum is not None else 0.0
        threshold = float(base + np.finfo(float).eps)
        meta["degenerate_sigma"] = True
    flags = (cs > threshold).astype(np.int8)
    return DetectionResult(scores, cs, float(threshold), flags, runs(flags), meta)
