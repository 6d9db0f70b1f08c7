"""Per-series localization: STAS, SFAS and their combination."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .data import SeriesMatrix, window_split
from .model import ReconstructionModel, encode_window

FEATURE_NAMES = (
    "variance",
    "trend_strength",
    "linearity",
    "curvature",
    "seasonal_strength",
    "mean",
    "spikiness",
    "first_acf",
)
MIN_FEATURE_WINDOW = 4


@dataclass
class CorrelationWeights:
    matrix: np.ndarray
    method: str
    constant_series: list[int] = field(default_factory=list)


def correlation_weights(train: SeriesMatrix | np.ndarray, method: str = "spearman") -> CorrelationWeights:
    """Rank correlation matrix between series (Spearman rho or Kendall tau-b).

    Constant series get zero off-diagonal correlation.
    """
    x = train.values if isinstance(train, SeriesMatrix) else np.asarray(train, dtype=float)
    if x.shape[0] < 3:
        raise ValueError("need at least 3 time steps for rank correlation")
    d = x.shape[1]
    constant = [i for i in range(d) if np.ptp(x[:, i]) == 0]
    m = np.eye(d)
    live = [i for i in range(d) if i not in constant]
    if method == "spearman":
        if live:
            ranks = np.apply_along_axis(stats.rankdata, 0, x[:, live])
            m[np.ix_(live, live)] = np.atleast_2d(np.corrcoef(ranks, rowvar=False))
    elif method == "kendall":
        for a in range(len(live)):
            for b in range(a + 1, len(live)):
                i, j = live[a], live[b]
                tau = stats.kendalltau(x[:, i], x[:, j], variant="b").statistic
                m[i, j] = m[j, i] = tau
    else:
        raise ValueError(f"unknown correlation method {method!r}")
    m = np.clip((m + m.T) / 2, -1.0, 1.0)
    np.fill_diagonal(m, 1.0)
    return CorrelationWeights(m, method, constant)


@dataclass
class StasResult:
    scores: np.ndarray
    masked_errors: np.ndarray
    base_error: np.ndarray
    degenerate_steps: np.ndarray
    steps: np.ndarray | None = None


def stas_from_errors(base_error, masked_errors, weights) -> tuple[np.ndarray, np.ndarray]:
    """Space-time anomaly scores from base and per-series masked errors.

    ``base_error`` has shape (n,), ``masked_errors`` (d, n) and ``weights`` (d, d).
    Returns scores (n, d) and a boolean vector of steps whose denominator is
    zero (those rows are set to 1/d).
    """
    e = np.asarray(base_error, dtype=float)
    em = np.atleast_2d(np.asarray(masked_errors, dtype=float))
    w = np.abs(np.asarray(weights, dtype=float))
    d = em.shape[0]
    if w.shape != (d, d):
        raise ValueError(f"weights shape {w.shape} does not match {d} series")
    dev2 = (em - e[None, :]) ** 2  # (d, n)
    mix = w.copy()
    np.fill_diagonal(mix, 1.0)
    num = mix @ dev2
    den = dev2.sum(axis=0)
    degenerate = den <= 0
    scores = np.empty_like(num)
    ok = ~degenerate
    scores[:, ok] = num[:, ok] / den[ok]
    scores[:, degenerate] = 1.0 / d
    return scores.T, degenerate


def stas_scores(x_test, params: ReconstructionModel, weights: CorrelationWeights | np.ndarray, steps=None) -> StasResult:
    """STAS for every step covered by whole windows of ``x_test`` (or only ``steps``)."""
    values = x_test.values if isinstance(x_test, SeriesMatrix) else np.asarray(x_test, dtype=float)
    w = weights.matrix if isinstance(weights, CorrelationWeights) else weights
    windows = window_split(values, params.config.T)
    base = encode_window(windows, params).recon_error.ravel()
    masked = np.stack([encode_window(windows, params, mask_series=i).recon_error.ravel() for i in range(values.shape[1])])
    if steps is not None:
        steps = np.asarray(steps, dtype=int)
        base, masked = base[steps], masked[:, steps]
    scores, degenerate = stas_from_errors(base, masked, w)
    return StasResult(scores, masked, base, degenerate, steps)


def threshold_stas(row, percentile: float) -> np.ndarray:
    """1 where a score strictly exceeds the row's percentile (linear interpolation)."""
    if not 0 <= percentile <= 100:
        raise ValueError("percentile must lie in [0, 100]")
    row = np.asarray(row, dtype=float)
    return (row > np.percentile(row, percentile)).astype(np.int8)


def eval_percentile(n_anomalous: int, d: int) -> float:
    """Percentile that keeps the top ``n_anomalous`` of ``d`` scores."""
    return 100.0 * (1.0 - n_anomalous / d)


@dataclass
class FeatureMatrix:
    values: np.ndarray
    feature_names: tuple[str, ...] = FEATURE_NAMES


def _ortho_poly(n: int) -> np.ndarray:
    q, _ = np.linalg.qr(np.vander(np.arange(n, dtype=float), 3, increasing=True))
    return q * np.where(q[-1] < 0, -1.0, 1.0)


def _strength(resid_var, total_var):
    with np.errstate(divide="ignore", invalid="ignore"):
        s = 1.0 - resid_var / total_var
    return np.where(total_var > 0, np.clip(s, 0.0, 1.0), 0.0)


def dominant_period(x) -> int:
    """Period of the largest non-trivial FFT peak (at least two full cycles)."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    spec = np.abs(np.fft.rfft(x - x.mean()))
    kmax = n // 2
    k = 2 + int(np.argmax(spec[2 : kmax + 1]))
    return max(2, int(round(n / k)))


def _seasonal_component(x: np.ndarray, period: int) -> np.ndarray:
    phase = np.arange(len(x)) % period
    means = np.bincount(phase, weights=x, minlength=period) / np.bincount(phase, minlength=period)
    return means[phase]


def feature_matrix(window) -> FeatureMatrix:
    """Statistical features of each series in a window, shape (8, d)."""
    x = window.values if isinstance(window, SeriesMatrix) else np.asarray(window, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    if n < MIN_FEATURE_WINDOW:
        raise ValueError(f"window of {n} steps is shorter than {MIN_FEATURE_WINDOW}")
    mean = x.mean(axis=0)
    var = x.var(axis=0)
    q = _ortho_poly(n)
    coef = q.T @ x
    resid = x - q[:, :2] @ coef[:2]
    trend = _strength(resid.var(axis=0), var)

    seasonal = np.zeros(d)
    for i in range(d):
        if var[i] > 0:
            p = dominant_period(resid[:, i])
            deseason = x[:, i] - _seasonal_component(resid[:, i], p)
            seasonal[i] = _strength(deseason.var(), var[i])

    s1 = x.sum(axis=0)
    s2 = (x**2).sum(axis=0)
    loo_mean = (s1 - x) / (n - 1)
    loo_var = (s2 - x**2) / (n - 1) - loo_mean**2
    spikiness = loo_var.var(axis=0)

    xc = x - mean
    denom = (xc**2).sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        acf = np.where(denom > 0, (xc[1:] * xc[:-1]).sum(axis=0) / denom, 0.0)

    values = np.vstack([var, trend, coef[1], coef[2], seasonal, mean, spikiness, acf])
    return FeatureMatrix(values)


@dataclass
class PcaBasis:
    center: np.ndarray
    components: np.ndarray
    explained: np.ndarray
    rank_deficient: bool

    def project(self, F) -> np.ndarray:
        """Project the columns of a (k, d) feature matrix; returns (2, d)."""
        pts = np.asarray(F, dtype=float).T - self.center
        return (pts @ self.components).T


def pca_fit(F, n_components: int = 2, tol: float = 1e-12) -> PcaBasis:
    """PCA with the columns of ``F`` as samples.

    Components are ordered by eigenvalue and signed so that each one's
    largest-magnitude loading is positive. Components with (relative)
    eigenvalue below ``tol`` are zeroed.
    """
    pts = np.asarray(F, dtype=float).T
    if pts.shape[0] < 2 or pts.shape[1] < 2:
        raise ValueError("need at least 2 features and 2 series")
    center = pts.mean(axis=0)
    xc = pts - center
    cov = xc.T @ xc / pts.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:n_components]
    evals, comps = evals[order], evecs[:, order].copy()
    if comps.shape[1] < n_components:
        pad = n_components - comps.shape[1]
        comps = np.hstack([comps, np.zeros((comps.shape[0], pad))])
        evals = np.concatenate([evals, np.zeros(pad)])
    scale = max(float(evals.max(initial=0.0)), 0.0)
    deficient = False
    for j in range(n_components):
        if evals[j] <= tol * max(scale, 1.0):
            comps[:, j] = 0.0
            evals[j] = 0.0
            deficient = True
            continue
        lead = np.argmax(np.abs(comps[:, j]))
        if comps[lead, j] < 0:
            comps[:, j] = -comps[:, j]
    return PcaBasis(center, comps, np.clip(evals, 0.0, None), deficient)


def pca_project(F) -> np.ndarray:
    """Top-2 principal coordinates of the columns of ``F``, shape (2, d)."""
    return pca_fit(F).project(F)


def _standardize_jointly(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    both = np.hstack([a, b])
    mu = both.mean(axis=1, keepdims=True)
    sd = both.std(axis=1, keepdims=True)
    sd = np.where(sd < 1e-12, 1.0, sd)
    return (a - mu) / sd, (b - mu) / sd


def sfas_scores(before, around) -> np.ndarray:
    """L1 displacement of each series between the PCA projections of two windows.

    Features are standardized over both windows jointly and projected on a
    PCA basis fitted to the points of both windows, so the two projections
    share one frame.
    """
    fb = feature_matrix(before).values
    fa = feature_matrix(around).values
    if fb.shape != fa.shape:
        raise ValueError("windows have different numbers of series")
    fb, fa = _standardize_jointly(fb, fa)
    basis = pca_fit(np.hstack([fb, fa]))
    return np.abs(basis.project(fb) - basis.project(fa)).sum(axis=0)


@dataclass
class DecisionRow:
    c1: np.ndarray
    c2: np.ndarray
    c_combined: np.ndarray
    p: int
    shortfall: int = 0


def combined_localization(stas_row, sfas_row, h1_percentile: float, h2_threshold) -> DecisionRow:
    """Combine STAS and SFAS decisions for one step or segment.

    Series that SFAS flags but STAS did not are switched on; for each such
    correction the STAS-flagged series with the lowest score (lower index on
    ties) is switched off.
    """
    stas_row = np.asarray(stas_row, dtype=float)
    sfas_row = np.asarray(sfas_row, dtype=float)
    if stas_row.shape != sfas_row.shape:
        raise ValueError("STAS and SFAS rows differ in length")
    c1 = threshold_stas(stas_row, h1_percentile)
    combined = c1.copy()
    c2 = ((sfas_row > h2_threshold) & (c1 == 0)).astype(np.int8)
    combined[c2 == 1] = 1
    p = int(c2.sum())
    flagged = np.flatnonzero(c1)
    ranked = flagged[np.lexsort((flagged, stas_row[flagged]))]
    combined[ranked[:p]] = 0
    return DecisionRow(c1, c2, combined, p, max(0, p - len(flagged)))


def window_localize(step_scores, t: int, w1: int, w2: int, agg=np.max) -> np.ndarray:
    """Aggregate per-series scores over [t - w1, t + w2], clipped to the series."""
    s = np.asarray(step_scores, dtype=float)
    if w1 < 0 or w2 < 0:
        raise ValueError("window sizes must be non-negative")
    lo = max(0, t - w1)
    hi = min(s.shape[0] - 1, t + w2)
    return agg(s[lo : hi + 1], axis=0)


def sfas_windows(values: np.ndarray, start: int, end: int, min_len: int = MIN_FEATURE_WINDOW):
    """Around window [start, end] and the equal-length window just before it.

    The before window is shortened at the start of the stream; returns None
    for it when fewer than ``min_len`` steps are available.
    """
    around = values[start : end + 1]
    m = end - start + 1
    lo = max(0, start - m)
    if start - lo < min_len:
        return around, None, True
    return around, values[lo:start], lo != start - m


class SfasPool:
    """Running pool of SFAS values whose percentile gives the correction threshold."""

    def __init__(self, q: float = 97.0, per_series: bool = False):
        self.q = q
        self.per_series = per_series
        self.rows: list[np.ndarray] = []

    def add(self, row) -> np.ndarray | float:
        self.rows.append(np.asarray(row, dtype=float))
        stacked = np.vstack(self.rows)
        if self.per_series:
            return np.percentile(stacked, self.q, axis=0)
        return float(np.percentile(stacked, self.q))


@dataclass
class SegmentDecision:
    segment: tuple[int, int]
    stas: np.ndarray
    sfas: np.ndarray
    decision: DecisionRow
    h1_percentile: float
    h2_threshold: float | list
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        h2 = self.h2_threshold.tolist() if isinstance(self.h2_threshold, np.ndarray) else self.h2_threshold
        return {
            "segment": list(self.segment),
            "stas_scores": self.stas.tolist(),
            "sfas_scores": self.sfas.tolist(),
            "c1": self.decision.c1.tolist(),
            "c2": self.decision.c2.tolist(),
            "c_combined": self.decision.c_combined.tolist(),
            "thresholds": {"h1_percentile": self.h1_percentile, "h2": h2},
            "p": self.decision.p,
            **self.meta,
        }


def segment_localize(step_scores, values, segment, h1_percentile: float, h2_threshold=None, *, pool: SfasPool | None = None,
                     w2: int = 5) -> SegmentDecision:
    """Localize a whole segment: STAS row is the max over the segment, SFAS uses
    the segment padded by ``w2`` against the preceding window.

    Give either a fixed ``h2_threshold`` or a ``pool`` from which the threshold
    is taken after adding this segment's SFAS row.
    """
    s, e = segment
    scores = np.asarray(step_scores, dtype=float)
    values = np.asarray(values, dtype=float)
    stas_row = scores[s : e + 1].max(axis=0)
    around, before, shortened = sfas_windows(values, s, min(e + w2, len(values) - 1))
    meta = {}
    if before is None:
        raise ValueError(f"segment {segment} starts too early for a {MIN_FEATURE_WINDOW}-step before window")
    if shortened:
        meta["before_window_shortened"] = True
    sfas_row = sfas_scores(before, around)
    if h2_threshold is None:
        if pool is None:
            raise ValueError("give h2_threshold or pool")
        h2_threshold = pool.add(sfas_row)
    dec = combined_localization(stas_row, sfas_row, h1_percentile, h2_threshold)
    if dec.shortfall:
        meta["correction_shortfall"] = dec.shortfall
    return SegmentDecision((s, e), stas_row, sfas_row, dec, h1_percentile, h2_threshold, meta)


@dataclass
class StepMaps:
    """Decision maps over a stream; rows not localized stay zero."""

    steps: np.ndarray
    stas: np.ndarray
    sfas: np.ndarray
    c1: np.ndarray
    c2: np.ndarray
    c_combined: np.ndarray
    h2: np.ndarray
    meta: dict = field(default_factory=dict)


def localize_steps(step_scores, values, steps, segment_starts, h1_percentiles, *, q: float = 97.0,
                   per_series: bool = False, min_window: int = 10) -> StepMaps:
    """Time-step localization at ``steps`` in increasing order.

    At step t the SFAS around window runs from the segment start (or
    ``min_window`` steps back, whichever is earlier) up to t, so only data up
    to t is used. The SFAS threshold pools every row seen so far.
    """
    scores = np.asarray(step_scores, dtype=float)
    values = np.asarray(values, dtype=float)
    n, d = scores.shape
    maps = {k: np.zeros((n, d), dtype=np.int8) for k in ("c1", "c2", "cc")}
    sfas = np.zeros((n, d))
    h2 = np.full(len(steps), np.nan)
    pool = SfasPool(q, per_series)
    skipped = []
    for j, (t, s0) in enumerate(zip(steps, segment_starts)):
        start = min(s0, t - min_window + 1)
        around, before, _ = sfas_windows(values, max(start, 0), t)
        if before is None:
            row = np.zeros(d)
            skipped.append(int(t))
        else:
            row = sfas_scores(before, around)
        thr = pool.add(row)
        h2[j] = np.mean(thr)
        dec = combined_localization(scores[t], row, h1_percentiles[j], thr)
        sfas[t] = row
        maps["c1"][t], maps["c2"][t], maps["cc"][t] = dec.c1, dec.c2, dec.c_combined
    meta = {"sfas_skipped_steps": skipped} if skipped else {}
    return StepMaps(np.asarray(steps), scores, sfas, maps["c1"], maps["c2"], maps["cc"], h2, meta)
