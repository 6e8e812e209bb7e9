"""Scoring of predictions and fit: CRPS, MAE/RMSPE, coverage, WAIC, summaries."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
from scipy.special import logsumexp

from . import dataio
from .geometry import SpatialDataset
from .inference import PosteriorChain


def crps_empirical(draws, y: float) -> float:
    """Sample-based CRPS of an ensemble against one observation.

    mean_k |Y_k - y| - 0.5 * mean over all ordered pairs |Y_k - Y_l|,
    evaluated with the O(K log K) sorted identity for the pair term.
    """
    x = np.sort(np.asarray(draws, dtype=np.float64).ravel())
    K = len(x)
    if K < 2:
        raise ValueError("CRPS needs at least 2 draws")
    term_obs = float(np.mean(np.abs(x - y)))
    i = np.arange(K)
    pair_sum = 2.0 * float(np.sum(x * (2.0 * i - K + 1)))
    return term_obs - 0.5 * pair_sum / (K * K)


def crps_mean(draws: np.ndarray, y_true) -> float:
    """Per-location CRPS averaged over locations; draws is (K, T)."""
    draws = np.asarray(draws, dtype=np.float64)
    y_true = np.asarray(y_true, dtype=np.float64).ravel()
    if draws.ndim != 2 or draws.shape[1] != len(y_true):
        raise ValueError("draws must be (K, T) matching y_true")
    return float(np.mean([crps_empirical(draws[:, t], y_true[t])
                          for t in range(len(y_true))]))


def point_metrics(pred_means, lower, upper, y_true) -> tuple[float, float, float, float]:
    """(MAE, RMSPE, coverage, median interval width); intervals are closed."""
    pred = np.asarray(pred_means, dtype=np.float64).ravel()
    lo = np.asarray(lower, dtype=np.float64).ravel()
    hi = np.asarray(upper, dtype=np.float64).ravel()
    y = np.asarray(y_true, dtype=np.float64).ravel()
    if not len(pred) == len(lo) == len(hi) == len(y):
        raise ValueError("point_metrics inputs must share a length")
    err = pred - y
    mae = float(np.mean(np.abs(err)))
    rmspe = float(np.sqrt(np.mean(err * err)))
    coverage = float(np.mean((y >= lo) & (y <= hi)))
    median_width = float(np.median(hi - lo))
    return mae, rmspe, coverage, median_width


def pointwise_loglik(chain: PosteriorChain, dataset: SpatialDataset) -> np.ndarray:
    """(K, n) log N(y_i | x_i'beta_k + w_ik, tau2_k) over stored-w draws."""
    if chain.w is None or len(chain.w) == 0:
        raise ValueError("WAIC requires stored w draws")
    rows = chain.w_rows
    beta = chain.beta[rows]
    tau2 = chain.tau2[rows][:, None]
    mu = beta @ dataset.design.T + chain.w
    resid = dataset.response[None, :] - mu
    return -0.5 * (np.log(2.0 * np.pi * tau2) + resid * resid / tau2)


def waic(chain: PosteriorChain, dataset: SpatialDataset) -> float:
    """Watanabe-Akaike criterion -2 (lppd - p_waic).

    lppd uses log-sum-exp over draws; p_waic is the summed posterior variance
    of the pointwise log likelihood (0 for a single draw).
    """
    ll = pointwise_loglik(chain, dataset)
    K = ll.shape[0]
    lppd = float(np.sum(logsumexp(ll, axis=0) - np.log(K)))
    p_waic = float(np.sum(np.var(ll, axis=0, ddof=1))) if K > 1 else 0.0
    return -2.0 * (lppd - p_waic)


@dataclass(frozen=True)
class ParamSummary:
    mean: float
    lower: float
    upper: float
    width: float
    captured: bool | None


def parameter_summary(chain: PosteriorChain, truths: dict | None = None) -> dict:
    """Posterior mean and equal-tailed 95% CI per parameter.

    Keys: beta0..beta{p-1}, sigma2, phi, tau2. When `truths` provides a value
    for a parameter, `captured` flags whether the closed CI contains it.
    """
    if chain.n_draws == 0:
        raise ValueError("empty chain")
    series = {f"beta{j}": chain.beta[:, j] for j in range(chain.p)}
    series.update(sigma2=chain.sigma2, phi=chain.phi, tau2=chain.tau2)
    out = {}
    for name, x in series.items():
        lo, hi = np.quantile(x, [0.025, 0.975])
        cap = None
        if truths is not None and name in truths:
            cap = bool(lo <= truths[name] <= hi)
        out[name] = ParamSummary(mean=float(np.mean(x)), lower=float(lo),
                                 upper=float(hi), width=float(hi - lo),
                                 captured=cap)
    return out


@dataclass(frozen=True)
class MetricReport:
    """One model/dataset scorecard, exportable as JSON or a one-row CSV."""

    crps: float
    mae: float
    rmspe: float
    coverage: float
    median_width: float
    waic: float
    fitting_time_hours: float

    FIELDS = ("crps", "mae", "rmspe", "coverage", "median_width", "waic",
              "fitting_time_hours")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: d[k] for k in self.FIELDS}

    def save_json(self, path: str) -> None:
        dataio.write_json(path, self.to_dict())

    def save_csv(self, path: str) -> None:
        d = self.to_dict()
        dataio.write_table(path, list(d.keys()),
                           [np.array([v]) for v in d.values()])


def score_predictions(draws: np.ndarray, pred_means, lower, upper, y_true,
                      chain: PosteriorChain, dataset: SpatialDataset) -> MetricReport:
    """Assemble the full scorecard for one fitted model."""
    mae, rmspe, coverage, median_width = point_metrics(pred_means, lower, upper, y_true)
    return MetricReport(
        crps=crps_mean(draws, y_true),
        mae=mae,
        rmspe=rmspe,
        coverage=coverage,
        median_width=median_width,
        waic=waic(chain, dataset),
        fitting_time_hours=chain.timings["total"] / 3600.0,
    )
