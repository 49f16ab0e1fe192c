"""Point and probabilistic forecast metrics.

Empirical quantiles use numpy's default linear-interpolation convention
(``method="linear"``, type 7); this choice is fixed so scores are comparable
across runs.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

METRIC_NAMES = ("mse", "mae", "crps", "picp", "qice", "correlational_score")


def _pair(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    return pred, truth


def mse(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.mean((pred - truth) ** 2))


def mae(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.mean(np.abs(pred - truth)))


def _ensemble(samples, y):
    """Samples with the member axis first: (S, *point_shape); y has point_shape."""
    samples = np.asarray(samples, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if samples.ndim == y.ndim:
        samples = samples[None]  # a single point forecast
    if samples.shape[0] == 0:
        raise ValueError("empty ensemble")
    if samples.shape[1:] != y.shape:
        raise ValueError(f"ensemble point shape {samples.shape[1:]} != truth shape {y.shape}")
    return samples.reshape(samples.shape[0], -1), y.reshape(-1)


def crps_ensemble(samples, y) -> float:
    """Mean over points of E|X - y| - 0.5 E|X - X'| under the empirical ensemble CDF.

    The pairwise term is evaluated through the sorted-sample identity
    sum_{i,j}|x_i - x_j| = 2 sum_k (2k - S - 1) x_(k), so cost is O(S log S) per point.
    """
    s, y = _ensemble(samples, y)
    S = s.shape[0]
    term1 = np.mean(np.abs(s - y[None]), axis=0)
    xs = np.sort(s, axis=0)
    k = np.arange(1, S + 1, dtype=np.float64)[:, None]
    pair_sum = 2.0 * np.sum((2 * k - S - 1) * xs, axis=0)
    term2 = pair_sum / (S * S)
    return float(np.mean(term1 - 0.5 * term2))


def _quantiles(s: np.ndarray, qs) -> np.ndarray:
    return np.quantile(s, qs, axis=0, method="linear")


def picp(samples, y, low_q: float = 0.05, high_q: float = 0.95) -> float:
    """Fraction of points whose truth lies inside the [low_q, high_q] empirical band."""
    if not 0.0 <= low_q < high_q <= 1.0:
        raise ValueError(f"need 0 <= low_q < high_q <= 1, got ({low_q}, {high_q})")
    s, y = _ensemble(samples, y)
    lo, hi = _quantiles(s, [low_q, high_q])
    return float(np.mean((y >= lo) & (y <= hi)))


def qice(samples, y, M: int = 10) -> float:
    """Mean absolute deviation of per-bin truth coverage from 1/M over M equal-mass bins.

    Bin edges are the empirical quantiles at 0, 1/M, ..., 1. Interior bins are
    half-open on the right so each truth is counted once; truths below the
    ensemble minimum join the first bin and those above the maximum the last,
    which keeps the coverage fractions summing to one.
    """
    if M < 2:
        raise ValueError(f"need M >= 2 quantile bins, got {M}")
    s, y = _ensemble(samples, y)
    if s.shape[0] < M:
        raise ValueError(f"{s.shape[0]} ensemble members cannot define {M} quantile bins")
    edges = _quantiles(s, np.linspace(0.0, 1.0, M + 1))  # (M+1, N)
    inner = edges[1:-1]  # (M-1, N)
    bins = np.sum(y[None] >= inner, axis=0)  # 0..M-1
    r = np.bincount(bins, minlength=M) / y.size
    return float(np.mean(np.abs(r - 1.0 / M)))


def _correlation(x: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """Correlation matrix from population covariances; zero-variance channels get a clamped std."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=1, keepdims=True)
    cov = (x @ x.T) / x.shape[1] - mean @ mean.T
    var = np.diag(cov).copy()
    flagged = [int(i) for i in np.where(var <= 1e-20)[0]]
    sd = np.sqrt(np.maximum(var, 1e-10))
    corr = cov / np.outer(sd, sd)
    for i in flagged:
        corr[i, i] = 1.0  # constant channel: define self-correlation as 1
    return corr, flagged


def correlational_score(real, synth, return_flags: bool = False):
    """(1/10)·Σ_{i,j} |ρ_real(i,j) - ρ_synth(i,j)| over (d, T) matrices."""
    real = np.asarray(real, dtype=np.float64)
    synth = np.asarray(synth, dtype=np.float64)
    if real.ndim != 2 or real.shape != synth.shape:
        raise ValueError(f"need equal (d, T) matrices, got {real.shape} and {synth.shape}")
    if real.shape[1] < 2:
        raise ValueError("need T >= 2")
    cr, fr = _correlation(real)
    cs, fs = _correlation(synth)
    score = float(np.sum(np.abs(cr - cs)) / 10.0)
    if return_flags:
        return score, sorted(set(fr) | set(fs))
    return score


@dataclass
class MetricReport:
    """Nested {dataset: {horizon: {metric: value}}} plus sample counts and a config echo."""

    results: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    def add(self, dataset: str, horizon: int, metrics: dict, n_points: int, n_samples: int) -> None:
        self.results.setdefault(dataset, {})[str(horizon)] = {k: float(v) for k, v in metrics.items()}
        self.counts.setdefault(dataset, {})[str(horizon)] = {"points": int(n_points), "samples": int(n_samples)}

    def to_dict(self) -> dict:
        return {"results": self.results, "counts": self.counts, "config": self.config, "flags": self.flags}

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def flat_rows(self) -> list[dict]:
        rows = []
        for ds, by_h in sorted(self.results.items()):
            for h, metrics in sorted(by_h.items(), key=lambda kv: int(kv[0])):
                for name, value in metrics.items():
                    rows.append({"dataset": ds, "horizon": int(h), "metric": name, "value": value})
        return rows

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["dataset", "horizon", "metric", "value"], lineterminator="\n")
            w.writeheader()
            for row in self.flat_rows():
                w.writerow({**row, "value": repr(row["value"])})


REPORT_SCHEMA = {
    "type": "object",
    "required": ["results", "counts", "config", "flags"],
    "properties": {
        "results": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "additionalProperties": {
                    "type": "object",
                    "propertyNames": {"enum": list(METRIC_NAMES)},
                    "additionalProperties": {"type": "number", "minimum": 0},
                },
            },
        },
        "counts": {"type": "object"},
        "config": {"type": "object"},
        "flags": {"type": "array"},
    },
}


def compute_metrics(names, truth: np.ndarray, point: np.ndarray, ensemble: np.ndarray | None,
                    picp_band=(0.05, 0.95), qice_bins: int = 10) -> tuple[dict, list]:
    """Evaluate ``names`` on truth (B, d, H) or (d, H); probabilistic metrics need ``ensemble`` (S, ...)."""
    unknown = [n for n in names if n not in METRIC_NAMES]
    if unknown:
        raise ValueError(f"unknown metric(s) {unknown}; valid names: {', '.join(METRIC_NAMES)}")
    out, flags = {}, []
    ens = ensemble if ensemble is not None else np.asarray(point)[None]
    for name in names:
        if name == "mse":
            out[name] = mse(point, truth)
        elif name == "mae":
            out[name] = mae(point, truth)
        elif name == "crps":
            out[name] = crps_ensemble(ens, truth)
        elif name == "picp":
            out[name] = picp(ens, truth, *picp_band)
        elif name == "qice":
            if ens.shape[0] < qice_bins:
                flags.append(f"qice skipped: {ens.shape[0]} samples < {qice_bins} bins")
                continue
            out[name] = qice(ens, truth, qice_bins)
        elif name == "correlational_score":
            t2 = np.asarray(truth).reshape(-1, np.asarray(truth).shape[-2], np.asarray(truth).shape[-1])
            p2 = np.asarray(point).reshape(t2.shape)
            # channels x (windows * horizon)
            real = np.concatenate(list(t2), axis=-1) if t2.shape[0] > 1 else t2[0]
            syn = np.concatenate(list(p2), axis=-1) if p2.shape[0] > 1 else p2[0]
            score, zero_var = correlational_score(real, syn, return_flags=True)
            if zero_var:
                flags.append(f"correlational_score: zero-variance channels {zero_var}")
            out[name] = score
    for k, v in out.items():
        if not math.isfinite(v):
            raise ValueError(f"metric {k} is not finite")
    return out, flags
