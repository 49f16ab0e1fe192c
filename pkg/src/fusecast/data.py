"""Dataset ingestion, chronological splits, windowing, and the domain registry."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np
import yaml

SPLITS = ("train", "val", "test")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class DomainDataset:
    """A (d, N) multivariate series with contiguous train/val/test index ranges."""

    name: str
    values: np.ndarray = field(repr=False)
    frequency: str = ""
    splits: dict = field(default_factory=dict)
    weight: float = 1.0
    channel_names: tuple = ()

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]

    def split_range(self, split: str) -> tuple[int, int]:
        if split == "all":
            return 0, self.length
        if split not in self.splits:
            raise DataError(f"dataset {self.name!r} has no split {split!r}; call split_standard first")
        return self.splits[split]

    def split_values(self, split: str) -> np.ndarray:
        lo, hi = self.split_range(split)
        return self.values[:, lo:hi]


def load_csv(path, name: str | None = None, nan: str = "error", frequency: str = "",
             weight: float = 1.0) -> DomainDataset:
    """Read a wide CSV: header row, first column timestamp, remaining columns numeric channels."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"dataset file not found: {path}")
    if nan not in ("error", "ffill"):
        raise DataError(f"unknown NaN policy {nan!r}; expected 'error' or 'ffill'")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise DataError(f"{path}: no data rows")
    header = rows[0]
    if len(header) < 2:
        raise DataError(f"{path}: need a timestamp column and at least one channel")
    out = np.empty((len(rows) - 1, len(header) - 1), dtype=np.float64)
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataError(f"{path}: row {i} has {len(row)} fields, expected {len(header)}")
        for j, cell in enumerate(row[1:]):
            try:
                out[i - 2, j] = float(cell) if cell.strip() != "" else math.nan
            except ValueError:
                raise DataError(f"{path}: non-numeric cell {cell!r} at row {i}, column {header[j + 1]!r}") from None
    bad = np.argwhere(~np.isfinite(out))
    if len(bad):
        if nan == "error":
            r, c = bad[0]
            raise DataError(f"{path}: missing or non-finite value at row {r + 2}, column {header[c + 1]!r}")
        out = _ffill(out, path, header)
    return DomainDataset(name or path.stem, out.T.copy(), frequency, {}, weight, tuple(header[1:]))


def _ffill(a: np.ndarray, path, header) -> np.ndarray:
    a = a.copy()
    for j in range(a.shape[1]):
        col = a[:, j]
        ok = np.isfinite(col)
        if not ok[0]:
            raise DataError(f"{path}: column {header[j + 1]!r} starts with a gap; cannot forward-fill")
        idx = np.where(ok, np.arange(len(col)), 0)
        np.maximum.accumulate(idx, out=idx)
        a[:, j] = col[idx]
    return a


def write_csv(path, values: np.ndarray, channel_names=None, timestamps=None) -> None:
    """Write (d, N) values in the wide format read by :func:`load_csv`."""
    values = np.asarray(values, dtype=np.float64)
    d, n = values.shape
    names = list(channel_names) if channel_names else [f"ch{i}" for i in range(d)]
    stamps = list(timestamps) if timestamps is not None else list(range(n))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", *names])
        for k in range(n):
            w.writerow([stamps[k], *(repr(float(v)) for v in values[:, k])])


def split_standard(ds: DomainDataset, ratios=(0.7, 0.1, 0.2)) -> DomainDataset:
    """Contiguous chronological split; train/val sizes are floored and the remainder goes to test."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise DataError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = ds.length
    n_train = math.floor(n * ratios[0] + 1e-9)
    n_val = math.floor(n * ratios[1] + 1e-9)
    splits = {"train": (0, n_train), "val": (n_train, n_train + n_val), "test": (n_train + n_val, n)}
    return replace(ds, splits=splits)


def window_count(split_len: int, L: int, H: int) -> int:
    return max(split_len - L - H + 1, 0)


def make_windows(ds: DomainDataset, split: str, L: int, H: int, *, mode: str = "eval",
                 rng: np.random.Generator | None = None, count: int | None = None
                 ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (observation (d, L), target (d, H)) pairs confined to one split.

    ``mode="eval"`` walks every start with stride 1; ``mode="train"`` draws
    ``count`` uniformly random starts (forever if ``count`` is None).
    """
    lo, hi = ds.split_range(split)
    n_win = window_count(hi - lo, L, H)
    if n_win == 0:
        raise DataError(f"split {split!r} of {ds.name!r} has {hi - lo} points; need at least L+H={L + H}")
    if mode == "eval":
        starts = range(lo, lo + n_win)
    elif mode == "train":
        rng = rng if rng is not None else np.random.default_rng()

        def _random_starts():
            k = 0
            while count is None or k < count:
                yield lo + int(rng.integers(n_win))
                k += 1
        starts = _random_starts()
    else:
        raise ValueError(f"unknown window mode {mode!r}")
    for s in starts:
        yield ds.values[:, s:s + L], ds.values[:, s + L:s + L + H]


def sample_batch(ds: DomainDataset, split: str, L: int, H: int, batch_size: int,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random training batch: arrays of shape (B, d, L) and (B, d, H)."""
    pairs = list(make_windows(ds, split, L, H, mode="train", rng=rng, count=batch_size))
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def eval_batches(ds: DomainDataset, split: str, L: int, H: int, stride: int = 1):
    """All evaluation windows of a split as stacked arrays, optionally thinned by ``stride``."""
    pairs = list(make_windows(ds, split, L, H, mode="eval"))[::stride]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


class DomainSampler:
    """Draws a domain index per iteration in proportion to its mixture weight."""

    def __init__(self, weights, rng: np.random.Generator):
        w = np.asarray(weights, dtype=np.float64)
        if w.ndim != 1 or len(w) == 0:
            raise DataError("need at least one domain")
        if (w < 0).any() or not np.isfinite(w).all() or w.sum() <= 0:
            raise DataError(f"mixture weights must be non-negative with positive sum, got {w.tolist()}")
        self.probs = w / w.sum()
        self.rng = rng

    def draw(self) -> int:
        if len(self.probs) == 1:
            return 0
        return int(self.rng.choice(len(self.probs), p=self.probs))


def synthetic_dataset(name: str = "synthetic", n: int = 2000, channels: int = 2, periods=(24, 60),
                      amplitudes=(1.0, 0.5), slope: float = 0.002, noise: float = 0.05,
                      seed: int = 0, phase_shift: float = 0.7) -> DomainDataset:
    """Sum of sinusoids plus a linear trend plus Gaussian noise, one phase offset per channel."""
    rng = np.random.default_rng(seed)
    t = np.arange(n, dtype=np.float64)
    rows = []
    for c in range(channels):
        x = slope * (c + 1) * t
        for p, a in zip(periods, amplitudes):
            x = x + a * np.sin(2 * np.pi * t / p + phase_shift * c)
        rows.append(x + noise * rng.standard_normal(n))
    return DomainDataset(name, np.stack(rows), "synthetic", {}, 1.0, tuple(f"ch{c}" for c in range(channels)))


def load_registry(path) -> list[DomainDataset]:
    """Read a YAML list of {name, path, weight, frequency, nan, ratios} entries; relative paths resolve next to the file."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"dataset registry not found: {path}")
    entries = yaml.safe_load(path.read_text()) or []
    if isinstance(entries, dict):
        entries = entries.get("datasets", [])
    return [dataset_from_entry(e, path.parent) for e in entries]


def dataset_from_entry(entry: dict, base: Path | None = None) -> DomainDataset:
    entry = dict(entry)
    ratios = tuple(entry.get("ratios", (0.7, 0.1, 0.2)))
    weight = float(entry.get("weight", 1.0))
    if "synthetic" in entry:
        ds = synthetic_dataset(name=entry.get("name", "synthetic"), **(entry["synthetic"] or {}))
        ds = replace(ds, weight=weight)
    else:
        if "path" not in entry:
            raise DataError(f"dataset entry {entry.get('name')!r} has neither 'path' nor 'synthetic'")
        p = Path(entry["path"])
        if base is not None and not p.is_absolute():
            p = base / p
        ds = load_csv(p, name=entry.get("name"), nan=entry.get("nan", "error"),
                      frequency=entry.get("frequency", ""), weight=weight)
    return split_standard(ds, ratios)
