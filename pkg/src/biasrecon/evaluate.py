"""Masked percentage RMSE and paired permutation significance testing.

The error metric compares reconstruction magnitudes against reference
magnitudes inside a mask: 100 * sqrt(sum (|a|-|b|)^2 / sum |b|^2). Method
comparisons use a paired sign-flip permutation test on the mean
per-sample difference (two-sided, add-one p-value estimator, so p is
never 0 and never below 1/(n_perm+1)). Each permutation's sign pattern is
drawn from a seed derived from the permutation index, which makes the
test deterministic and independent of evaluation order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .numerics import derive_seed

__all__ = [
    "rmse_percent",
    "permutation_test",
    "EvalReport",
    "make_report",
    "write_report_json",
    "write_table_csv",
]


def rmse_percent(recon_bx: np.ndarray, reference: np.ndarray, mask: np.ndarray) -> float:
    """Percent RMSE of magnitudes over in-mask pixels.

    100 * sqrt(sum_mask (|recon| - |ref|)^2 / sum_mask |ref|^2). Scaling
    both images by the same factor leaves the value unchanged; scaling
    only the reconstruction does not.
    """
    a = np.asarray(recon_bx)
    b = np.asarray(reference)
    m = np.asarray(mask)
    if a.shape != b.shape or m.shape != a.shape:
        raise ValueError(
            f"shape mismatch: recon {a.shape}, reference {b.shape}, mask {m.shape}"
        )
    if not np.all(np.isin(np.unique(m), (0, 1, False, True))):
        raise ValueError("mask must be binary")
    m = m.astype(bool)
    if not m.any():
        raise ValueError("mask is empty")
    ref_mag = np.abs(b[m])
    energy = float(np.sum(ref_mag**2))
    if energy <= 0:
        raise ValueError("reference has zero energy inside the mask")
    diff = np.abs(a[m]) - ref_mag
    return 100.0 * float(np.sqrt(np.sum(diff**2) / energy))


def permutation_test(a: np.ndarray, b: np.ndarray, n_perm: int = 10000, seed: int = 0) -> float:
    """Two-sided paired sign-flip permutation p-value for mean(a - b) = 0.

    Permutation k flips the signs of the paired differences according to
    a draw from derive_seed(seed, k); the p-value is
    (1 + #{|perm stat| >= |observed|}) / (1 + n_perm). Swapping a and b
    gives the identical value.
    """
    av = np.asarray(a, dtype=np.float64).ravel()
    bv = np.asarray(b, dtype=np.float64).ravel()
    if av.shape != bv.shape:
        raise ValueError(f"length mismatch: {av.shape} vs {bv.shape}")
    n = av.size
    if n < 2:
        raise ValueError("need at least 2 pairs")
    if n_perm < 1:
        raise ValueError("n_perm must be >= 1")
    d = av - bv
    observed = abs(float(d.mean()))
    count = 0
    for k in range(n_perm):
        signs = np.random.default_rng(derive_seed(seed, k)).integers(0, 2, size=n)
        stat = abs(float(np.mean(np.where(signs == 1, d, -d))))
        if stat >= observed * (1.0 - 1e-12):
            count += 1
    return (1 + count) / (1 + n_perm)


@dataclass(frozen=True)
class EvalReport:
    """Per-method RMSE samples with summary stats and pairwise p-values."""

    per_sample: dict[str, np.ndarray]
    mean: dict[str, float]
    std: dict[str, float]
    p_value: dict[str, float]
    n_permutations: int
    seed: int
    labels: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for name, vals in self.per_sample.items():
            if np.any(np.asarray(vals) < 0):
                raise ValueError(f"negative RMSE for method {name!r}")
        for pair, p in self.p_value.items():
            if not 0.0 < p <= 1.0:
                raise ValueError(f"p-value {p} for {pair!r} outside (0, 1]")


def make_report(
    per_sample: dict[str, np.ndarray], n_permutations: int = 10000, seed: int = 0
) -> EvalReport:
    """Summarize per-sample RMSEs and test every method pair."""
    if not per_sample:
        raise ValueError("no methods to report")
    lengths = {name: len(np.ravel(v)) for name, v in per_sample.items()}
    if len(set(lengths.values())) != 1:
        raise ValueError(f"methods disagree on sample count: {lengths}")
    clean = {n: np.asarray(v, dtype=np.float64).ravel() for n, v in per_sample.items()}
    mean = {n: float(v.mean()) for n, v in clean.items()}
    std = {n: float(v.std(ddof=1)) if v.size > 1 else 0.0 for n, v in clean.items()}
    names = sorted(clean)
    p_value = {}
    for i, na in enumerate(names):
        for nb in names[i + 1 :]:
            p_value[f"{na} vs {nb}"] = permutation_test(
                clean[na], clean[nb], n_perm=n_permutations, seed=seed
            )
    return EvalReport(
        per_sample=clean, mean=mean, std=std, p_value=p_value,
        n_permutations=n_permutations, seed=seed,
    )


def write_report_json(reports_by_r: dict[int, EvalReport], path: str | Path) -> None:
    """One JSON document holding every acceleration's report."""
    doc = {}
    for r in sorted(reports_by_r):
        rep = reports_by_r[r]
        doc[f"R={r}"] = {
            "per_sample": {n: [float(x) for x in v] for n, v in sorted(rep.per_sample.items())},
            "mean": {n: rep.mean[n] for n in sorted(rep.mean)},
            "std": {n: rep.std[n] for n in sorted(rep.std)},
            "p_value": {n: rep.p_value[n] for n in sorted(rep.p_value)},
            "n_permutations": rep.n_permutations,
            "seed": rep.seed,
        }
    io.write_json(path, doc)


def write_table_csv(reports_by_r: dict[int, EvalReport], path: str | Path) -> None:
    """CSV summary: one row per method, one "mean (std)" cell per R."""
    rs = sorted(reports_by_r)
    methods: list[str] = []
    for r in rs:
        for name in sorted(reports_by_r[r].per_sample):
            if name not in methods:
                methods.append(name)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method"] + [f"R = {r}" for r in rs])
        for name in methods:
            row = [name]
            for r in rs:
                rep = reports_by_r[r]
                if name in rep.mean:
                    row.append(f"{rep.mean[name]:.2f} ({rep.std[name]:.2f})")
                else:
                    row.append("")
            writer.writerow(row)
