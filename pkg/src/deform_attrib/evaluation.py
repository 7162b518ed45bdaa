"""Masked normalized cross-correlation and subject-level scoring."""

from __future__ import annotations

import csv
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import torch


class DegeneratePair(ValueError):
    """A difference map is constant inside the mask, so NCC is undefined."""


@dataclass
class PairedSample:
    x1: np.ndarray
    dx_true: np.ndarray
    mask: np.ndarray
    subject_id: str
    pair_id: str = ""

    def __post_init__(self):
        if not (self.x1.shape == self.dx_true.shape == self.mask.shape):
            raise ValueError(
                f"pair {self.pair_id}: shapes {self.x1.shape}, {self.dx_true.shape}, {self.mask.shape}"
            )
        if np.count_nonzero(self.mask) < 2:
            raise ValueError(f"pair {self.pair_id}: mask needs at least 2 pixels")


def ncc(dx, dx_hat, mask) -> float:
    """NCC of two difference maps over the pixels where ``mask`` is true.

    Both maps are standardized with their masked mean and unbiased standard
    deviation; the products are summed and divided by ``M - 1``.
    """
    dx = np.asarray(dx, dtype=np.float64)
    dx_hat = np.asarray(dx_hat, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not (dx.shape == dx_hat.shape == mask.shape):
        raise ValueError(f"ncc: shapes {dx.shape}, {dx_hat.shape}, {mask.shape} differ")
    a, b = dx[mask], dx_hat[mask]
    m = a.size
    if m < 2:
        raise ValueError("ncc: mask must select at least 2 pixels")
    # test constancy exactly: rounding in the mean can leave a tiny nonzero std
    if a.max() == a.min() or b.max() == b.min():
        raise DegeneratePair("ncc: difference map is constant inside the mask")
    sa, sb = a.std(ddof=1), b.std(ddof=1)
    if not np.isfinite(sa * sb):
        raise DegeneratePair("ncc: difference map is constant inside the mask")
    value = float(np.sum((a - a.mean()) / sa * ((b - b.mean()) / sb)) / (m - 1))
    return min(1.0, max(-1.0, value))


@dataclass
class PairScore:
    subject_id: str
    pair_id: str
    ncc: float  # NaN when degenerate
    degenerate: bool


@dataclass
class EvalReport:
    pairs: list
    subject_means: "OrderedDict[str, float]" = field(default_factory=OrderedDict)
    mean: float = float("nan")
    std: float = float("nan")

    @property
    def n_degenerate(self) -> int:
        return sum(p.degenerate for p in self.pairs)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["subject_id", "pair_id", "ncc", "degenerate"])
            for p in self.pairs:
                w.writerow([p.subject_id, p.pair_id, _fmt(p.ncc), int(p.degenerate)])
            w.writerow(["__mean__", "", _fmt(self.mean), self.n_degenerate])
            w.writerow(["__std__", "", _fmt(self.std), ""])


def _fmt(x: float) -> str:
    return "nan" if not np.isfinite(x) else repr(float(x))


def aggregate(scores: list[PairScore]) -> EvalReport:
    """Average pairs within each subject, then average the subject means."""
    per_subject: "OrderedDict[str, list]" = OrderedDict()
    for s in scores:
        per_subject.setdefault(s.subject_id, [])
        if not s.degenerate:
            per_subject[s.subject_id].append(s.ncc)
    means = OrderedDict((sid, float(np.mean(v))) for sid, v in per_subject.items() if v)
    report = EvalReport(pairs=list(scores), subject_means=means)
    if means:
        vals = np.array(list(means.values()))
        report.mean = float(vals.mean())
        report.std = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
    if report.n_degenerate:
        warnings.warn(f"{report.n_degenerate} degenerate pair(s) excluded from NCC", stacklevel=2)
    return report


def score_pairs(pairs, predicted_differences) -> EvalReport:
    scores = []
    for pair, dx_hat in zip(pairs, predicted_differences):
        try:
            value, degenerate = ncc(pair.dx_true, dx_hat, pair.mask), False
        except DegeneratePair:
            value, degenerate = float("nan"), True
        scores.append(PairScore(pair.subject_id, pair.pair_id, value, degenerate))
    return aggregate(scores)


def evaluate(generator, pairs, batch_size: int = 32) -> EvalReport:
    """Score a generator on paired samples.

    ``generator`` is a model from :mod:`deform_attrib.models` (its config
    says whether it outputs a field or an additive map) or any callable
    mapping an ``(N, 1, *S)`` tensor of diseased images to the modified
    images.
    """
    from .models import modify

    if not pairs:
        raise ValueError("evaluate: no pairs")
    diffs = []
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i:i + batch_size]
        x1 = torch.from_numpy(np.stack([p.x1 for p in chunk])[:, None].astype(np.float32))
        with torch.no_grad():
            if hasattr(generator, "cfg"):
                x_hat0, _ = modify(generator, x1)
            else:
                x_hat0 = generator(x1)
        diffs.extend((x_hat0 - x1)[:, 0].numpy())
    return score_pairs(pairs, diffs)
