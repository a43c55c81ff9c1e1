"""Region Dice scores and paired Wilcoxon signed-rank tests."""
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .training import predict_proba, prepare_image

DEFAULT_REGIONS = {
    "whole": frozenset({2, 3, 4, 5}),
    "core": frozenset({2, 4, 5}),
    "active": frozenset({5}),
}
EXACT_MAX_N = 12


def validate_regions(regions):
    for name, labels in regions.items():
        if not set(labels) <= set(range(6)):
            raise ValueError(f"region {name!r} has labels outside 0..5")
    names = ("active", "core", "whole")
    if all(n in regions for n in names):
        if not set(regions["active"]) <= set(regions["core"]) <= set(regions["whole"]):
            raise ValueError("regions must nest: active within core within whole")
    return regions


def dice_region(prediction, truth, region):
    """Hard Dice of the voxels whose label falls in ``region``; 1.0 when both are empty."""
    prediction = np.asarray(prediction)
    truth = np.asarray(truth)
    if prediction.shape != truth.shape:
        raise ValueError(f"shape mismatch: prediction {prediction.shape} vs truth {truth.shape}")
    labels = np.fromiter(region, dtype=np.int64)
    a = np.isin(prediction, labels)
    b = np.isin(truth, labels)
    size = int(a.sum()) + int(b.sum())
    if size == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / size


@dataclass
class DiceReport:
    """Per-subject region Dice, stored in percent."""

    regions: tuple
    subjects: list = field(default_factory=list)
    scores: dict = field(default_factory=dict)  # region -> list aligned with subjects

    def add(self, subject, values):
        self.subjects.append(subject)
        for r in self.regions:
            self.scores.setdefault(r, []).append(float(values[r]))

    def mean(self, region):
        return float(np.mean(self.scores[region]))

    def std(self, region):
        # population standard deviation over subjects
        return float(np.std(self.scores[region]))

    def to_text(self):
        lines = []
        for i, s in enumerate(self.subjects):
            for r in self.regions:
                lines.append(f"{s}\t{r}\t{self.scores[r][i]:.4f}")
        for r in self.regions:
            lines.append(f"# mean\t{r}\t{self.mean(r):.1f}")
        for r in self.regions:
            lines.append(f"# std\t{r}\t{self.std(r):.1f}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        regions, subjects, scores = [], [], {}
        for n, line in enumerate(text.splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"line {n}: expected 'subject<TAB>region<TAB>dice'")
            subject, region, value = parts
            if region not in regions:
                regions.append(region)
            if not subjects or subjects[-1] != subject:
                subjects.append(subject)
            scores.setdefault(region, []).append(float(value))
        lengths = {len(v) for v in scores.values()}
        if len(lengths) > 1 or (lengths and lengths.pop() != len(subjects)):
            raise ValueError("report does not list every region for every subject")
        return cls(tuple(regions), subjects, scores)


def evaluate(checkpoint, samples, regions=None, names=None):
    """Argmax segmentation of every sample, scored per region (percent)."""
    regions = validate_regions(dict(DEFAULT_REGIONS if regions is None else regions))
    arch = checkpoint.arch
    names = names or [f"subject_{i:04d}" for i in range(len(samples))]
    report = DiceReport(tuple(regions))
    for name, sample in zip(names, samples):
        if sample.n_modalities != arch.n_modalities:
            raise ValueError(
                f"{name}: sample has {sample.n_modalities} modalities, checkpoint expects {arch.n_modalities}"
            )
        x = prepare_image(sample.image, checkpoint.scale)
        probs = predict_proba(arch, checkpoint.params, [x])[0]
        pred = probs.argmax(axis=0)
        report.add(name, {r: 100.0 * dice_region(pred, sample.labels, labels) for r, labels in regions.items()})
    return report


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank test
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float  # min(W+, W-)
    pvalue: float
    n: int
    w_plus: float
    w_minus: float
    exact: bool


def _average_ranks(values):
    """1-based ranks with ties sharing their average rank, returned doubled (integers)."""
    order = np.argsort(values, kind="mergesort")
    ranks2 = np.empty(len(values), dtype=np.int64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        # ranks i+1 .. j+1 average to (i + j + 2) / 2
        ranks2[order[i:j + 1]] = i + j + 2
        i = j + 1
    return ranks2


def wilcoxon_signed_rank(a, b, alternative="two-sided"):
    """Paired signed-rank test on ``a - b`` with zero differences discarded.

    Exact enumeration of all sign patterns for n <= 12, otherwise a normal
    approximation with tie and continuity corrections.  ``alternative`` is
    ``"two-sided"``, ``"greater"`` (a tends to exceed b) or ``"less"``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired scores must be 1-D arrays of equal length")
    if alternative not in ("two-sided", "greater", "less"):
        raise ValueError(f"unknown alternative {alternative!r}")
    d = a - b
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise ValueError("no nonzero pairs")
    ranks2 = _average_ranks(np.abs(d))
    w_plus2 = int(ranks2[d > 0].sum())
    total2 = int(ranks2.sum())
    w_minus2 = total2 - w_plus2
    stat2 = min(w_plus2, w_minus2)

    if n <= EXACT_MAX_N:
        sums = kernels.signed_rank_sums(ranks2)
        count = len(sums)
        if alternative == "two-sided":
            k = int(np.count_nonzero(np.minimum(sums, total2 - sums) <= stat2))
        elif alternative == "greater":
            k = int(np.count_nonzero(sums >= w_plus2))
        else:
            k = int(np.count_nonzero(sums <= w_plus2))
        p = k / count
        exact = True
    else:
        mean = n * (n + 1) / 4.0
        _, counts = np.unique(ranks2, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(counts ** 3 - counts)) / 48.0
        sd = math.sqrt(var)
        w_plus = w_plus2 / 2.0
        if alternative == "two-sided":
            z = max(abs(w_plus - mean) - 0.5, 0.0) / sd
            p = math.erfc(z / math.sqrt(2.0))
        elif alternative == "greater":
            z = (w_plus - mean - 0.5) / sd
            p = 0.5 * math.erfc(z / math.sqrt(2.0))
        else:
            z = (w_plus - mean + 0.5) / sd
            p = 0.5 * math.erfc(-z / math.sqrt(2.0))
        exact = False
    return WilcoxonResult(stat2 / 2.0, min(1.0, p), n, w_plus2 / 2.0, w_minus2 / 2.0, exact)
