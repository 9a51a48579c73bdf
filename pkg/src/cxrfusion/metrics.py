"""Exact rank-based AUROC, per-pathology evaluation, and subgroup reporting.

AUROC uses the Mann-Whitney formulation with ties credited 0.5, computed via
an O(n log n) average-rank sum.  A pathology with no positives or no
negatives has undefined AUROC and is excluded from macro averages rather than
imputed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .labels import (N_PATHOLOGIES, PATHOLOGIES, LabelState, UncertainPolicy,
                     build_target_matrix)

#: the five pathologies reported individually in the reference comparison
HEADLINE_PATHOLOGIES = ("atelectasis", "cardiomegaly", "consolidation",
                        "edema", "pleural_effusion")

#: default age bin edges: [0,40), [40,65), [65,inf)
DEFAULT_AGE_BINS = (0.0, 40.0, 65.0)

DEFAULT_MIN_GROUP_SIZE = 20


def auroc(scores: Sequence[float], labels: Sequence[int]) -> Optional[float]:
    """P(score of a random positive > random negative), ties counted half.

    Returns None when either class is empty (undefined).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ShapeError(f"scores {s.shape} and labels {y.shape} must be equal 1-d")
    if np.any(np.isnan(s)):
        raise NumericError("scores contain NaN")
    if not np.all((y == 0) | (y == 1)):
        raise NumericError("labels must be 0 or 1")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(s.size, dtype=np.float64)
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average 1-based rank
        i = j + 1
    rank_sum_pos = ranks[y == 1].sum()
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


@dataclass
class SubgroupResult:
    group: str
    n_samples: int
    per_pathology: Dict[str, Optional[float]]
    macro_auroc: Optional[float]
    insufficient: bool = False

    def to_dict(self) -> dict:
        return {"group": self.group, "n_samples": self.n_samples,
                "per_pathology": self.per_pathology,
                "macro_auroc": self.macro_auroc,
                "insufficient": self.insufficient}


@dataclass
class SubgroupSection:
    key: str
    groups: List[SubgroupResult]
    max_gap: float

    def to_dict(self) -> dict:
        return {"key": self.key, "max_gap": self.max_gap,
                "groups": [g.to_dict() for g in self.groups]}


@dataclass
class EvalReport:
    per_pathology: Dict[str, Optional[float]]
    macro_auroc: Optional[float]
    macro_auroc_headline: Optional[float]   # over the five headline pathologies
    n_pos: Dict[str, int]
    n_neg: Dict[str, int]
    n_samples: int = 0
    subgroups: List[SubgroupSection] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "per_pathology": self.per_pathology,
            "macro_auroc": self.macro_auroc,
            "macro_auroc_headline": self.macro_auroc_headline,
            "n_pos": self.n_pos,
            "n_neg": self.n_neg,
            "n_samples": self.n_samples,
            "subgroups": [s.to_dict() for s in self.subgroups],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        subgroups = [SubgroupSection(
            key=sd["key"], max_gap=sd["max_gap"],
            groups=[SubgroupResult(**g) for g in sd["groups"]],
        ) for sd in d.get("subgroups", [])]
        return cls(per_pathology=d["per_pathology"],
                   macro_auroc=d["macro_auroc"],
                   macro_auroc_headline=d.get("macro_auroc_headline"),
                   n_pos=d["n_pos"], n_neg=d["n_neg"],
                   n_samples=d.get("n_samples", 0), subgroups=subgroups)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))


def _macro(values: Dict[str, Optional[float]],
           subset: Sequence[str] = PATHOLOGIES) -> Optional[float]:
    defined = [values[p] for p in subset if values.get(p) is not None]
    return float(np.mean(defined)) if defined else None


def report_from_scores(scores: np.ndarray, targets: np.ndarray,
                       masks: np.ndarray, mask_aware: bool = True) -> EvalReport:
    """Build an EvalReport from per-sample score/target/mask matrices."""
    if scores.ndim != 2 or scores.shape[1] != N_PATHOLOGIES:
        raise ShapeError(f"scores must be (n, {N_PATHOLOGIES}), got {scores.shape}")
    if scores.shape != targets.shape or scores.shape != masks.shape:
        raise ShapeError("scores, targets, masks must have identical shapes")
    if scores.shape[0] == 0:
        raise ConfigError("cannot evaluate zero samples")
    per: Dict[str, Optional[float]] = {}
    n_pos: Dict[str, int] = {}
    n_neg: Dict[str, int] = {}
    for k, name in enumerate(PATHOLOGIES):
        keep = masks[:, k] == 1 if mask_aware else np.ones(scores.shape[0], bool)
        y = targets[keep, k]
        per[name] = auroc(scores[keep, k], y)
        n_pos[name] = int(y.sum())
        n_neg[name] = int(y.size - y.sum())
    return EvalReport(per_pathology=per,
                      macro_auroc=_macro(per),
                      macro_auroc_headline=_macro(per, HEADLINE_PATHOLOGIES),
                      n_pos=n_pos, n_neg=n_neg, n_samples=scores.shape[0])


def evaluate(model, samples: Sequence, mask_aware: bool = True,
             policy: UncertainPolicy = UncertainPolicy.AS_NEGATIVE) -> EvalReport:
    """Score samples with the model and report per-pathology/macro AUROC."""
    from .model import predict_scores  # local import; model depends on tensor only
    if len(samples) == 0:
        raise ConfigError("cannot evaluate zero samples")
    scores = predict_scores(model, samples)
    targets, masks = build_target_matrix([s.states for s in samples], policy)
    return report_from_scores(scores, targets, masks, mask_aware=mask_aware)


def _group_key(sample, key: str, bins: Optional[Sequence[float]]) -> str:
    value = getattr(sample.metadata, key, None)
    if key in ("age", "bmi"):
        if value is None:
            return "missing"
        edges = tuple(bins) if bins is not None else DEFAULT_AGE_BINS
        for i in range(len(edges) - 1):
            if edges[i] <= value < edges[i + 1]:
                return f"[{edges[i]:g},{edges[i+1]:g})"
        return f"[{edges[-1]:g},inf)"
    if value is None:
        return "missing"
    return str(value)


def subgroup_report(model, samples: Sequence, group_by: str,
                    bins: Optional[Sequence[float]] = None,
                    min_group_size: int = DEFAULT_MIN_GROUP_SIZE,
                    mask_aware: bool = True,
                    policy: UncertainPolicy = UncertainPolicy.AS_NEGATIVE
                    ) -> SubgroupSection:
    """Evaluate within each demographic group; undersized groups are flagged
    insufficient and excluded from the max pairwise gap."""
    if group_by not in ("age", "sex", "bmi", "race", "insurance"):
        raise ConfigError(f"unknown group_by key {group_by!r}")
    from .model import predict_scores
    if len(samples) == 0:
        raise ConfigError("cannot evaluate zero samples")
    scores = predict_scores(model, samples)
    targets, masks = build_target_matrix([s.states for s in samples], policy)
    membership: Dict[str, List[int]] = {}
    for i, s in enumerate(samples):
        membership.setdefault(_group_key(s, group_by, bins), []).append(i)

    groups: List[SubgroupResult] = []
    for gname in sorted(membership):
        idx = np.asarray(membership[gname])
        if idx.size < min_group_size:
            groups.append(SubgroupResult(group=gname, n_samples=idx.size,
                                         per_pathology={}, macro_auroc=None,
                                         insufficient=True))
            continue
        rep = report_from_scores(scores[idx], targets[idx], masks[idx],
                                 mask_aware=mask_aware)
        groups.append(SubgroupResult(group=gname, n_samples=int(idx.size),
                                     per_pathology=rep.per_pathology,
                                     macro_auroc=rep.macro_auroc))
    macros = [g.macro_auroc for g in groups
              if not g.insufficient and g.macro_auroc is not None]
    max_gap = float(max(macros) - min(macros)) if len(macros) >= 2 else 0.0
    return SubgroupSection(key=group_by, groups=groups, max_gap=max_gap)


# ---------------------------------------------------------------------------
# text rendering
# ---------------------------------------------------------------------------

def _fmt(v: Optional[float]) -> str:
    return "undef" if v is None else f"{v:.5f}"


def render_table(reports: Dict[str, EvalReport]) -> str:
    """Aligned text table: one row per model variant.

    Columns: both macro averages (over all 14 defined pathologies and over
    the 5 headline pathologies), then the headline pathologies, then the
    rest in canonical order.
    """
    rest = [p for p in PATHOLOGIES if p not in HEADLINE_PATHOLOGIES]
    columns = ["avg_auroc_14", "avg_auroc_5"] + list(HEADLINE_PATHOLOGIES) + rest
    header = ["model"] + columns
    rows = [header]
    for name, rep in reports.items():
        row = [name, _fmt(rep.macro_auroc), _fmt(rep.macro_auroc_headline)]
        row += [_fmt(rep.per_pathology.get(p)) for p in HEADLINE_PATHOLOGIES + tuple(rest)]
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(r)).rstrip()
             for r in rows]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines) + "\n"


def render_subgroups(sections: Sequence[SubgroupSection]) -> str:
    lines = []
    for sec in sections:
        lines.append(f"subgroup: {sec.key}  (max macro-AUROC gap {sec.max_gap:.5f})")
        for g in sec.groups:
            if g.insufficient:
                lines.append(f"  {g.group}: insufficient (n={g.n_samples})")
            else:
                lines.append(f"  {g.group}: macro {_fmt(g.macro_auroc)} (n={g.n_samples})")
    return "\n".join(lines) + ("\n" if lines else "")


def compare_reports(baseline: EvalReport, fusion: EvalReport) -> dict:
    """Per-pathology and macro AUROC deltas (fusion - baseline)."""
    delta = {}
    for p in PATHOLOGIES:
        b, f = baseline.per_pathology.get(p), fusion.per_pathology.get(p)
        delta[p] = None if (b is None or f is None) else f - b
    macro_delta = (None if baseline.macro_auroc is None or fusion.macro_auroc is None
                   else fusion.macro_auroc - baseline.macro_auroc)
    return {"per_pathology_delta": delta, "macro_delta": macro_delta,
            "baseline_macro": baseline.macro_auroc, "fusion_macro": fusion.macro_auroc}


def render_comparison(baseline: EvalReport, fusion: EvalReport) -> str:
    cmp = compare_reports(baseline, fusion)
    table = render_table({"baseline": baseline, "fusion": fusion})
    lines = [table, "delta (fusion - baseline):"]
    md = cmp["macro_delta"]
    lines.append(f"  macro: {'undef' if md is None else f'{md:+.5f}'}")
    for p in PATHOLOGIES:
        d = cmp["per_pathology_delta"][p]
        lines.append(f"  {p}: {'undef' if d is None else f'{d:+.5f}'}")
    return "\n".join(lines) + "\n"
