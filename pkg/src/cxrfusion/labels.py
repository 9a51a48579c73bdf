"""Pathology label space, uncertainty policy, and metadata encoding.

The 14 pathologies live in one canonical order, fixed below; every target
vector, mask, manifest row, and report column in the repo indexes into it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, EncodingError, ShapeError

#: Canonical pathology order. Index positions are stable across the repo:
#: manifests, label vectors, model logits, and report columns all use it.
PATHOLOGIES: Tuple[str, ...] = (
    "atelectasis",
    "cardiomegaly",
    "consolidation",
    "edema",
    "enlarged_cardiomediastinum",
    "fracture",
    "lung_lesion",
    "lung_opacity",
    "pleural_effusion",
    "pleural_other",
    "pneumonia",
    "pneumothorax",
    "support_devices",
    "no_finding",
)

N_PATHOLOGIES = len(PATHOLOGIES)

PATHOLOGY_INDEX: Dict[str, int] = {name: i for i, name in enumerate(PATHOLOGIES)}


class LabelState(Enum):
    """Per-pathology finding extracted from a report."""

    POSITIVE = "positive"
    UNCERTAIN = "uncertain"
    NEGATIVE = "negative"
    NOT_MENTIONED = "not_mentioned"


class UncertainPolicy(Enum):
    """How UNCERTAIN findings map to training targets.

    NOT_MENTIONED is always masked out; only the uncertain branch is tunable.
    """

    AS_NEGATIVE = "uncertain_as_negative"
    AS_POSITIVE = "uncertain_as_positive"
    MASKED = "uncertain_masked"


def apply_policy(state: LabelState,
                 policy: UncertainPolicy = UncertainPolicy.AS_NEGATIVE
                 ) -> Tuple[int, int]:
    """Map one label state to a (target, mask) pair."""
    if state is LabelState.POSITIVE:
        return (1, 1)
    if state is LabelState.NEGATIVE:
        return (0, 1)
    if state is LabelState.NOT_MENTIONED:
        return (0, 0)
    # UNCERTAIN
    if policy is UncertainPolicy.AS_NEGATIVE:
        return (0, 1)
    if policy is UncertainPolicy.AS_POSITIVE:
        return (1, 1)
    return (0, 0)


def build_targets(states: Sequence[LabelState],
                  policy: UncertainPolicy = UncertainPolicy.AS_NEGATIVE
                  ) -> Tuple[np.ndarray, np.ndarray]:
    """Elementwise policy over a 14-state vector -> (target[14], mask[14])."""
    if len(states) != N_PATHOLOGIES:
        raise ShapeError(f"expected {N_PATHOLOGIES} states, got {len(states)}")
    target = np.empty(N_PATHOLOGIES, dtype=np.float64)
    mask = np.empty(N_PATHOLOGIES, dtype=np.float64)
    for i, s in enumerate(states):
        t, m = apply_policy(s, policy)
        target[i] = t
        mask[i] = m
    return target, mask


def build_target_matrix(state_rows: Sequence[Sequence[LabelState]],
                        policy: UncertainPolicy = UncertainPolicy.AS_NEGATIVE
                        ) -> Tuple[np.ndarray, np.ndarray]:
    """Stack build_targets over samples -> (targets[n,14], masks[n,14])."""
    targets = np.empty((len(state_rows), N_PATHOLOGIES))
    masks = np.empty((len(state_rows), N_PATHOLOGIES))
    for i, row in enumerate(state_rows):
        targets[i], masks[i] = build_targets(row, policy)
    return targets, masks


@dataclass
class MetadataRecord:
    """Raw patient context. Numeric fields may be None (missing)."""

    age: Optional[float] = None          # years, 0..120
    sex: Optional[str] = None            # "female" | "male"
    race: Optional[str] = None           # open categorical
    bmi: Optional[float] = None          # kg/m^2, 5..100
    insurance: Optional[str] = None      # open categorical

    def validate(self) -> None:
        if self.age is not None and not (0 <= self.age <= 120):
            raise EncodingError(f"age {self.age} outside [0, 120]")
        if self.bmi is not None and not (5 < self.bmi < 100):
            raise EncodingError(f"bmi {self.bmi} outside (5, 100)")
        if self.sex is not None and self.sex not in ("female", "male"):
            raise EncodingError(f"sex must be 'female' or 'male', got {self.sex!r}")


# per-feature fixed scalings for numeric encodings
_AGE_SCALE = 100.0
_BMI_SCALE = 50.0

NUMERIC_FEATURES = ("age", "bmi")
CATEGORICAL_FEATURES = ("race", "insurance")
ALL_META_FEATURES = ("age", "sex", "bmi", "race", "insurance")


@dataclass
class MetaFeatureConfig:
    """Ordered metadata feature selection with deterministic encoding.

    Encodings per feature:
      age        -> age / 100                      (1 slot)
      bmi        -> bmi / 50                       (1 slot)
      sex        -> female=0, male=1               (1 slot)
      race,
      insurance  -> one-hot over ``categories`` plus a trailing "other" slot

    Missing numerics encode as the value in ``impute`` when present there,
    else as 0.0; with ``missing_indicator`` each numeric feature gains a
    companion slot that is 1 when the value was missing.
    """

    features: Tuple[str, ...] = ("age", "sex", "bmi")
    categories: Dict[str, Tuple[str, ...]] = field(default_factory=dict)
    impute: Dict[str, float] = field(default_factory=dict)
    missing_indicator: bool = False

    def __post_init__(self):
        for f in self.features:
            if f not in ALL_META_FEATURES:
                raise ConfigError(f"unknown metadata feature {f!r}")
        for f in CATEGORICAL_FEATURES:
            if f in self.features and f not in self.categories:
                raise ConfigError(f"feature {f!r} requires a category list")

    def width(self) -> int:
        total = 0
        for f in self.features:
            if f in CATEGORICAL_FEATURES:
                total += len(self.categories[f]) + 1
            elif f in NUMERIC_FEATURES and self.missing_indicator:
                total += 2
            else:
                total += 1
        return total

    def to_dict(self) -> dict:
        return {
            "features": list(self.features),
            "categories": {k: list(v) for k, v in self.categories.items()},
            "impute": dict(self.impute),
            "missing_indicator": self.missing_indicator,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetaFeatureConfig":
        return cls(
            features=tuple(d.get("features", ("age", "sex", "bmi"))),
            categories={k: tuple(v) for k, v in d.get("categories", {}).items()},
            impute=dict(d.get("impute", {})),
            missing_indicator=bool(d.get("missing_indicator", False)),
        )


def fit_imputation(records: Sequence[MetadataRecord]) -> Dict[str, float]:
    """Median of each numeric feature over records where it is present."""
    out: Dict[str, float] = {}
    for f in NUMERIC_FEATURES:
        vals = [getattr(r, f) for r in records if getattr(r, f) is not None]
        if vals:
            out[f] = float(np.median(vals))
    return out


def _encode_numeric(value: Optional[float], scale: float, impute_val: Optional[float],
                    missing_indicator: bool, name: str) -> List[float]:
    if value is None:
        if impute_val is not None:
            base = impute_val / scale
        elif missing_indicator:
            base = 0.0
        else:
            raise EncodingError(
                f"{name} missing and no imputation configured; enable "
                "missing_indicator or provide an impute value")
        return [base, 1.0] if missing_indicator else [base]
    slot = value / scale
    return [slot, 0.0] if missing_indicator else [slot]


def encode_metadata(record: MetadataRecord, cfg: MetaFeatureConfig) -> np.ndarray:
    """Encode one record into the fixed-length numeric vector cfg declares."""
    record.validate()
    slots: List[float] = []
    for f in cfg.features:
        if f == "age":
            slots += _encode_numeric(record.age, _AGE_SCALE, cfg.impute.get("age"),
                                     cfg.missing_indicator, "age")
        elif f == "bmi":
            slots += _encode_numeric(record.bmi, _BMI_SCALE, cfg.impute.get("bmi"),
                                     cfg.missing_indicator, "bmi")
        elif f == "sex":
            if record.sex is None:
                raise EncodingError("sex missing; no imputation defined for sex")
            slots.append(0.0 if record.sex == "female" else 1.0)
        else:  # race / insurance: one-hot + explicit "other"
            cats = cfg.categories[f]
            value = getattr(record, f)
            onehot = [0.0] * (len(cats) + 1)
            if value is None:
                raise EncodingError(f"{f} missing; categorical features require a value")
            if value in cats:
                onehot[cats.index(value)] = 1.0
            else:
                onehot[-1] = 1.0
            slots += onehot
    vec = np.asarray(slots, dtype=np.float64)
    assert vec.shape[0] == cfg.width()
    return vec


def encode_metadata_batch(records: Sequence[MetadataRecord],
                          cfg: MetaFeatureConfig) -> np.ndarray:
    return np.stack([encode_metadata(r, cfg) for r in records]) if records else \
        np.zeros((0, cfg.width()))
