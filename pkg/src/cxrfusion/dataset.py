"""Synthetic chest-image dataset with planted metadata signal, plus manifest I/O.

Generation is a pure function of (config, seed): every random draw comes from
a keyed counter-based stream (see :mod:`cxrfusion.rng`), so outputs are
identical across platforms, processes, and generation order.

Per patient, demographics are drawn as age ~ U(18, 95), sex ~ Bernoulli(0.5),
bmi ~ N(27, 5) clamped to (15, 50).  Per pathology, the true label is drawn
with probability sigmoid(beta . z + intercept) where z is the standardized
metadata vector

    z_age = (age - 56.5) / 22.2      (mean/sd of U(18, 95))
    z_sex = 2*sex - 1                (female -> -1, male -> +1)
    z_bmi = (bmi - 27) / 5

A true label renders that pathology's geometric pattern into the image at the
configured strength, except with probability ``ambiguity_fraction`` the
pattern is suppressed to near-zero strength (times ``AMBIGUOUS_STRENGTH``),
leaving metadata as the only recoverable signal.  Pixel noise N(0, sigma) is
added and the image clamped to [0, 1].

Pattern table (one distinct template per pathology, 32x32 reference frame;
templates scale with image size and occupy pairwise disjoint zones there, so
each pathology owns pixels no other pattern touches):

    atelectasis                 horizontal band, lower left
    cardiomegaly                disk, center left
    consolidation               filled square, upper left
    edema                       diffuse gaussian haze, center right
    enlarged_cardiomediastinum  vertical band, upper right-center
    fracture                    short diagonal segment, lower middle
    lung_lesion                 small disk, upper right
    lung_opacity                gaussian blob, upper center
    pleural_effusion            bottom-left wedge, intensity growing downward
    pleural_other               vertical rim, left edge
    pneumonia                   fixed speckle cluster, lower right
    pneumothorax                vertical band, right edge
    support_devices             vertical + horizontal line pair (tube)
    no_finding                  faint corner tick, top left

Images are stored as 16-bit binary PGM (P5, maxval 65535, big-endian,
row-major); the manifest is JSONL with one record per sample.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import rng
from .errors import ConfigError, ManifestError
from .labels import N_PATHOLOGIES, PATHOLOGIES, LabelState, MetadataRecord

#: multiplier applied to pattern strength for image-ambiguous positives
AMBIGUOUS_STRENGTH = 0.02

_AGE_MEAN, _AGE_SD = 56.5, 22.2
_BMI_MEAN, _BMI_SD = 27.0, 5.0

_RACES = ("white", "black", "asian", "hispanic", "other")
_RACE_P = (0.55, 0.18, 0.12, 0.10, 0.05)
_INSURANCES = ("private", "medicare", "medicaid")
_INSURANCE_P = (0.5, 0.3, 0.2)

# purpose labels for rng streams
_P_META, _P_LABEL, _P_AMBIG, _P_STATE, _P_NOISE, _P_VIEW = (
    "meta", "label", "ambiguity", "state", "noise", "view")


@dataclass
class PathologySignal:
    """Planted signal for one pathology.

    ``strength`` scales the image pattern; the betas act on standardized
    metadata (see module docstring).  ``ambiguity_sex_bias`` shifts the
    ambiguity probability by +bias for female and -bias for male patients
    (clipped to [0, 1]), which plants a subgroup visibility gap.
    """

    strength: float = 0.8
    beta_age: float = 0.0
    beta_sex: float = 0.0
    beta_bmi: float = 0.0
    intercept: float = -1.0
    ambiguity_sex_bias: float = 0.0

    def validate(self, name: str) -> None:
        if not 0.0 <= self.strength <= 1.0:
            raise ConfigError(f"{name}: strength {self.strength} outside [0, 1]")

    def to_dict(self) -> dict:
        return {"strength": self.strength, "beta_age": self.beta_age,
                "beta_sex": self.beta_sex, "beta_bmi": self.beta_bmi,
                "intercept": self.intercept,
                "ambiguity_sex_bias": self.ambiguity_sex_bias}

    @classmethod
    def from_dict(cls, d: dict) -> "PathologySignal":
        return cls(**d)


def default_signals() -> Dict[str, PathologySignal]:
    """No metadata effect anywhere; moderate prevalence and pattern strength."""
    return {name: PathologySignal() for name in PATHOLOGIES}


@dataclass
class SynthConfig:
    n_patients: int = 100
    images_per_patient: int = 1
    seed: int = 0
    signals: Dict[str, PathologySignal] = field(default_factory=default_signals)
    ambiguity_fraction: float = 0.0
    not_mentioned_rate: float = 0.0
    uncertain_rate: float = 0.0
    noise_sigma: float = 0.05
    image_size: int = 32
    lateral_fraction: float = 0.0

    def validate(self) -> None:
        if self.n_patients < 1 or self.images_per_patient < 1:
            raise ConfigError("n_patients and images_per_patient must be >= 1")
        for frac_name in ("ambiguity_fraction", "not_mentioned_rate",
                          "uncertain_rate", "lateral_fraction"):
            v = getattr(self, frac_name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{frac_name} {v} outside [0, 1]")
        if self.not_mentioned_rate + self.uncertain_rate > 1.0:
            raise ConfigError("not_mentioned_rate + uncertain_rate exceeds 1")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.image_size < 8 or self.image_size % 2:
            raise ConfigError("image_size must be an even integer >= 8")
        for name in self.signals:
            if name not in PATHOLOGIES:
                raise ConfigError(f"unknown pathology {name!r} in signals")
        for name in PATHOLOGIES:
            if name not in self.signals:
                raise ConfigError(f"signals missing pathology {name!r}")
            self.signals[name].validate(name)

    def to_dict(self) -> dict:
        return {
            "n_patients": self.n_patients,
            "images_per_patient": self.images_per_patient,
            "seed": self.seed,
            "signals": {k: v.to_dict() for k, v in self.signals.items()},
            "ambiguity_fraction": self.ambiguity_fraction,
            "not_mentioned_rate": self.not_mentioned_rate,
            "uncertain_rate": self.uncertain_rate,
            "noise_sigma": self.noise_sigma,
            "image_size": self.image_size,
            "lateral_fraction": self.lateral_fraction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        signals = default_signals()
        for name, sd in d.pop("signals", {}).items():
            signals[name] = PathologySignal.from_dict(sd)
        return cls(signals=signals, **d)


@dataclass
class Sample:
    sample_id: str
    patient_id: str
    image: np.ndarray                 # (1, H, W) float64 in [0, 1]
    metadata: MetadataRecord
    states: List[LabelState]
    view: str = "frontal"


@dataclass
class SampleTruth:
    """Generation-time ground truth, for oracles and fixtures only."""

    true_label: np.ndarray            # (14,) bool: disease actually present
    ambiguous: np.ndarray             # (14,) bool: pattern rendered near-zero
    meta_logit: np.ndarray            # (14,) float: planted metadata logit


def _pattern_templates(size: int) -> np.ndarray:
    """One [0,1] template per pathology, shape (14, size, size).

    Zones are pairwise disjoint by construction (checked in the tests), so
    every pathology owns pixels no other pattern touches; a threshold on the
    pattern's peak pixel separates rendered positives from negatives exactly.
    """
    s = size / 32.0  # scale factor relative to the 32x32 reference frame
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    t = np.zeros((N_PATHOLOGIES, size, size))

    def disk(cy, cx, r):
        return ((yy - cy * s) ** 2 + (xx - cx * s) ** 2 <= (r * s) ** 2) * 1.0

    def box(r0, r1, c0, c1):
        return ((yy >= r0 * s) & (yy <= r1 * s)
                & (xx >= c0 * s) & (xx <= c1 * s)) * 1.0

    def blob(cy, cx, sigma, cutoff, amp=1.0):
        r2 = (yy - cy * s) ** 2 + (xx - cx * s) ** 2
        return np.where(r2 <= (cutoff * s) ** 2,
                        amp * np.exp(-r2 / (2.0 * (sigma * s) ** 2)), 0.0)

    # atelectasis: horizontal band, lower left
    t[0] = box(24, 26, 3, 13)
    # cardiomegaly: disk at (17, 6) r 3.5
    t[1] = disk(17, 6, 3.5)
    # consolidation: filled square, upper left
    t[2] = box(3, 9, 2, 8)
    # edema: diffuse haze at (16, 24), sigma 3, cut at r 5
    t[3] = blob(16, 24, 3.0, 5.0, amp=0.7)
    # enlarged_cardiomediastinum: vertical band, upper right-center
    t[4] = box(2, 10, 20, 23)
    # fracture: short diagonal segment, cells with y - x = 8 in rows 24..31
    t[5][(np.abs(yy - xx - 8 * s) <= 0.7 * s) & (yy >= 24 * s)] = 1.0
    # lung_lesion: small disk at (5, 27) r 2
    t[6] = disk(5, 27, 2.0)
    # lung_opacity: gaussian blob at (6, 14), sigma 2.5, cut at r 5
    t[7] = blob(6, 14, 2.5, 5.0)
    # pleural_effusion: bottom-left wedge, intensity growing downward
    t[8] = np.clip((yy - 27 * s) / (4 * s), 0.0, 1.0) * (xx <= 13 * s)
    # pleural_other: vertical rim, left edge
    t[9] = box(12, 27, 0, 1)
    # pneumonia: fixed speckle cluster, lower right
    for cy, cx in ((28, 18), (31, 19), (26, 21), (24, 28)):
        t[10] += disk(cy, cx, 1.2)
    t[10] = np.clip(t[10], 0.0, 1.0)
    # pneumothorax: vertical band, right edge
    t[11] = box(12, 27, 30, 31)
    # support_devices: vertical + horizontal line pair (tube)
    t[12][(np.abs(xx - 11 * s) <= 0.7 * s) & (yy >= 12 * s) & (yy <= 21 * s)] = 1.0
    t[12][(np.abs(yy - 21 * s) <= 0.7 * s) & (xx >= 11 * s) & (xx <= 18 * s)] = 1.0
    # no_finding: faint corner tick, top left
    t[13] = 0.5 * box(0, 1, 0, 3)
    return t


def _base_image(size: int) -> np.ndarray:
    """Fixed background: soft vertical gradient over a dim field."""
    yy = np.linspace(0.0, 1.0, size)[:, None]
    return 0.18 + 0.08 * np.broadcast_to(yy, (size, size))


def _standardize(age: float, sex: int, bmi: float) -> Tuple[float, float, float]:
    return ((age - _AGE_MEAN) / _AGE_SD, 2.0 * sex - 1.0, (bmi - _BMI_MEAN) / _BMI_SD)


def _draw_metadata(cfg: SynthConfig, p_idx: int) -> Tuple[MetadataRecord, int]:
    g = rng.stream(cfg.seed, _P_META, p_idx)
    age = float(g.uniform(18.0, 95.0))
    sex = int(g.random() < 0.5)  # 1 = male
    bmi = float(np.clip(g.normal(_BMI_MEAN, _BMI_SD), 15.0, 50.0))
    race = _RACES[int(g.choice(len(_RACES), p=_RACE_P))]
    insurance = _INSURANCES[int(g.choice(len(_INSURANCES), p=_INSURANCE_P))]
    record = MetadataRecord(age=age, sex="male" if sex else "female",
                            race=race, bmi=bmi, insurance=insurance)
    return record, sex


def generate_with_truth(cfg: SynthConfig) -> Tuple[List[Sample], List[SampleTruth]]:
    """Generate samples plus per-sample ground truth for fixtures."""
    cfg.validate()
    templates = _pattern_templates(cfg.image_size)
    base = _base_image(cfg.image_size)
    samples: List[Sample] = []
    truths: List[SampleTruth] = []
    state_order = (LabelState.POSITIVE, LabelState.NEGATIVE)

    for p_idx in range(cfg.n_patients):
        record, sex = _draw_metadata(cfg, p_idx)
        z = _standardize(record.age, sex, record.bmi)

        logits = np.empty(N_PATHOLOGIES)
        true = np.empty(N_PATHOLOGIES, dtype=bool)
        for k, name in enumerate(PATHOLOGIES):
            sig = cfg.signals[name]
            logits[k] = (sig.beta_age * z[0] + sig.beta_sex * z[1]
                         + sig.beta_bmi * z[2] + sig.intercept)
            u = rng.uniform_unit(cfg.seed, _P_LABEL, p_idx, k)
            true[k] = u < 1.0 / (1.0 + math.exp(-logits[k]))

        for i_idx in range(cfg.images_per_patient):
            img = base.copy()
            ambiguous = np.zeros(N_PATHOLOGIES, dtype=bool)
            for k, name in enumerate(PATHOLOGIES):
                if not true[k]:
                    continue
                sig = cfg.signals[name]
                p_amb = float(np.clip(
                    cfg.ambiguity_fraction
                    + sig.ambiguity_sex_bias * (-1.0 if sex else 1.0), 0.0, 1.0))
                if rng.uniform_unit(cfg.seed, _P_AMBIG, p_idx, i_idx, k) < p_amb:
                    ambiguous[k] = True
                    img += sig.strength * AMBIGUOUS_STRENGTH * templates[k]
                else:
                    img += sig.strength * templates[k]
            if cfg.noise_sigma > 0:
                g = rng.stream(cfg.seed, _P_NOISE, p_idx, i_idx)
                img += g.normal(0.0, cfg.noise_sigma, img.shape)
            img = np.clip(img, 0.0, 1.0)

            states: List[LabelState] = []
            for k in range(N_PATHOLOGIES):
                u = rng.uniform_unit(cfg.seed, _P_STATE, p_idx, i_idx, k)
                if u < cfg.not_mentioned_rate:
                    states.append(LabelState.NOT_MENTIONED)
                elif u < cfg.not_mentioned_rate + cfg.uncertain_rate:
                    states.append(LabelState.UNCERTAIN)
                else:
                    states.append(state_order[0] if true[k] else state_order[1])

            view = "frontal"
            if cfg.lateral_fraction > 0 and rng.uniform_unit(
                    cfg.seed, _P_VIEW, p_idx, i_idx) < cfg.lateral_fraction:
                view = "lateral"

            pid = f"P{p_idx:06d}"
            samples.append(Sample(
                sample_id=f"{pid}_I{i_idx:02d}",
                patient_id=pid,
                image=img[None, :, :],
                metadata=record,
                states=states,
                view=view,
            ))
            truths.append(SampleTruth(true_label=true.copy(),
                                      ambiguous=ambiguous,
                                      meta_logit=logits.copy()))
    return samples, truths


def generate(cfg: SynthConfig) -> List[Sample]:
    return generate_with_truth(cfg)[0]


# ---------------------------------------------------------------------------
# PGM image files
# ---------------------------------------------------------------------------

def write_pgm(path: str, image: np.ndarray) -> None:
    """16-bit binary PGM (P5, maxval 65535, big-endian, row-major)."""
    img2d = image[0] if image.ndim == 3 else image
    h, w = img2d.shape
    quantized = np.round(img2d * 65535.0).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(quantized.tobytes())


def read_pgm(path: str) -> np.ndarray:
    """Read a 16-bit P5 PGM back into a (1, H, W) float array in [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5":
        raise ManifestError(f"{path}: not a binary P5 PGM")
    try:
        w, h = (int(x) for x in parts[1].split())
        maxval = int(parts[2])
    except ValueError as exc:
        raise ManifestError(f"{path}: malformed PGM header") from exc
    if maxval != 65535:
        raise ManifestError(f"{path}: expected maxval 65535, got {maxval}")
    if len(parts[3]) < 2 * h * w:
        raise ManifestError(f"{path}: truncated pixel data")
    data = np.frombuffer(parts[3], dtype=">u2", count=h * w)
    return (data.astype(np.float64) / 65535.0).reshape(1, h, w)


# ---------------------------------------------------------------------------
# JSONL manifest
# ---------------------------------------------------------------------------

def write_manifest(samples: Sequence[Sample], out_dir: str) -> None:
    """Write images/ + manifest.jsonl under out_dir."""
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    lines = []
    for s in samples:
        rel = f"images/{s.sample_id}.pgm"
        write_pgm(os.path.join(out_dir, rel), s.image)
        row = {
            "sample_id": s.sample_id,
            "patient_id": s.patient_id,
            "image_path": rel,
            "view": s.view,
            "age": s.metadata.age,
            "sex": s.metadata.sex,
            "race": s.metadata.race,
            "bmi": s.metadata.bmi,
            "insurance": s.metadata.insurance,
            "states": [st.value for st in s.states],
        }
        lines.append(json.dumps(row, separators=(",", ":")))
    with open(os.path.join(out_dir, "manifest.jsonl"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def read_manifest(in_dir: str) -> List[Sample]:
    """Load a dataset directory; errors name the offending sample_id."""
    path = os.path.join(in_dir, "manifest.jsonl")
    if not os.path.isfile(path):
        raise ManifestError(f"manifest not found: {path}")
    samples: List[Sample] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"manifest line {lineno}: invalid JSON") from exc
            sid = row.get("sample_id", f"<line {lineno}>")
            try:
                states = [LabelState(v) for v in row["states"]]
            except (KeyError, ValueError) as exc:
                raise ManifestError(f"sample {sid}: bad states field") from exc
            if len(states) != N_PATHOLOGIES:
                raise ManifestError(
                    f"sample {sid}: expected {N_PATHOLOGIES} states, got {len(states)}")
            img_path = os.path.join(in_dir, row["image_path"])
            try:
                image = read_pgm(img_path)
            except (OSError, ManifestError) as exc:
                raise ManifestError(f"sample {sid}: cannot read image: {exc}") from exc
            samples.append(Sample(
                sample_id=sid,
                patient_id=row["patient_id"],
                image=image,
                metadata=MetadataRecord(
                    age=row.get("age"), sex=row.get("sex"), race=row.get("race"),
                    bmi=row.get("bmi"), insurance=row.get("insurance")),
                states=states,
                view=row.get("view", "frontal"),
            ))
    return samples


# ---------------------------------------------------------------------------
# splitting and filtering
# ---------------------------------------------------------------------------

def split_by_patient(samples: Sequence[Sample],
                     fractions: Tuple[float, float, float],
                     seed: int) -> Tuple[List[Sample], List[Sample], List[Sample]]:
    """Deterministic patient-level split; a patient never straddles splits.

    Each patient draws one uniform from the keyed stream (seed, "split",
    patient_id) and lands in the split whose cumulative fraction bucket
    contains it.  Fractions must be non-negative and sum to 1.
    """
    if any(f < 0 for f in fractions):
        raise ConfigError(f"fractions must be non-negative, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must sum to 1, got {fractions}")
    patients = {s.patient_id for s in samples}
    n_nonempty = sum(1 for f in fractions if f > 0)
    if len(patients) < n_nonempty:
        raise ConfigError(
            f"{len(patients)} patients cannot fill {n_nonempty} non-empty splits")
    cut1 = fractions[0]
    cut2 = fractions[0] + fractions[1]
    assignment: Dict[str, int] = {}
    for pid in patients:
        u = rng.uniform_unit(seed, "split", pid)
        assignment[pid] = 0 if u < cut1 else (1 if u < cut2 else 2)
    out: Tuple[List[Sample], List[Sample], List[Sample]] = ([], [], [])
    for s in samples:
        out[assignment[s.patient_id]].append(s)
    return out


def filter_frontal(samples: Sequence[Sample]) -> List[Sample]:
    """Keep frontal-view samples, order preserved."""
    return [s for s in samples if s.view == "frontal"]
