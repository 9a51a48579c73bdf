"""Multi-label chest-radiograph classification with metadata late fusion.

Image branch (small CNN presets) + metadata MLP, concatenated into a shared
classifier over 14 pathologies, trained with a masked multi-label loss under
a configurable uncertainty policy and evaluated with exact rank-based AUROC
and subgroup fairness reports.  Includes a rule-based report labeler and a
deterministic synthetic data generator with planted metadata signal.
"""

__version__ = "0.1.0"

from .labels import (LabelState, MetadataRecord, MetaFeatureConfig, PATHOLOGIES,
                     UncertainPolicy, apply_policy, build_targets, encode_metadata)
from .metrics import EvalReport, auroc, evaluate, subgroup_report
from .model import (PRESETS, BackbonePreset, FusionModel, MetaBranchConfig,
                    build_model, forward, load_checkpoint, save_checkpoint)
from .report_labeler import MentionLexicon, label_report
from .dataset import (Sample, SynthConfig, filter_frontal, generate,
                      read_manifest, split_by_patient, write_manifest)
from .tensor import Tape, Tensor, finite_diff_grad, masked_bce, swish
from .train import SweepSpec, TrainConfig, fit, sweep, train_step

__all__ = [
    "LabelState", "MetadataRecord", "MetaFeatureConfig", "PATHOLOGIES",
    "UncertainPolicy", "apply_policy", "build_targets", "encode_metadata",
    "EvalReport", "auroc", "evaluate", "subgroup_report",
    "PRESETS", "BackbonePreset", "FusionModel", "MetaBranchConfig",
    "build_model", "forward", "load_checkpoint", "save_checkpoint",
    "MentionLexicon", "label_report",
    "Sample", "SynthConfig", "filter_frontal", "generate", "read_manifest",
    "split_by_patient", "write_manifest",
    "Tape", "Tensor", "finite_diff_grad", "masked_bce", "swish",
    "SweepSpec", "TrainConfig", "fit", "sweep", "train_step",
    "__version__",
]
