"""Med-BERT on structured EHR code sequences: data model, synthetic cohorts,
a numpy autodiff engine, the transformer, pretraining, recurrent baselines,
evaluation harness and attention views."""

__version__ = "0.1.0"

from .ehr import (  # noqa: E402
    DiagnosisCode, ModelInput, PatientRecord, Visit, Vocabulary, build_vocabulary,
    derive_prolonged_los_label, encode_patient, order_codes_within_visit,
)
from .metrics import compute_auc  # noqa: E402
from .model import MedBert, MedBertConfig  # noqa: E402
from .synth import SynthConfig, generate_cohort, split_cohort, subsample_training  # noqa: E402

__all__ = [
    "DiagnosisCode", "MedBert", "MedBertConfig", "ModelInput", "PatientRecord", "SynthConfig", "Visit",
    "Vocabulary", "build_vocabulary", "compute_auc", "derive_prolonged_los_label", "encode_patient",
    "generate_cohort", "order_codes_within_visit", "split_cohort", "subsample_training",
]
