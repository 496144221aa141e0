"""Structured EHR data model: codes, visits, patients, vocabulary and encoding.

A patient is a temporally ordered list of visits, each visit a bag of
diagnosis codes with ordering metadata and a length of stay.  Patients are
flattened into three parallel integer streams (code, within-visit position,
visit ordinal) before they reach the network.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, EmptyCohort, EmptyPatient, EmptyVisit, IoError

PAD, MASK, UNK = 0, 1, 2
RESERVED_TOKENS = ("[PAD]", "[MASK]", "[UNK]")
N_RESERVED = len(RESERVED_TOKENS)

PROLONGED_LOS_DAYS = 7
MIN_CODES_PER_PATIENT = 3


@dataclass(frozen=True)
class DiagnosisCode:
    code: str
    present_on_admission: bool = False
    captured_during_visit: bool = False
    priority: int = 0

    def __post_init__(self):
        if not self.code:
            raise ValueError("diagnosis code must be a non-empty string")
        if self.priority < 0:
            raise ValueError(f"priority must be non-negative, got {self.priority}")


@dataclass(frozen=True)
class Visit:
    codes: tuple
    los_days: Optional[int] = 0
    visit_index: int = 1

    def __post_init__(self):
        object.__setattr__(self, "codes", tuple(self.codes))
        if self.los_days is not None and self.los_days < 0:
            raise ValueError(f"los_days must be >= 0, got {self.los_days}")


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    visits: tuple
    outcome_label: Optional[bool] = None

    def __post_init__(self):
        visits = tuple(self.visits)
        for i, v in enumerate(visits, start=1):
            if v.visit_index != i:
                raise ValueError(
                    f"patient {self.patient_id}: visit_index {v.visit_index} at position {i}"
                )
        object.__setattr__(self, "visits", visits)

    @property
    def prolonged_los_label(self) -> bool:
        return derive_prolonged_los_label(self)

    @property
    def n_codes(self) -> int:
        return sum(len(v.codes) for v in self.visits)

    def code_strings(self) -> list:
        return [c.code for v in self.visits for c in v.codes]


def make_patient(patient_id, visits, los_days=None, outcome_label=None) -> PatientRecord:
    """Build a patient from nested lists of code strings.

    Convenient for tests and demos; ordering metadata is left at defaults.
    """
    if los_days is None:
        los_days = [0] * len(visits)
    return PatientRecord(
        patient_id=patient_id,
        visits=tuple(
            Visit(tuple(DiagnosisCode(c) for c in codes), los, i)
            for i, (codes, los) in enumerate(zip(visits, los_days), start=1)
        ),
        outcome_label=outcome_label,
    )


def _order_key(code: DiagnosisCode):
    return (not code.present_on_admission, not code.captured_during_visit, code.priority)


def order_codes_within_visit(visit: Visit) -> Visit:
    """Rank codes: present-on-admission first, then captured during the visit,
    then ascending priority.  Ties keep their input order."""
    if not visit.codes:
        raise EmptyVisit(f"visit {visit.visit_index} has no codes")
    return replace(visit, codes=tuple(sorted(visit.codes, key=_order_key)))


def order_patient(patient: PatientRecord) -> PatientRecord:
    return replace(
        patient, visits=tuple(order_codes_within_visit(v) for v in patient.visits if v.codes)
    )


def derive_prolonged_los_label(patient: PatientRecord) -> bool:
    """True iff any visit lasted strictly longer than seven days.

    Visits with an unknown length of stay count as zero days.
    """
    return any((v.los_days or 0) > PROLONGED_LOS_DAYS for v in patient.visits)


def is_eligible(patient: PatientRecord) -> bool:
    return patient.n_codes >= MIN_CODES_PER_PATIENT


class Vocabulary:
    """Bidirectional code <-> id map with PAD=0, MASK=1, UNK=2 reserved."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.id_to_token = list(RESERVED_TOKENS)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        idx = self.token_to_id.get(token)
        if idx is None:
            idx = len(self.id_to_token)
            self.id_to_token.append(token)
            self.token_to_id[token] = idx
        return idx

    def __len__(self):
        return len(self.id_to_token)

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token):
        return token in self.token_to_id

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def token(self, idx: int) -> str:
        return self.id_to_token[idx]

    def save(self, path) -> None:
        lines = [f"{tok}\t{i}\n" for i, tok in enumerate(self.id_to_token)]
        Path(path).write_text("".join(lines), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise IoError(f"cannot read vocabulary {path}: {exc}") from exc
        vocab = cls()
        for lineno, line in enumerate(text.splitlines()):
            tok, idx = line.rsplit("\t", 1)
            if int(idx) != lineno:
                raise IoError(f"{path}:{lineno + 1}: ids must be dense, got {idx}")
            if lineno < N_RESERVED:
                if tok != RESERVED_TOKENS[lineno]:
                    raise IoError(f"{path}: reserved token {lineno} is {tok!r}")
                continue
            vocab.add(tok)
        return vocab


def build_vocabulary(cohort: Sequence[PatientRecord]) -> Vocabulary:
    """Assign ids to codes in first-occurrence order over patients, visits, codes."""
    if not cohort:
        raise EmptyCohort("cannot build a vocabulary from an empty cohort")
    vocab = Vocabulary()
    for patient in cohort:
        for visit in patient.visits:
            for code in visit.codes:
                vocab.add(code.code)
    return vocab


@dataclass(eq=False)
class ModelInput:
    code_ids: np.ndarray
    serialization_ids: np.ndarray
    visit_ids: np.ndarray
    length: int
    prolonged_los_label: bool = False
    outcome_label: Optional[bool] = None
    patient_id: str = ""

    def __post_init__(self):
        n = len(self.code_ids)
        if not (len(self.serialization_ids) == len(self.visit_ids) == n == self.length):
            raise ContractError("code, serialization and visit streams must have equal length")

    @property
    def n_visits(self) -> int:
        return int(self.visit_ids[-1]) if self.length else 0

    def with_codes(self, code_ids) -> "ModelInput":
        return replace(self, code_ids=np.asarray(code_ids, dtype=np.int64))


def _truncate_visits(visits, max_seq_len):
    # Newest visits first; whole visits only unless the newest alone overflows.
    kept, total = [], 0
    for visit in reversed(visits):
        n = len(visit)
        if total + n > max_seq_len:
            if not kept:
                kept.append(visit[:max_seq_len])
            break
        kept.append(visit)
        total += n
    return kept[::-1]


def encode_patient(
    patient: PatientRecord,
    vocab: Vocabulary,
    max_seq_len: int = 512,
    constant_serialization: bool = False,
) -> ModelInput:
    """Flatten a patient into code / serialization / visit id streams.

    Sequences longer than ``max_seq_len`` keep the most recent visits,
    dropping whole visits from the oldest end.  Visit ids are renumbered
    from 1 after truncation.  With ``constant_serialization`` every code gets
    serialization id 0, which disables within-visit ordering.
    """
    if max_seq_len < 1:
        raise ContractError(f"max_seq_len must be >= 1, got {max_seq_len}")
    visits = [[vocab.lookup(c.code) for c in v.codes] for v in patient.visits if v.codes]
    if not visits:
        raise EmptyPatient(f"patient {patient.patient_id} has no codes")
    visits = _truncate_visits(visits, max_seq_len)

    codes, ser, vis = [], [], []
    for visit_no, visit in enumerate(visits, start=1):
        codes.extend(visit)
        ser.extend([0] * len(visit) if constant_serialization else range(len(visit)))
        vis.extend([visit_no] * len(visit))
    return ModelInput(
        code_ids=np.asarray(codes, dtype=np.int64),
        serialization_ids=np.asarray(ser, dtype=np.int64),
        visit_ids=np.asarray(vis, dtype=np.int64),
        length=len(codes),
        prolonged_los_label=derive_prolonged_los_label(patient),
        outcome_label=patient.outcome_label,
        patient_id=patient.patient_id,
    )


def decode(model_input: ModelInput, vocab: Vocabulary) -> list:
    return [vocab.token(int(i)) for i in model_input.code_ids[: model_input.length]]


def visit_boundaries(model_input: ModelInput) -> list:
    """Start index of every visit in the flattened sequence."""
    vis = model_input.visit_ids[: model_input.length]
    return [0] + [int(i) for i in np.flatnonzero(np.diff(vis)) + 1]


# -- JSON lines -------------------------------------------------------------

def patient_to_dict(patient: PatientRecord) -> dict:
    return {
        "patient_id": patient.patient_id,
        "outcome_label": patient.outcome_label,
        "visits": [
            {
                "los_days": v.los_days,
                "codes": [
                    {
                        "code": c.code,
                        "poa": c.present_on_admission,
                        "captured": c.captured_during_visit,
                        "priority": c.priority,
                    }
                    for c in v.codes
                ],
            }
            for v in patient.visits
        ],
    }


def patient_from_dict(d: dict) -> PatientRecord:
    visits = []
    for i, v in enumerate(d["visits"], start=1):
        codes = tuple(
            DiagnosisCode(
                c["code"],
                bool(c.get("poa", False)),
                bool(c.get("captured", False)),
                int(c.get("priority", 0)),
            )
            for c in v["codes"]
        )
        visits.append(Visit(codes, v.get("los_days"), i))
    label = d.get("outcome_label")
    return PatientRecord(str(d["patient_id"]), tuple(visits), None if label is None else bool(label))


def dumps_patient(patient: PatientRecord) -> str:
    return json.dumps(patient_to_dict(patient), separators=(",", ":"))


def write_patients(path, patients: Iterable[PatientRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in patients:
            fh.write(dumps_patient(p))
            fh.write("\n")


def read_patients(path) -> list:
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise IoError(f"cannot read cohort {path}: {exc}") from exc
    out = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            out.append(patient_from_dict(json.loads(line)))
        except (KeyError, TypeError, ValueError) as exc:
            raise IoError(f"{path}:{lineno}: malformed patient record ({exc})") from exc
    return out
