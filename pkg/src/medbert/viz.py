"""Attention maps for one patient: extraction, a static HTML/SVG view with
codes as nodes grouped by visit, locality statistics and JSON export."""
from __future__ import annotations

import csv
import html
import io
import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .ehr import ModelInput, PatientRecord, Vocabulary, decode, encode_patient, order_patient, visit_boundaries
from .errors import ConfigError, RangeError
from .model import MedBert, collate

DEFAULT_THRESHOLD = 0.05


@dataclass(eq=False)
class AttentionRecord:
    patient_id: str
    code_labels: list
    visit_boundaries: list  # start index of each visit
    maps: np.ndarray  # [n_layers, n_heads, L, L], rows are query positions

    @property
    def length(self) -> int:
        return len(self.code_labels)

    @property
    def n_layers(self) -> int:
        return self.maps.shape[0]

    @property
    def n_heads(self) -> int:
        return self.maps.shape[1]

    def visit_of(self) -> np.ndarray:
        """0-based visit number of every position."""
        v = np.zeros(self.length, dtype=np.int64)
        for b in self.visit_boundaries[1:]:
            v[b:] += 1
        return v

    def __eq__(self, other):
        return (isinstance(other, AttentionRecord) and self.patient_id == other.patient_id
                and self.code_labels == other.code_labels
                and self.visit_boundaries == other.visit_boundaries
                and np.array_equal(self.maps, other.maps))

    def to_dict(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "code_labels": list(self.code_labels),
            "visit_boundaries": list(self.visit_boundaries),
            "attention": {str(layer): {str(head): self.maps[layer, head].reshape(-1).tolist()
                                       for head in range(self.n_heads)}
                          for layer in range(self.n_layers)},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "AttentionRecord":
        d = json.loads(text)
        n = len(d["code_labels"])
        att = d["attention"]
        maps = np.array([[np.reshape(att[layer][head], (n, n)) for head in sorted(att[layer], key=int)]
                         for layer in sorted(att, key=int)], dtype=np.float64)
        return cls(d["patient_id"], d["code_labels"], d["visit_boundaries"], maps)


def extract_attention(model, patient, vocab: Vocabulary) -> AttentionRecord:
    """Eval-mode attention maps of ``model`` (a MedBert or checkpoint path), pads stripped."""
    if not isinstance(model, MedBert):
        model = MedBert.load(model)
    if model.config.vocab_size != len(vocab):
        raise ConfigError("vocab", f"model has {model.config.vocab_size} codes, vocabulary {len(vocab)}")
    if isinstance(patient, PatientRecord):
        mi = encode_patient(order_patient(patient), vocab, model.config.max_seq_len)
    elif isinstance(patient, ModelInput):
        mi = patient
    else:
        raise ConfigError("patient", f"expected a PatientRecord or ModelInput, got {type(patient).__name__}")
    out = model.encode(collate([mi]))
    n = mi.length
    maps = np.stack([m[0, :, :n, :n] for m in out.attention_maps]).astype(np.float64)
    return AttentionRecord(mi.patient_id, decode(mi, vocab), visit_boundaries(mi), maps)


# -- rendering ----------------------------------------------------------------

_ROW_H = 18
_COL_W = 140
_GAP = 220
_PAD = 10
_VISIT_GAP = 8
_STYLE = (
    "body{font-family:sans-serif;font-size:12px}"
    "text{font-size:11px;font-family:monospace}"
    ".sep{stroke:#999;stroke-dasharray:3,2}"
    ".edge{stroke:#1f5fa8;stroke-opacity:0.6}"
    "h2{font-size:14px}"
)


def _y_positions(record: AttentionRecord) -> np.ndarray:
    return _PAD + _ROW_H * (np.arange(record.length) + 1) + _VISIT_GAP * record.visit_of()


def _head_svg(record: AttentionRecord, layer: int, head: int, threshold: float) -> str:
    ys = _y_positions(record)
    height = int(ys[-1]) + _ROW_H + _PAD if record.length else 2 * _PAD
    width = 2 * _COL_W + _GAP
    x_left, x_right = _COL_W, _COL_W + _GAP
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'data-layer="{layer}" data-head="{head}">']
    visits = record.visit_of()
    for b in record.visit_boundaries[1:]:
        y = (ys[b - 1] + ys[b]) / 2 - _ROW_H / 4
        out.append(f'<line class="sep" x1="0" y1="{y:.1f}" x2="{width}" y2="{y:.1f}"/>')
    for i, label in enumerate(record.code_labels):
        text = html.escape(str(label))
        out.append(f'<text id="q{i}" x="{x_left - 6}" y="{ys[i]:.1f}" text-anchor="end" '
                   f'data-visit="{visits[i] + 1}">{text}</text>')
        out.append(f'<text id="k{i}" x="{x_right + 6}" y="{ys[i]:.1f}" '
                   f'data-visit="{visits[i] + 1}">{text}</text>')
    m = record.maps[layer, head]
    for i in range(record.length):
        for j in range(record.length):
            w = float(m[i, j])
            if w >= threshold:
                out.append(f'<line class="edge" data-from="{i}" data-to="{j}" data-weight="{w:.6f}" '
                           f'x1="{x_left}" y1="{ys[i] - 4:.1f}" x2="{x_right}" y2="{ys[j] - 4:.1f}" '
                           f'stroke-width="{0.25 + 4.0 * w:.3f}"/>')
    out.append("</svg>")
    return "\n".join(out)


def render_attention(record: AttentionRecord, layer: int, head="all", threshold: float = DEFAULT_THRESHOLD) -> str:
    """Self-contained HTML: per head, queries on the left, keys on the right,
    dashed separators between visits and one line per weight >= threshold
    with stroke width growing with the weight."""
    if not 0 <= layer < record.n_layers:
        raise RangeError(f"layer {layer} outside [0, {record.n_layers})")
    if head == "all":
        heads = list(range(record.n_heads))
    elif isinstance(head, (int, np.integer)) and 0 <= head < record.n_heads:
        heads = [int(head)]
    else:
        raise RangeError(f"head {head!r} outside [0, {record.n_heads}) and not 'all'")
    if not 0 <= threshold < 1:
        raise RangeError(f"threshold {threshold} outside [0, 1)")
    title = html.escape(f"{record.patient_id}: layer {layer}")
    parts = [
        "<!DOCTYPE html>",
        '<html><head><meta charset="utf-8">',
        f"<title>{title}</title>",
        f"<style>{_STYLE}</style>",
        "</head><body>",
        f"<h1>{title}</h1>",
        f"<p>threshold {threshold:g}; {record.length} codes in {len(record.visit_boundaries)} visits</p>",
    ]
    for h in heads:
        parts.append(f"<h2>head {h}</h2>")
        parts.append(_head_svg(record, layer, h, threshold))
    parts.append("</body></html>\n")
    return "\n".join(parts)


def count_edges(document: str) -> int:
    return document.count('class="edge"')


# -- locality -----------------------------------------------------------------

class LocalityRow(NamedTuple):
    layer: int
    head: int
    within_visit: float
    cross_visit: float
    same_code: float  # mass on other positions holding the same code
    same_code_cross_visit: float


def summarize_locality(record: AttentionRecord) -> list:
    """Per layer and head: share of attention mass on keys in the query's
    own visit, in other visits, and on other occurrences of the same code.
    Shares are averaged over query rows."""
    n = record.length
    visits = record.visit_of()
    same_visit = visits[:, None] == visits[None, :]
    labels = np.array(record.code_labels, dtype=object)
    same_code = (labels[:, None] == labels[None, :]) & ~np.eye(n, dtype=bool)
    rows = []
    for layer in range(record.n_layers):
        for head in range(record.n_heads):
            m = record.maps[layer, head]
            total = m.sum()
            within = float(m[same_visit].sum() / total)
            rows.append(LocalityRow(
                layer, head, within, float(m[~same_visit].sum() / total),
                float(m[same_code].sum() / total), float(m[same_code & ~same_visit].sum() / total),
            ))
    return rows


def locality_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LocalityRow._fields)
    for r in rows:
        w.writerow([r.layer, r.head] + [f"{x:.6f}" for x in r[2:]])
    return buf.getvalue()
