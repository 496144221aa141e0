"""Synthetic EHR cohorts with a planted outcome signal, and cohort splitting.

The generator builds a fixed "world" (code strings grouped into latent
condition clusters, Zipf-like code frequencies, a designated set of risk
codes) and then draws patients from it.  Each patient carries one or more
latent conditions; most of their codes come from those conditions' clusters
and the rest from a heavy-tailed background.  The outcome label is planted
through the risk codes and prolonged stays track the patient's code burden.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import NamedTuple, Sequence

import numpy as np
from scipy.optimize import brentq

from .ehr import DiagnosisCode, PatientRecord, Visit, order_codes_within_visit
from .errors import ConfigError, DegenerateSample, RangeError, TooSmall

_WORLD_KEY = 0x5EED
_PATIENT_KEY = 1


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 1000
    vocab_size: int = 2000
    mean_visits: float = 8.0
    mean_codes_per_visit: float = 2.0
    outcome_prevalence: float = 0.2
    signal_strength: float = 2.0
    prolonged_los_rate: float = 0.3
    seed: int = 0
    # world structure; shared by every cohort drawn with the same values
    n_clusters: int = 20
    world_seed: int = 0
    zipf_exponent: float = 1.0
    cluster_affinity: float = 0.8
    mean_extra_conditions: float = 0.6
    risk_cap: int = 3
    los_burden_slope: float = 1.5
    risk_condition_rate: float = 0.3
    risk_zipf_exponent: float = 0.0

    def validate(self) -> "SynthConfig":
        def check(name, ok, why):
            if not ok:
                raise ConfigError(name, f"{why} (got {getattr(self, name)!r})")

        check("n_patients", self.n_patients >= 1, "must be >= 1")
        check("vocab_size", self.vocab_size >= 10, "must be >= 10")
        check("mean_visits", self.mean_visits >= 1, "must be >= 1")
        check("mean_codes_per_visit", self.mean_codes_per_visit >= 1, "must be >= 1")
        check("outcome_prevalence", 0 < self.outcome_prevalence < 1, "must lie in (0, 1)")
        check("signal_strength", self.signal_strength >= 0, "must be >= 0")
        check("prolonged_los_rate", 0 < self.prolonged_los_rate < 1, "must lie in (0, 1)")
        check("n_clusters", 2 <= self.n_clusters <= self.vocab_size // 2,
              "must be in [2, vocab_size // 2]")
        check("zipf_exponent", self.zipf_exponent >= 0, "must be >= 0")
        check("cluster_affinity", 0 <= self.cluster_affinity < 1, "must lie in [0, 1)")
        check("mean_extra_conditions", self.mean_extra_conditions >= 0, "must be >= 0")
        check("risk_cap", self.risk_cap >= 1, "must be >= 1")
        check("risk_condition_rate", 0 <= self.risk_condition_rate < 1, "must lie in [0, 1)")
        check("risk_zipf_exponent", self.risk_zipf_exponent >= 0, "must be >= 0")
        check("los_burden_slope", self.los_burden_slope >= 0, "must be >= 0")
        check("seed", 0 <= self.seed < 2**64, "must be a 64-bit unsigned integer")
        return self

    @classmethod
    def from_mapping(cls, mapping) -> "SynthConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(mapping) - set(known)
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown synth key")
        return cls(**mapping).validate()


class World(NamedTuple):
    codes: list  # code strings, index = code index
    cluster_of: np.ndarray
    cluster_dists: np.ndarray  # [n_clusters, vocab] row-stochastic
    background: np.ndarray  # [vocab]
    cluster_prior: np.ndarray  # [n_clusters]
    risk_codes: frozenset  # code strings


def build_world(config: SynthConfig) -> World:
    """Deterministic code universe for ``(vocab_size, n_clusters, world_seed)``."""
    rng = np.random.default_rng(np.random.SeedSequence(config.world_seed, spawn_key=(_WORLD_KEY,)))
    v, k = config.vocab_size, config.n_clusters
    cluster_of = np.arange(v) % k
    width = max(2, len(str(v // k)))
    within = np.arange(v) // k
    codes = [f"D{c:02d}.{j:0{width}d}" for c, j in zip(cluster_of, within)]

    dists = np.zeros((k, v))
    for c in range(k):
        a = config.risk_zipf_exponent if c == 0 else config.zipf_exponent
        members = np.flatnonzero(cluster_of == c)
        w = 1.0 / (np.arange(1, len(members) + 1) ** a)
        dists[c, rng.permutation(members)] = w / w.sum()
    bg = 1.0 / (np.arange(1, v + 1) ** config.zipf_exponent)
    background = np.empty(v)
    background[rng.permutation(v)] = bg / bg.sum()
    # cluster 0 is the outcome-relevant condition, carried independently of the others
    prior = 1.0 / np.arange(1, k) ** 0.5
    prior = np.concatenate([[0.0], prior[rng.permutation(k - 1)]])
    prior /= prior.sum()
    risk = frozenset(codes[i] for i in np.flatnonzero(cluster_of == 0))
    return World(codes, cluster_of, dists, background, prior, risk)


def _patient_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_PATIENT_KEY, index)))


class _Draft(NamedTuple):
    visits: list  # list of lists of code indices
    u_outcome: float
    u_los: float
    rng: np.random.Generator


def _draft_patient(world: World, config: SynthConfig, index: int) -> _Draft:
    rng = _patient_rng(config.seed, index)
    u_outcome, u_los, u_risk = rng.random(3)
    n_cond = 1 + rng.poisson(config.mean_extra_conditions)
    n_cond = min(n_cond, len(world.cluster_prior) - 1)
    conditions = rng.choice(len(world.cluster_prior), size=n_cond, replace=False, p=world.cluster_prior)
    if u_risk < config.risk_condition_rate:
        conditions = np.append(conditions, 0)
    p = config.cluster_affinity * world.cluster_dists[conditions].mean(axis=0)
    p += (1.0 - config.cluster_affinity) * world.background
    p /= p.sum()

    n_visits = 1 + rng.poisson(config.mean_visits - 1.0)
    sizes = 1 + rng.poisson(config.mean_codes_per_visit - 1.0, size=n_visits)
    sizes = np.minimum(sizes, len(p))
    short = 3 - int(sizes.sum())
    if short > 0:
        sizes[-1] += short
    visits = [list(rng.choice(len(p), size=int(n), replace=False, p=p)) for n in sizes]
    return _Draft(visits, float(u_outcome), float(u_los), rng)


def _calibrate_offset(scores: np.ndarray, target: float) -> float:
    """Intercept b such that mean(sigmoid(b + scores)) == target."""

    def gap(b):
        return float(np.mean(1.0 / (1.0 + np.exp(-(b + scores))))) - target

    lo, hi = -50.0 - scores.max(), 50.0 - scores.min()
    return brentq(gap, lo, hi, xtol=1e-12)


def generate_cohort(config: SynthConfig) -> list:
    """Draw ``config.n_patients`` patients; fully determined by the config."""
    config.validate()
    world = build_world(config)
    drafts = [_draft_patient(world, config, i) for i in range(config.n_patients)]

    risk_idx = {world.codes.index(c) for c in world.risk_codes}
    risk = np.array(
        [min(len(risk_idx.intersection(c for v in d.visits for c in v)), config.risk_cap)
         for d in drafts],
        dtype=float,
    )
    outcome_scores = config.signal_strength * risk
    b_out = _calibrate_offset(outcome_scores, config.outcome_prevalence)
    p_out = 1.0 / (1.0 + np.exp(-(b_out + outcome_scores)))

    burden = np.array([sum(len(v) for v in d.visits) for d in drafts], dtype=float)
    z = (burden - burden.mean()) / (burden.std() or 1.0)
    los_scores = config.los_burden_slope * z
    b_los = _calibrate_offset(los_scores, config.prolonged_los_rate)
    p_los = 1.0 / (1.0 + np.exp(-(b_los + los_scores)))

    width = len(str(max(config.n_patients - 1, 1)))
    cohort = []
    for i, d in enumerate(drafts):
        prolonged = d.u_los < p_los[i]
        los = _draw_los(d.rng, d.visits, prolonged)
        visits = []
        for j, (codes, days) in enumerate(zip(d.visits, los), start=1):
            dx = tuple(
                DiagnosisCode(
                    world.codes[c],
                    present_on_admission=bool(d.rng.random() < 0.5),
                    captured_during_visit=bool(d.rng.random() < 0.7),
                    priority=int(d.rng.integers(0, 10)),
                )
                for c in codes
            )
            visits.append(order_codes_within_visit(Visit(dx, days, j)))
        cohort.append(PatientRecord(f"P{i:0{width}d}", tuple(visits), bool(d.u_outcome < p_out[i])))
    return cohort


def _draw_los(rng, visits, prolonged):
    los = rng.integers(0, 8, size=len(visits))
    if prolonged:
        sizes = np.array([len(v) for v in visits])
        heaviest = np.flatnonzero(sizes == sizes.max())
        long_visits = {int(rng.choice(heaviest))}
        long_visits.update(int(j) for j in np.flatnonzero(rng.random(len(visits)) < 0.1))
        for j in long_visits:
            los[j] = 8 + rng.geometric(0.25) - 1
    return [int(x) for x in los]


def risk_code_count(patient: PatientRecord, world: World) -> int:
    return len({c for c in patient.code_strings() if c in world.risk_codes})


# -- splitting ----------------------------------------------------------------

class CohortSplit(NamedTuple):
    train: list
    valid: list
    test: list


def split_cohort(cohort: Sequence, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> CohortSplit:
    """Seeded random partition; valid/test sizes are floored, train takes the rest."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ConfigError("ratios", f"need three positive ratios, got {ratios!r}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError("ratios", f"must sum to 1, got {sum(ratios)!r}")
    n = len(cohort)
    if n < 3:
        raise TooSmall(f"cannot split a cohort of {n} patients three ways")
    n_valid = math.floor(n * ratios[1] + 1e-9)
    n_test = math.floor(n * ratios[2] + 1e-9)
    n_train = n - n_valid - n_test
    perm = np.random.default_rng(seed).permutation(n)
    pick = [cohort[i] for i in perm]
    return CohortSplit(pick[:n_train], pick[n_train:n_train + n_valid], pick[n_train + n_valid:])


def _has_both_labels(patients) -> bool:
    labels = {p.outcome_label for p in patients}
    return True in labels and False in labels


def subsample_training(train: Sequence, size: int, replicate_seed: int, max_tries: int = 100) -> list:
    """Uniform sample without replacement containing both outcome classes."""
    if not 1 <= size <= len(train):
        raise RangeError(f"size {size} outside [1, {len(train)}]")
    rng = np.random.default_rng(replicate_seed)
    for _ in range(max_tries):
        sample = [train[i] for i in rng.permutation(len(train))[:size]]
        if _has_both_labels(sample):
            return sample
    raise DegenerateSample(f"no sample of size {size} with both labels after {max_tries} tries")
