"""Synthetic multi-modal EHR generator with a planted, recoverable signal.

Each patient draws a latent binary "risk" state. Signal strength ``s``
controls how strongly that state shows up in the observable record:

* risk patients get codes from a reserved diagnosis cluster planted into
  each history visit with probability ``s`` (never for non-risk patients,
  and the cluster is excluded from background draws);
* the heart-failure code appears in the final visit: with probability
  ``s`` it equals the risk state, otherwise it is a fair coin;
* risk also tilts the side modalities -- an "overweight" demographic bin,
  a designated high lab tuple, and a reserved risk context token near
  cluster mentions in notes -- each with probability proportional to ``s``.

At ``s = 1`` the rule is deterministic: cluster presence in the history
is equivalent to the final-visit outcome, so a Bayes classifier on the
cluster separates perfectly. At ``s = 0`` the outcome is an independent
coin and every modality is uninformative.

Per-patient substreams are derived from (seed, patient id), so the output
is independent of generation order.
"""

from __future__ import annotations

from dataclasses import dataclass

from .data import (AGE_BINS, GENDERS, ConceptVocabulary, Dataset,
                   Demographics, PatientRecord, Visit)
from .rng import SeededRng

__all__ = [
    "GeneratorConfig",
    "generate_synthetic",
    "hf_concept_index",
    "planted_cluster",
    "RISK_LAB_TUPLE",
]

HF_CODE = "dx_hf"
CLUSTER_PREFIX = "dx_risk"
RISK_LAB_TUPLE = (0, -1)  # (item 0, highest bin); bin resolved per config


@dataclass(frozen=True)
class GeneratorConfig:
    patients: int = 500
    vocab_size: int = 200
    mean_visits: float = 2.66   # matches the reference corpus summary
    mean_codes: float = 13.1
    signal_strength: float = 1.0
    cluster_size: int = 5
    lab_items: int = 8
    lab_bins: int = 4
    context_tokens: int = 40
    mean_labs: float = 3.0
    mentions_per_visit: int = 4

    def __post_init__(self):
        if self.patients < 4:
            raise ValueError(f"need at least 4 patients, got {self.patients}")
        if self.vocab_size < 10:
            raise ValueError(f"need a vocabulary of at least 10 concepts, got {self.vocab_size}")
        if not 0.0 <= self.signal_strength <= 1.0:
            raise ValueError("signal_strength must lie in [0, 1]")
        if self.mean_visits < 2.0:
            raise ValueError("mean_visits must be >= 2 (records need two visits)")
        if self.cluster_size < 1 or self.cluster_size + 1 >= self.vocab_size // 2:
            raise ValueError("cluster_size out of range for this vocabulary")


def build_vocabulary(config: GeneratorConfig) -> ConceptVocabulary:
    """Half diagnoses (incl. the HF code and the risk cluster), then procedures and medications."""
    n = config.vocab_size
    n_dx = n // 2
    n_px = n // 4
    n_rx = n - n_dx - n_px
    dx = [HF_CODE] + [f"{CLUSTER_PREFIX}{i}" for i in range(config.cluster_size)]
    dx += [f"dx_{i:04d}" for i in range(n_dx - len(dx))]
    px = [f"px_{i:04d}" for i in range(n_px)]
    rx = [f"rx_{i:04d}" for i in range(n_rx)]
    codes = dx + px + rx
    categories = ["diagnosis"] * n_dx + ["procedure"] * n_px + ["medication"] * n_rx
    return ConceptVocabulary(codes, categories)


def hf_concept_index(vocab: ConceptVocabulary) -> int:
    return vocab.index(HF_CODE)


def planted_cluster(vocab: ConceptVocabulary) -> tuple[int, ...]:
    return tuple(i for i, c in enumerate(vocab.codes) if c.startswith(CLUSTER_PREFIX))


def _weight_bin(rng: SeededRng, risk: bool, s: float) -> str:
    p_over = 0.2 + 0.6 * s if risk else 0.2
    u = rng.random()
    if u < p_over:
        return "overweight"
    return "healthy" if rng.random() < 0.8 else "underweight"


def _generate_patient(pid: str, config: GeneratorConfig, rng: SeededRng,
                      background: list[int], cluster: tuple[int, ...],
                      hf_index: int, n_concepts: int) -> PatientRecord:
    s = config.signal_strength
    risk = rng.random() < 0.5
    n_visits = 2 + rng.poisson(config.mean_visits - 2.0)
    hf_final = risk if rng.random() < s else (rng.random() < 0.5)

    demo = Demographics(
        age=AGE_BINS[rng.integers(0, len(AGE_BINS))],
        gender=GENDERS[rng.integers(0, len(GENDERS))],
        weight=_weight_bin(rng, risk, s),
    )

    risk_lab = (RISK_LAB_TUPLE[0], config.lab_bins - 1)
    visits = []
    for v in range(n_visits):
        last = v == n_visits - 1
        count = max(1, rng.poisson(config.mean_codes))

        planted: list[int] = []
        if not last and risk and rng.random() < s:
            k = 1 + rng.integers(0, min(2, len(cluster)))
            picks = rng.choice(len(cluster), size=k, replace=False)
            planted.extend(cluster[i] for i in picks)
        if last and hf_final:
            planted.append(hf_index)

        n_background = max(0, count - len(planted))
        n_background = min(n_background, len(background))
        picks = rng.choice(len(background), size=n_background, replace=False)
        codes = sorted(set(planted) | {background[i] for i in picks})

        labs = set()
        for _ in range(1 + rng.poisson(config.mean_labs)):
            labs.add((rng.integers(0, config.lab_items), rng.integers(0, config.lab_bins)))
        if not last and risk and rng.random() < s:
            labs.add(risk_lab)

        tokens: list[int] = []
        mentioned = [codes[i] for i in rng.choice(len(codes), size=min(len(codes), config.mentions_per_visit), replace=False)]
        for code in sorted(mentioned):
            ctx_a = n_concepts + rng.integers(0, config.context_tokens)
            ctx_b = n_concepts + rng.integers(0, config.context_tokens)
            if code in cluster and risk and rng.random() < s:
                ctx_b = n_concepts  # reserved risk context token
            tokens.extend((ctx_a, code, ctx_b))

        visits.append(Visit(codes=tuple(codes), demo=demo,
                            labs=tuple(sorted(labs)), note_tokens=tuple(tokens)))
    return PatientRecord(pid=pid, visits=tuple(visits))


def generate_synthetic(config: GeneratorConfig, seed: int) -> Dataset:
    """Build a dataset of ``config.patients`` records; deterministic in (config, seed)."""
    vocab = build_vocabulary(config)
    n = len(vocab)
    hf_index = hf_concept_index(vocab)
    cluster = planted_cluster(vocab)
    reserved = {hf_index, *cluster}
    background = [i for i in range(n) if i not in reserved]

    base = SeededRng(seed)
    records = []
    for k in range(config.patients):
        pid = f"p{k:05d}"
        rng = base.derive("patient", pid)
        records.append(_generate_patient(pid, config, rng, background, cluster, hf_index, n))

    dataset = Dataset(
        vocab=vocab,
        records=records,
        note_vocab_size=n + config.context_tokens,
        lab_items=config.lab_items,
        lab_bins=config.lab_bins,
    )
    dataset.validate()
    return dataset
