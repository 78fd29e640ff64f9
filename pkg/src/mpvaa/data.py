"""EHR data model: vocabulary, visits, patient records, dataset I/O, splits.

A dataset is a set of patient records over a shared concept vocabulary.
Each visit carries an unordered set of concept indices plus three side
modalities: a demographic triple, (lab item, value bin) tuples, and a
pre-tokenized note. Note tokens follow one convention: ids below the
concept count N are mentions of that concept; ids in [N, h) are context
words.

On disk a dataset is line-delimited JSON with a versioned header that
also carries the modality dimensions; the vocabulary lives in a sidecar
file (``<path>.vocab``). Serialization is canonical, so saving a loaded
dataset reproduces the bytes exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .rng import SeededRng

__all__ = [
    "CATEGORIES",
    "AGE_BINS",
    "GENDERS",
    "WEIGHT_BINS",
    "DEM_FEATURES",
    "Demographics",
    "Visit",
    "PatientRecord",
    "ConceptVocabulary",
    "Dataset",
    "SplitSpec",
    "DatasetFormatError",
    "save_dataset",
    "load_dataset",
    "vocab_sidecar_path",
    "flatten_concepts",
    "sequential_targets",
    "hf_labels",
    "build_hf_split",
    "build_sequential_split",
]

CATEGORIES = ("diagnosis", "procedure", "medication")
AGE_BINS = ("neonate", "middle", "adult", "old")
GENDERS = ("male", "female")
WEIGHT_BINS = ("healthy", "overweight", "underweight")

# Canonical order of the 9 demographic indicator features.
DEM_FEATURES = ("old", "adult", "neonate", "middle",
                "healthy", "overweight", "underweight", "male", "female")

DATA_HEADER_PREFIX = "#mpvaa-dataset v1"
VOCAB_HEADER = "#mpvaa-vocab v1"


class DatasetFormatError(ValueError):
    """Raised when a dataset or vocabulary file violates the schema."""


@dataclass(frozen=True)
class Demographics:
    age: str
    gender: str
    weight: str

    def __post_init__(self):
        if self.age not in AGE_BINS:
            raise ValueError(f"unknown age bin {self.age!r}")
        if self.gender not in GENDERS:
            raise ValueError(f"unknown gender {self.gender!r}")
        if self.weight not in WEIGHT_BINS:
            raise ValueError(f"unknown weight bin {self.weight!r}")


@dataclass(frozen=True)
class Visit:
    """One encounter: concept set plus demographic, lab, and note modalities."""

    codes: tuple[int, ...]           # sorted distinct concept indices, at least one
    demo: Demographics
    labs: tuple[tuple[int, int], ...]  # sorted distinct (lab item, value bin)
    note_tokens: tuple[int, ...]

    def __post_init__(self):
        if len(self.codes) == 0:
            raise ValueError("a visit needs at least one concept code")
        if list(self.codes) != sorted(set(self.codes)):
            raise ValueError("visit codes must be sorted and distinct")
        if list(self.labs) != sorted(set(self.labs)):
            raise ValueError("visit labs must be sorted and distinct")


@dataclass(frozen=True)
class PatientRecord:
    pid: str
    visits: tuple[Visit, ...]

    def __post_init__(self):
        if len(self.visits) < 2:
            raise ValueError(f"patient {self.pid!r} has {len(self.visits)} visit(s); need at least 2")

    @property
    def history(self) -> tuple[Visit, ...]:
        """All visits except the final (prediction-target) one."""
        return self.visits[:-1]


class ConceptVocabulary:
    """Dense, ordered code->index mapping with a category per concept."""

    def __init__(self, codes: Sequence[str], categories: Sequence[str]):
        if len(codes) != len(categories):
            raise ValueError("codes and categories length mismatch")
        if len(set(codes)) != len(codes):
            raise ValueError("duplicate concept codes")
        for cat in categories:
            if cat not in CATEGORIES:
                raise ValueError(f"unknown category {cat!r}")
        self._codes = tuple(codes)
        self._categories = tuple(categories)
        self._index = {c: i for i, c in enumerate(codes)}

    def __len__(self) -> int:
        return len(self._codes)

    def __contains__(self, code: str) -> bool:
        return code in self._index

    def index(self, code: str) -> int:
        try:
            return self._index[code]
        except KeyError:
            raise KeyError(f"unknown concept code {code!r}") from None

    def code_of(self, index: int) -> str:
        return self._codes[index]

    def category_of(self, index: int) -> str:
        return self._categories[index]

    @property
    def codes(self) -> tuple[str, ...]:
        return self._codes

    def indices_of_category(self, category: str) -> tuple[int, ...]:
        return tuple(i for i, c in enumerate(self._categories) if c == category)


@dataclass
class Dataset:
    vocab: ConceptVocabulary
    records: list[PatientRecord]
    note_vocab_size: int
    lab_items: int
    lab_bins: int

    @property
    def lab_space(self) -> int:
        """Size of the (lab item, value bin) tuple feature space."""
        return self.lab_items * self.lab_bins

    def record(self, pid: str) -> PatientRecord:
        for r in self.records:
            if r.pid == pid:
                return r
        raise KeyError(f"unknown patient id {pid!r}")

    def validate(self) -> None:
        n = len(self.vocab)
        for r in self.records:
            for vi, v in enumerate(r.visits):
                for c in v.codes:
                    if not 0 <= c < n:
                        raise DatasetFormatError(f"patient {r.pid} visit {vi}: concept index {c} out of range")
                for item, bin_ in v.labs:
                    if not (0 <= item < self.lab_items and 0 <= bin_ < self.lab_bins):
                        raise DatasetFormatError(f"patient {r.pid} visit {vi}: lab tuple ({item},{bin_}) out of range")
                for t in v.note_tokens:
                    if not 0 <= t < self.note_vocab_size:
                        raise DatasetFormatError(f"patient {r.pid} visit {vi}: note token {t} out of range")


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------


def vocab_sidecar_path(path) -> Path:
    return Path(str(path) + ".vocab")


def _visit_to_obj(v: Visit) -> dict:
    return {
        "codes": list(v.codes),
        "demo": {"age": v.demo.age, "gender": v.demo.gender, "weight": v.demo.weight},
        "labs": [list(t) for t in v.labs],
        "note_tokens": list(v.note_tokens),
    }


def save_dataset(dataset: Dataset, path) -> None:
    """Write records to ``path`` and the vocabulary to ``<path>.vocab``."""
    path = Path(path)
    meta = {
        "lab_bins": dataset.lab_bins,
        "lab_items": dataset.lab_items,
        "note_vocab_size": dataset.note_vocab_size,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(DATA_HEADER_PREFIX + " " + json.dumps(meta, sort_keys=True, separators=(",", ":")) + "\n")
        for r in dataset.records:
            obj = {"id": r.pid, "visits": [_visit_to_obj(v) for v in r.visits]}
            fh.write(json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n")
    with open(vocab_sidecar_path(path), "w", encoding="utf-8") as fh:
        fh.write(VOCAB_HEADER + "\n")
        for i, code in enumerate(dataset.vocab.codes):
            obj = {"category": dataset.vocab.category_of(i), "code": code, "index": i}
            fh.write(json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n")


def _parse_visit(obj, pid: str, vi: int, line_no: int) -> Visit:
    def fail(fieldname, why):
        raise DatasetFormatError(f"line {line_no}: patient {pid!r} visit {vi}: field {fieldname!r} {why}")

    if not isinstance(obj, dict):
        fail("visits", "entry is not an object")
    for key in ("codes", "demo", "labs", "note_tokens"):
        if key not in obj:
            fail(key, "is missing")
    codes = obj["codes"]
    if not isinstance(codes, list) or not all(isinstance(c, int) for c in codes):
        fail("codes", "must be a list of integers")
    demo = obj["demo"]
    if not isinstance(demo, dict) or set(demo) != {"age", "gender", "weight"}:
        fail("demo", "must have exactly age/gender/weight")
    labs = obj["labs"]
    if not isinstance(labs, list) or not all(
        isinstance(t, list) and len(t) == 2 and all(isinstance(x, int) for x in t) for t in labs
    ):
        fail("labs", "must be a list of [item, bin] integer pairs")
    tokens = obj["note_tokens"]
    if not isinstance(tokens, list) or not all(isinstance(t, int) for t in tokens):
        fail("note_tokens", "must be a list of integers")
    try:
        return Visit(
            codes=tuple(sorted(set(codes))),
            demo=Demographics(**demo),
            labs=tuple(sorted(set(tuple(t) for t in labs))),
            note_tokens=tuple(tokens),
        )
    except ValueError as err:
        raise DatasetFormatError(f"line {line_no}: patient {pid!r} visit {vi}: {err}") from None


def load_dataset(path) -> Dataset:
    path = Path(path)
    vocab_path = vocab_sidecar_path(path)
    if not vocab_path.exists():
        raise DatasetFormatError(f"vocabulary sidecar {vocab_path} not found")

    codes: list[str] = []
    categories: list[str] = []
    with open(vocab_path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != VOCAB_HEADER:
            raise DatasetFormatError(f"{vocab_path}: bad header {header!r}")
        for line_no, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise DatasetFormatError(f"{vocab_path} line {line_no}: invalid JSON: {err}") from None
            if obj.get("index") != len(codes):
                raise DatasetFormatError(f"{vocab_path} line {line_no}: field 'index' not dense/ordered")
            codes.append(obj["code"])
            categories.append(obj["category"])
    vocab = ConceptVocabulary(codes, categories)

    records: list[PatientRecord] = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if not header.startswith(DATA_HEADER_PREFIX + " "):
            raise DatasetFormatError(f"{path}: bad header {header!r}")
        try:
            meta = json.loads(header[len(DATA_HEADER_PREFIX) + 1:])
        except json.JSONDecodeError as err:
            raise DatasetFormatError(f"{path}: header meta is invalid JSON: {err}") from None
        for key in ("note_vocab_size", "lab_items", "lab_bins"):
            if key not in meta:
                raise DatasetFormatError(f"{path}: header meta missing field {key!r}")
        seen: set[str] = set()
        for line_no, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise DatasetFormatError(f"line {line_no}: invalid JSON: {err}") from None
            pid = obj.get("id")
            if not isinstance(pid, str):
                raise DatasetFormatError(f"line {line_no}: field 'id' missing or not a string")
            if pid in seen:
                raise DatasetFormatError(f"line {line_no}: duplicate patient id {pid!r}")
            seen.add(pid)
            visits_obj = obj.get("visits")
            if not isinstance(visits_obj, list):
                raise DatasetFormatError(f"line {line_no}: patient {pid!r}: field 'visits' must be a list")
            visits = tuple(_parse_visit(v, pid, vi, line_no) for vi, v in enumerate(visits_obj))
            if len(visits) < 2:
                raise DatasetFormatError(f"line {line_no}: patient {pid!r} has {len(visits)} visit(s); need at least 2")
            records.append(PatientRecord(pid=pid, visits=visits))

    dataset = Dataset(
        vocab=vocab,
        records=records,
        note_vocab_size=int(meta["note_vocab_size"]),
        lab_items=int(meta["lab_items"]),
        lab_bins=int(meta["lab_bins"]),
    )
    dataset.validate()
    return dataset


# --------------------------------------------------------------------------
# Sequence and task views
# --------------------------------------------------------------------------


def flatten_concepts(visits: Iterable[Visit]) -> list[int]:
    """Visit-ordered concept sequence; within a visit codes keep their sorted order."""
    return [c for v in visits for c in v.codes]


def sequential_targets(record: PatientRecord, vocab: ConceptVocabulary):
    """(history visits, next-visit diagnosis set) pairs for every cut point.

    Pairs with an empty diagnosis target are still emitted; ranking metrics
    skip them because their ideal gain is undefined.
    """
    diag = set(vocab.indices_of_category("diagnosis"))
    pairs = []
    for t in range(1, len(record.visits)):
        target = frozenset(c for c in record.visits[t].codes if c in diag)
        pairs.append((record.visits[:t], target))
    return pairs


# --------------------------------------------------------------------------
# Splits
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    task: str  # "hf_outcome" | "sequential_disease"
    train: tuple[str, ...]
    valid: tuple[str, ...]
    test: tuple[str, ...]

    def __post_init__(self):
        groups = [set(self.train), set(self.valid), set(self.test)]
        total = sum(len(g) for g in groups)
        if len(groups[0] | groups[1] | groups[2]) != total:
            raise ValueError("split groups are not disjoint")

    @property
    def sizes(self) -> dict:
        return {"train": len(self.train), "valid": len(self.valid), "test": len(self.test)}


def hf_labels(dataset: Dataset, hf_concept: int) -> dict[str, int]:
    """1 if the held-out final visit contains the target concept, else 0."""
    return {r.pid: int(hf_concept in r.visits[-1].codes) for r in dataset.records}


def _partition_counts(n: int, ratios) -> tuple[int, int, int]:
    n_valid = round(ratios[1] * n)
    n_test = round(ratios[2] * n)
    n_train = n - n_valid - n_test
    return n_train, n_valid, n_test


def build_hf_split(dataset: Dataset, hf_concept: int, seed: int,
                   ratios=(0.75, 0.125, 0.125)) -> SplitSpec:
    """Balanced outcome-prediction split.

    Positives carry the target concept in the final visit. Negatives are
    drawn only from patients whose record never contains it: a patient
    with the concept anywhere in the history is excluded from the
    negative pool. Classes are balanced in every partition.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    positives = []
    negatives = []
    for r in dataset.records:
        in_final = hf_concept in r.visits[-1].codes
        in_history = any(hf_concept in v.codes for v in r.visits[:-1])
        if in_final:
            positives.append(r.pid)
        elif not in_history:
            negatives.append(r.pid)
        # concept only in the history: excluded from both classes
    n = min(len(positives), len(negatives))
    n_train, n_valid, n_test = _partition_counts(n, ratios)
    if min(n_train, n_valid, n_test) < 1:
        raise ValueError(
            f"too few patients for an outcome split: {len(positives)} positives, "
            f"{len(negatives)} eligible negatives"
        )
    rng = SeededRng(seed).derive("hf-split")
    pos = [positives[i] for i in rng.permutation(len(positives))][:n]
    neg = [negatives[i] for i in rng.permutation(len(negatives))][:n]

    def takes(items):
        return (tuple(items[:n_train]),
                tuple(items[n_train:n_train + n_valid]),
                tuple(items[n_train + n_valid:n_train + n_valid + n_test]))

    p_tr, p_va, p_te = takes(pos)
    n_tr, n_va, n_te = takes(neg)
    return SplitSpec(task="hf_outcome",
                     train=p_tr + n_tr, valid=p_va + n_va, test=p_te + n_te)


def build_sequential_split(dataset: Dataset, seed: int,
                           ratios=(0.75, 0.125, 0.125)) -> SplitSpec:
    """Plain random patient split for next-visit code prediction."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    ids = [r.pid for r in dataset.records]
    rng = SeededRng(seed).derive("seq-split")
    ids = [ids[i] for i in rng.permutation(len(ids))]
    n_train, n_valid, n_test = _partition_counts(len(ids), ratios)
    if min(n_train, n_valid, n_test) < 1:
        raise ValueError(f"too few patients ({len(ids)}) for a sequential split")
    return SplitSpec(
        task="sequential_disease",
        train=tuple(ids[:n_train]),
        valid=tuple(ids[n_train:n_train + n_valid]),
        test=tuple(ids[n_train + n_valid:]),
    )
