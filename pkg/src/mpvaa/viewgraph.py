"""Per-patient, per-view concept graphs and their autoencoder embeddings.

For one patient, the nodes are the distinct concepts of that record and
the adjacency is binary visit co-occurrence (shared by all views). Each
view contributes its own feature matrix: entry (a, b) is the Dice
similarity of the two concepts' intermediate binary feature vectors in
that view. A two-layer graph convolution maps features to embeddings,
trained to reconstruct the self-loop-augmented adjacency from inner
products.

Graphs are patient-local: embedding lookups for concepts outside the
patient's record are errors by design.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import DEM_FEATURES, Dataset, PatientRecord
from .optim import Adam
from .rng import SeededRng
from .tensor import Tensor

__all__ = [
    "VIEWS",
    "ViewGraph",
    "InnerViewEmbedding",
    "GaeParams",
    "GaeConfig",
    "GaeTraining",
    "build_nodes",
    "build_adjacency",
    "intermediate_features",
    "dice",
    "dice_matrix",
    "build_view_graph",
    "build_view_graphs",
    "normalize_adjacency",
    "gcn_forward",
    "init_gae_params",
    "train_gae",
]

VIEWS = ("dem", "lab", "notes")

_DEM_INDEX = {name: i for i, name in enumerate(DEM_FEATURES)}


@dataclass(frozen=True)
class ViewGraph:
    view: str
    nodes: tuple[int, ...]        # sorted distinct concept indices of the record
    adjacency: np.ndarray         # binary, symmetric, zero diagonal
    features: np.ndarray          # Dice similarity matrix, square over nodes


@dataclass(frozen=True)
class InnerViewEmbedding:
    view: str
    nodes: tuple[int, ...]
    z: np.ndarray                 # one row per node concept

    def row(self, concept: int) -> np.ndarray:
        try:
            return self.z[self.nodes.index(concept)]
        except ValueError:
            raise KeyError(
                f"concept {concept} is not a node of this patient's {self.view} graph"
            ) from None


def build_nodes(record: PatientRecord) -> tuple[int, ...]:
    return tuple(sorted({c for v in record.visits for c in v.codes}))


def build_adjacency(record: PatientRecord, nodes: tuple[int, ...]) -> np.ndarray:
    """A[a, b] = 1 iff distinct concepts a and b share at least one visit."""
    pos = {c: i for i, c in enumerate(nodes)}
    n = len(nodes)
    a = np.zeros((n, n), dtype=np.float64)
    for visit in record.visits:
        idx = [pos[c] for c in visit.codes]
        for i in idx:
            for j in idx:
                if i != j:
                    a[i, j] = 1.0
    return a


# --------------------------------------------------------------------------
# Intermediate (raw binary) features per view
# --------------------------------------------------------------------------


def _dem_vector(record: PatientRecord, concept: int) -> np.ndarray:
    x = np.zeros(len(DEM_FEATURES), dtype=np.float64)
    for v in record.visits:
        if concept in v.codes:
            x[_DEM_INDEX[v.demo.age]] = 1.0
            x[_DEM_INDEX[v.demo.weight]] = 1.0
            x[_DEM_INDEX[v.demo.gender]] = 1.0
    return x


def _lab_vector(record: PatientRecord, concept: int, lab_items: int, lab_bins: int) -> np.ndarray:
    x = np.zeros(lab_items * lab_bins, dtype=np.float64)
    for v in record.visits:
        if concept in v.codes:
            for item, bin_ in v.labs:
                x[item * lab_bins + bin_] = 1.0
    return x


def _note_context(record: PatientRecord, concept: int, note_vocab: int, window: int) -> np.ndarray:
    """Tokens within ``window`` positions of any mention of ``concept``.

    A mention is the token whose id equals the concept index. Only notes
    of visits that contain the concept are scanned.
    """
    x = np.zeros(note_vocab, dtype=np.float64)
    for v in record.visits:
        if concept not in v.codes:
            continue
        tokens = v.note_tokens
        for pos, tok in enumerate(tokens):
            if tok != concept:
                continue
            lo = max(0, pos - window)
            hi = min(len(tokens), pos + window + 1)
            for q in range(lo, hi):
                if q != pos:
                    x[tokens[q]] = 1.0
    return x


def _notes_vector(record: PatientRecord, concept: int, note_vocab: int, window: int) -> np.ndarray:
    x = _note_context(record, concept, note_vocab, window)
    if x.any():
        return x
    # concept never mentioned: fall back to the context of co-occurring concepts
    co = set()
    for v in record.visits:
        if concept in v.codes:
            co.update(c for c in v.codes if c != concept)
    for other in sorted(co):
        x = np.maximum(x, _note_context(record, other, note_vocab, window))
    return x


def intermediate_features(view: str, concept: int, record: PatientRecord,
                          dataset: Dataset, window: int = 2) -> np.ndarray:
    """Raw binary feature vector of one concept for one view."""
    if view not in VIEWS:
        raise ValueError(f"unknown view {view!r}")
    if all(concept not in v.codes for v in record.visits):
        raise ValueError(f"concept {concept} does not occur in patient {record.pid!r}")
    if view == "dem":
        return _dem_vector(record, concept)
    if view == "lab":
        return _lab_vector(record, concept, dataset.lab_items, dataset.lab_bins)
    return _notes_vector(record, concept, dataset.note_vocab_size, window)


def dice(x: np.ndarray, y: np.ndarray) -> float:
    """Set-overlap similarity 2|x∩y| / (|x|+|y|) on binary vectors; 0 when both empty."""
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape != y.shape:
        raise ValueError(f"dice: shapes {x.shape} and {y.shape} differ")
    total = x.sum() + y.sum()
    if total == 0:
        return 0.0
    return float(2.0 * np.sum((x > 0) & (y > 0)) / total)


def dice_matrix(raw: np.ndarray) -> np.ndarray:
    """Pairwise Dice over the rows of a binary feature matrix (vectorized)."""
    b = (np.asarray(raw) > 0).astype(np.float64)
    inter = b @ b.T
    sizes = b.sum(axis=1)
    denom = sizes[:, None] + sizes[None, :]
    out = np.zeros_like(inter)
    np.divide(2.0 * inter, denom, out=out, where=denom > 0)
    return out


def build_view_graph(record: PatientRecord, view: str, dataset: Dataset,
                     window: int = 2) -> ViewGraph:
    nodes = build_nodes(record)
    adjacency = build_adjacency(record, nodes)
    raw = np.stack([intermediate_features(view, c, record, dataset, window) for c in nodes])
    return ViewGraph(view=view, nodes=nodes, adjacency=adjacency, features=dice_matrix(raw))


def build_view_graphs(record: PatientRecord, dataset: Dataset, window: int = 2) -> dict[str, ViewGraph]:
    return {view: build_view_graph(record, view, dataset, window) for view in VIEWS}


# --------------------------------------------------------------------------
# Two-layer GCN and autoencoder training
# --------------------------------------------------------------------------


def normalize_adjacency(a: np.ndarray) -> np.ndarray:
    """Symmetric degree normalization of the self-loop-augmented adjacency."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"adjacency must be square, got {a.shape}")
    a_hat = a + np.eye(a.shape[0])
    d_inv_sqrt = 1.0 / np.sqrt(a_hat.sum(axis=1))
    return a_hat * d_inv_sqrt[:, None] * d_inv_sqrt[None, :]


@dataclass
class GaeParams:
    w0: Tensor  # nodes x hidden
    w1: Tensor  # hidden x embedding


@dataclass(frozen=True)
class GaeConfig:
    d_k: int = 32
    d_hidden: int | None = None   # defaults to 2 * d_k
    epochs: int = 100
    lr: float = 0.01

    @property
    def hidden(self) -> int:
        return self.d_hidden if self.d_hidden is not None else 2 * self.d_k


def gcn_forward(x, a_norm, params: GaeParams) -> Tensor:
    """Row-stochastic embeddings: softmax(A·relu(A·X·W0)·W1) per node row."""
    x = T.as_tensor(x)
    a_norm = T.as_tensor(a_norm)
    if x.shape[0] != a_norm.shape[0]:
        raise T.ShapeError(f"features {x.shape} do not match adjacency {a_norm.shape}")
    hidden = T.relu(T.matmul(T.matmul(a_norm, x), params.w0))
    return T.softmax(T.matmul(T.matmul(a_norm, hidden), params.w1), axis=-1)


def init_gae_params(n_nodes: int, config: GaeConfig, rng: SeededRng) -> GaeParams:
    return GaeParams(
        w0=Tensor(rng.xavier_uniform((n_nodes, config.hidden), dtype=T.default_dtype()), requires_grad=True),
        w1=Tensor(rng.xavier_uniform((config.hidden, config.d_k), dtype=T.default_dtype()), requires_grad=True),
    )


def _reconstruction_loss(z: Tensor, labels: Tensor, weights: Tensor, weight_sum: float) -> Tensor:
    """Positive-weighted binary cross-entropy between sigmoid(Z Zᵀ) and the labels."""
    p = T.sigmoid(T.matmul(z, T.transpose(z)))
    pos = T.mul(labels, T.log(T.clamp_min(p, 1e-12)))
    neg = T.mul(T.sub(1.0, labels), T.log(T.clamp_min(T.sub(1.0, p), 1e-12)))
    weighted = T.mul(weights, T.add(pos, neg))
    return T.scale(T.reduce_sum(weighted), -1.0 / weight_sum)


@dataclass
class GaeTraining:
    embedding: InnerViewEmbedding
    losses: list[float]


def train_gae(graph: ViewGraph, config: GaeConfig, rng: SeededRng,
              init: GaeParams | None = None) -> GaeTraining:
    """Fit the autoencoder on one graph; returns the embedding and the loss curve.

    Non-finite values anywhere abort with NumericError so callers can skip
    the patient.
    """
    n = len(graph.nodes)
    if n == 0:
        raise ValueError("empty graph")
    dtype = T.default_dtype()
    a_norm = Tensor(normalize_adjacency(graph.adjacency).astype(dtype))
    x = Tensor(graph.features.astype(dtype))
    a_hat = (graph.adjacency + np.eye(n)).astype(dtype)
    n_edges = float(a_hat.sum())
    n_total = float(n * n)
    pos_weight = (n_total - n_edges) / n_edges if n_edges > 0 else 1.0
    weights_arr = np.where(a_hat > 0, pos_weight, 1.0).astype(dtype)
    labels = Tensor(a_hat)
    weights = Tensor(weights_arr)
    weight_sum = float(weights_arr.sum())

    params = init if init is not None else init_gae_params(n, config, rng)
    opt = Adam({"w0": params.w0, "w1": params.w1}, lr=config.lr)
    losses = []
    for _ in range(config.epochs):
        z = gcn_forward(x, a_norm, params)
        loss = _reconstruction_loss(z, labels, weights, weight_sum)
        losses.append(loss.item())
        T.backward(loss)
        opt.step()
    with T.no_grad():
        z_final = gcn_forward(x, a_norm, params)
        losses.append(_reconstruction_loss(z_final, labels, weights, weight_sum).item())
    embedding = InnerViewEmbedding(view=graph.view, nodes=graph.nodes,
                                   z=z_final.data.astype(np.float32))
    return GaeTraining(embedding=embedding, losses=losses)
