"""Attention autoencoder over per-patient view embeddings.

The encoder runs multi-head self-attention plus a feed-forward block over
the flattened concept sequence of one view and compresses it with mixed
pooling: a convex combination ``lam * max + (1 - lam) * mean`` over time.
The same encoder (shared weights by default) produces a mixed vector for
each of the three views. The decoder reconstructs the sequence from its
right-shifted embedding through causal self-attention and a multi-view
attention layer whose keys/values are the self-attention states gated by
a softmax over the fused cross-view vector. Logits over the concept
vocabulary give a next-concept distribution at every position; the
training objective is mean negative log-likelihood of the input sequence
itself (teacher forcing).

All attention is causally masked in the decoder, including the
multi-view layer: its key/value rows derive from the decoder's own
states, so unmasked attention would leak later positions into earlier
predictions.

Sequences within one batch are right-padded; padded keys are masked out
of attention, padded rows are excluded from pooling and from the loss.

Variants:

* ``full``  -- stochastic mixed pooling (lam drawn per training batch);
* ``mmvaa`` -- deterministic mean-max mixture, lam fixed at 0.5;
* ``vaa``   -- no mixing, pure mean pooling (lam fixed at 0);
* ``sin``   -- ``full`` plus sinusoidal positional encodings on inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .rng import SeededRng
from .tensor import Tensor
from .viewgraph import VIEWS, InnerViewEmbedding

__all__ = [
    "VARIANTS",
    "HyperParams",
    "SequenceBatch",
    "init_params",
    "parameter_count",
    "sinusoid_table",
    "embed_sequence",
    "multi_head_attention",
    "causal_mask",
    "key_padding_mask",
    "encoder_forward",
    "mixed_pool",
    "cross_view",
    "decoder_forward",
    "sequence_logits",
    "reconstruction_loss",
    "shift_right",
    "make_batch",
    "forward_batch",
    "draw_lambda",
    "view_sequences",
    "patient_representation",
    "next_code_scores",
]

VARIANTS = ("full", "mmvaa", "vaa", "sin")

MASK_VALUE = -1e9


@dataclass(frozen=True)
class HyperParams:
    """Model dimensions. The model width equals the embedding width d_k,
    which makes the post-attention residual onto the input well-typed."""

    vocab_size: int
    d_k: int = 32
    heads: int = 4
    d_f: int | None = None        # feed-forward width, default 2 * d_m
    d_v: int | None = None        # value width, default d_m
    variant: str = "full"
    shared_encoder: bool = True

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be positive")
        if self.d_k < 1 or self.heads < 1:
            raise ValueError("dimensions and head count must be positive")
        if self.d_k % self.heads != 0:
            raise ValueError(f"d_k={self.d_k} not divisible by heads={self.heads}")
        if self.value_dim % self.heads != 0:
            raise ValueError(f"d_v={self.value_dim} not divisible by heads={self.heads}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")

    @property
    def d_m(self) -> int:
        return self.d_k

    @property
    def ff_dim(self) -> int:
        return self.d_f if self.d_f is not None else 2 * self.d_m

    @property
    def value_dim(self) -> int:
        return self.d_v if self.d_v is not None else self.d_k

    def to_manifest(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_k": self.d_k,
            "heads": self.heads,
            "d_f": self.ff_dim,
            "d_v": self.value_dim,
            "variant": self.variant,
            "shared_encoder": self.shared_encoder,
        }

    @classmethod
    def from_manifest(cls, obj: Mapping) -> "HyperParams":
        return cls(
            vocab_size=int(obj["vocab_size"]),
            d_k=int(obj["d_k"]),
            heads=int(obj["heads"]),
            d_f=int(obj["d_f"]),
            d_v=int(obj["d_v"]),
            variant=str(obj["variant"]),
            shared_encoder=bool(obj["shared_encoder"]),
        )


def encoder_prefixes(hp: HyperParams) -> dict[str, str]:
    if hp.shared_encoder:
        return {view: "enc" for view in VIEWS}
    return {view: f"enc_{view}" for view in VIEWS}


def init_params(hp: HyperParams, rng: SeededRng) -> dict[str, Tensor]:
    """Xavier-uniform weights, zero biases, identity layer-norm affines."""
    dtype = T.default_dtype()
    params: dict[str, Tensor] = {}

    def mat(name, rows, cols):
        params[name] = Tensor(rng.xavier_uniform((rows, cols), dtype=dtype), requires_grad=True)

    def vec(name, size, value=0.0):
        params[name] = Tensor(np.full(size, value, dtype=dtype), requires_grad=True)

    def attention(prefix, d_in):
        mat(f"{prefix}.wq", d_in, hp.d_m)
        mat(f"{prefix}.wk", d_in, hp.d_m)
        mat(f"{prefix}.wv", d_in, hp.value_dim)
        mat(f"{prefix}.wo", hp.value_dim, hp.d_m)

    def block(prefix, d_in):
        attention(f"{prefix}.attn", d_in)
        vec(f"{prefix}.ln1.gamma", hp.d_m, 1.0)
        vec(f"{prefix}.ln1.beta", hp.d_m)
        mat(f"{prefix}.ff.w1", hp.d_m, hp.ff_dim)
        vec(f"{prefix}.ff.b1", hp.ff_dim)
        mat(f"{prefix}.ff.w2", hp.ff_dim, hp.d_m)
        vec(f"{prefix}.ff.b2", hp.d_m)
        vec(f"{prefix}.ln2.gamma", hp.d_m, 1.0)
        vec(f"{prefix}.ln2.beta", hp.d_m)

    for prefix in sorted(set(encoder_prefixes(hp).values())):
        block(prefix, hp.d_k)

    attention("dec.sa", hp.d_k)
    vec("dec.ln_sa.gamma", hp.d_m, 1.0)
    vec("dec.ln_sa.beta", hp.d_m)
    attention("dec.ca", hp.d_m)
    vec("dec.ln1.gamma", hp.d_m, 1.0)
    vec("dec.ln1.beta", hp.d_m)
    mat("dec.ff.w1", hp.d_m, hp.ff_dim)
    vec("dec.ff.b1", hp.ff_dim)
    mat("dec.ff.w2", hp.ff_dim, hp.d_m)
    vec("dec.ff.b2", hp.d_m)
    vec("dec.ln2.gamma", hp.d_m, 1.0)
    vec("dec.ln2.beta", hp.d_m)

    for view in VIEWS:
        mat(f"fuse.w_{view}", hp.d_m, hp.d_m)
    mat("out.w", hp.d_m, hp.vocab_size)
    vec("out.b", hp.vocab_size)
    return params


def parameter_count(params: Mapping[str, Tensor]) -> int:
    return sum(p.data.size for p in params.values())


# --------------------------------------------------------------------------
# Sequence embedding
# --------------------------------------------------------------------------


def sinusoid_table(length: int, dim: int) -> np.ndarray:
    """Interleaved sin/cos positional table, shape (length, dim)."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(idx / 2.0) / dim)
    table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return table


def embed_sequence(concepts: Sequence[int], embedding: InnerViewEmbedding,
                   variant: str = "full") -> np.ndarray:
    """Stack embedding rows for the flattened concept sequence.

    Positions are added only under the ``sin`` variant; otherwise concept
    order within a visit is treated as meaningless.
    """
    if len(concepts) == 0:
        raise ValueError("cannot embed an empty concept sequence")
    rows = np.stack([embedding.row(c) for c in concepts]).astype(T.default_dtype())
    if variant == "sin":
        rows = rows + sinusoid_table(len(concepts), rows.shape[1]).astype(rows.dtype)
    return rows


def view_sequences(concepts: Sequence[int], embeddings: Mapping[str, InnerViewEmbedding],
                   variant: str = "full") -> dict[str, np.ndarray]:
    return {view: embed_sequence(concepts, embeddings[view], variant) for view in VIEWS}


def shift_right(e: np.ndarray) -> np.ndarray:
    """Prefix a zero row and drop the last: decoder input for teacher forcing."""
    if e.ndim == 2:
        return np.concatenate([np.zeros((1, e.shape[1]), dtype=e.dtype), e[:-1]], axis=0)
    return np.concatenate([np.zeros((e.shape[0], 1, e.shape[2]), dtype=e.dtype), e[:, :-1]], axis=1)


# --------------------------------------------------------------------------
# Masks
# --------------------------------------------------------------------------


def causal_mask(length: int, dtype=None) -> np.ndarray:
    """(1, 1, T, T) additive mask; position j attends to positions <= j."""
    dtype = dtype or T.default_dtype()
    m = np.triu(np.full((length, length), MASK_VALUE, dtype=dtype), k=1)
    return m[None, None]


def key_padding_mask(pad: np.ndarray, dtype=None) -> np.ndarray:
    """(B, 1, 1, T) additive mask from a (B, T) 1.0/0.0 validity map."""
    dtype = dtype or T.default_dtype()
    return ((1.0 - pad) * MASK_VALUE).astype(dtype)[:, None, None, :]


# --------------------------------------------------------------------------
# Attention and blocks
# --------------------------------------------------------------------------


def multi_head_attention(params: Mapping[str, Tensor], prefix: str, hp: HyperParams,
                         q_in, k_in, v_in, mask: np.ndarray | None = None):
    """Scaled dot-product attention over ``hp.heads`` parallel heads.

    Inputs are (B, T, d); an additive ``mask`` broadcastable to
    (B, heads, Tq, Tk) is applied to the scores before the row softmax.
    Returns (output (B, Tq, d_m), attention weights (B, heads, Tq, Tk)).
    """
    q_in, k_in, v_in = T.as_tensor(q_in), T.as_tensor(k_in), T.as_tensor(v_in)
    b, tq = q_in.shape[0], q_in.shape[1]
    tk = k_in.shape[1]
    heads = hp.heads
    dh = hp.d_m // heads
    dv = hp.value_dim // heads

    def split(x, t, d):
        return T.transpose(T.reshape(x, (b, t, heads, d)), (0, 2, 1, 3))

    q = split(T.matmul(q_in, params[f"{prefix}.wq"]), tq, dh)
    k = split(T.matmul(k_in, params[f"{prefix}.wk"]), tk, dh)
    v = split(T.matmul(v_in, params[f"{prefix}.wv"]), tk, dv)

    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dh))
    if mask is not None:
        scores = T.add(scores, T.as_tensor(mask))
    attn = T.softmax(scores, axis=-1)
    context = T.matmul(attn, v)
    merged = T.reshape(T.transpose(context, (0, 2, 1, 3)), (b, tq, hp.value_dim))
    return T.matmul(merged, params[f"{prefix}.wo"]), attn


def _feed_forward(params, prefix, x):
    hidden = T.relu(T.add(T.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    return T.add(T.matmul(hidden, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def encoder_forward(params: Mapping[str, Tensor], hp: HyperParams, e,
                    key_mask: np.ndarray | None = None, view: str = "dem") -> Tensor:
    """Self-attention block with residuals: (B, T, d_k) -> (B, T, d_m)."""
    e = T.as_tensor(e)
    prefix = encoder_prefixes(hp)[view]
    attended, _ = multi_head_attention(params, f"{prefix}.attn", hp, e, e, e, mask=key_mask)
    a = T.layer_norm(T.add(attended, e), params[f"{prefix}.ln1.gamma"], params[f"{prefix}.ln1.beta"])
    h = _feed_forward(params, f"{prefix}.ff", a)
    return T.layer_norm(T.add(h, a), params[f"{prefix}.ln2.gamma"], params[f"{prefix}.ln2.beta"])


def mixed_pool(h, lam: float, pad: np.ndarray | None = None) -> Tensor:
    """``lam * max + (1 - lam) * mean`` over the time axis of (B, T, d).

    Padded rows (``pad`` zeros) contribute to neither statistic.
    """
    h = T.as_tensor(h)
    if h.ndim != 3:
        raise T.ShapeError(f"mixed_pool expects (B, T, d), got {h.shape}")
    if h.shape[1] == 0:
        raise T.ShapeError("mixed_pool over an empty sequence")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if pad is None:
        z_max = T.reduce_max(h, axis=1)
        z_mean = T.reduce_mean(h, axis=1)
    else:
        pad3 = pad.astype(h.data.dtype)[:, :, None]
        z_max = T.reduce_max(T.add(h, T.as_tensor((1.0 - pad3) * MASK_VALUE)), axis=1)
        counts = pad3.sum(axis=1)  # (B, 1)
        z_mean = T.mul(T.reduce_sum(T.mul(h, T.as_tensor(pad3)), axis=1),
                       T.as_tensor(1.0 / counts))
    return T.weighted_sum(z_max, z_mean, lam, 1.0 - lam)


def cross_view(params: Mapping[str, Tensor], z_dem, z_lab, z_notes, a_sa):
    """Gate the decoder self-attention states by the fused view vector.

    Returns (C (B, T, d_m), gate (B, d_m), fused pre-softmax vector (B, d_m)).
    """
    fused = T.tanh(T.add(T.add(T.matmul(z_dem, params["fuse.w_dem"]),
                               T.matmul(z_lab, params["fuse.w_lab"])),
                         T.matmul(z_notes, params["fuse.w_notes"])))
    gate = T.softmax(fused, axis=-1)
    b, d = gate.shape
    gated = T.mul(a_sa, T.reshape(gate, (b, 1, d)))
    return gated, gate, fused


def decoder_forward(params: Mapping[str, Tensor], hp: HyperParams, e_shifted,
                    z_dem, z_lab, z_notes, mask: np.ndarray):
    """Causal self-attention, multi-view attention, feed-forward; all with residuals.

    ``mask`` must combine the causal triangle with any key padding; it is
    applied to both attention layers (the multi-view keys/values derive
    from decoder states, so they need the same causal protection).
    """
    e_shifted = T.as_tensor(e_shifted)
    sa_raw, attn_sa = multi_head_attention(params, "dec.sa", hp, e_shifted, e_shifted, e_shifted, mask=mask)
    a_sa = T.layer_norm(T.add(sa_raw, e_shifted), params["dec.ln_sa.gamma"], params["dec.ln_sa.beta"])

    c, gate, fused = cross_view(params, z_dem, z_lab, z_notes, a_sa)
    ca_raw, attn_ca = multi_head_attention(params, "dec.ca", hp, a_sa, c, c, mask=mask)
    a_d = T.layer_norm(T.add(ca_raw, a_sa), params["dec.ln1.gamma"], params["dec.ln1.beta"])

    h = _feed_forward(params, "dec.ff", a_d)
    h_d = T.layer_norm(T.add(h, a_d), params["dec.ln2.gamma"], params["dec.ln2.beta"])
    aux = {"attn_sa": attn_sa, "attn_ca": attn_ca, "gate": gate, "fused": fused}
    return h_d, aux


def sequence_logits(params: Mapping[str, Tensor], h_d) -> Tensor:
    """Unnormalized next-concept scores, (B, T, vocab)."""
    return T.add(T.matmul(h_d, params["out.w"]), params["out.b"])


def reconstruction_loss(logits, targets: np.ndarray, pad: np.ndarray | None = None) -> Tensor:
    """Mean negative log-probability of the target sequence.

    ``targets`` is (B, T) integer concept indices (-1 at padding); padded
    positions contribute nothing. Probabilities are floored at 1e-12
    before the log to survive float underflow.
    """
    logits = T.as_tensor(logits)
    b, t, n = logits.shape
    targets = np.asarray(targets)
    if targets.shape != (b, t):
        raise T.ShapeError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if pad is None:
        pad = np.ones((b, t), dtype=logits.data.dtype)
    onehot = np.zeros((b, t, n), dtype=logits.data.dtype)
    valid = targets >= 0
    bb, tt = np.nonzero(valid)
    onehot[bb, tt, targets[bb, tt]] = 1.0
    onehot *= pad[:, :, None]

    probs = T.softmax(logits, axis=-1)
    p_true = T.reduce_sum(T.mul(probs, T.as_tensor(onehot)), axis=-1)  # (B, T)
    logp = T.log(T.clamp_min(p_true, 1e-12))
    masked = T.mul(logp, T.as_tensor(pad.astype(logits.data.dtype)))
    count = float(pad.sum())
    if count <= 0:
        raise T.ShapeError("loss over zero unpadded positions")
    return T.scale(T.reduce_sum(masked), -1.0 / count)


# --------------------------------------------------------------------------
# Batched forward
# --------------------------------------------------------------------------


@dataclass
class SequenceBatch:
    e: dict[str, np.ndarray]   # view -> (B, T, d_k)
    targets: np.ndarray        # (B, T) int, -1 at padding
    pad: np.ndarray            # (B, T) float


def make_batch(sequences: Sequence[Sequence[int]],
               embeddings: Sequence[Mapping[str, InnerViewEmbedding]],
               variant: str = "full") -> SequenceBatch:
    """Right-pad variable-length patient sequences into one batch."""
    if len(sequences) == 0:
        raise ValueError("empty batch")
    dtype = T.default_dtype()
    lengths = [len(s) for s in sequences]
    t_max = max(lengths)
    b = len(sequences)
    views = {v: None for v in VIEWS}
    d_k = embeddings[0][VIEWS[0]].z.shape[1]
    e = {view: np.zeros((b, t_max, d_k), dtype=dtype) for view in views}
    targets = np.full((b, t_max), -1, dtype=np.int64)
    pad = np.zeros((b, t_max), dtype=dtype)
    for i, (seq, emb) in enumerate(zip(sequences, embeddings)):
        rows = view_sequences(seq, emb, variant)
        for view in VIEWS:
            e[view][i, :lengths[i]] = rows[view]
        targets[i, :lengths[i]] = seq
        pad[i, :lengths[i]] = 1.0
    return SequenceBatch(e=e, targets=targets, pad=pad)


def forward_batch(params: Mapping[str, Tensor], hp: HyperParams,
                  batch: SequenceBatch, lam: float):
    """Full autoencoder pass; returns (loss, logits, aux)."""
    t_len = batch.targets.shape[1]
    all_real = bool(np.all(batch.pad > 0))
    key_mask = None if all_real else key_padding_mask(batch.pad)
    pool_pad = None if all_real else batch.pad

    zs = {}
    for view in VIEWS:
        h = encoder_forward(params, hp, batch.e[view], key_mask=key_mask, view=view)
        zs[view] = mixed_pool(h, lam, pad=pool_pad)

    dec_mask = causal_mask(t_len)
    if key_mask is not None:
        dec_mask = dec_mask + key_mask
    e_shift = shift_right(batch.e["dem"])
    h_d, aux = decoder_forward(params, hp, e_shift, zs["dem"], zs["lab"], zs["notes"], dec_mask)
    logits = sequence_logits(params, h_d)
    loss = reconstruction_loss(logits, batch.targets, batch.pad if not all_real else None)
    aux["z"] = zs
    return loss, logits, aux


def draw_lambda(variant: str, rng: SeededRng | None = None,
                training: bool = False, lam_eval: float = 0.5) -> float:
    """Pooling weight policy per variant.

    Training under ``full``/``sin`` samples lam uniformly per batch;
    evaluation pins it to ``lam_eval``. ``mmvaa`` always uses the
    deterministic 0.5 mixture and ``vaa`` pure mean pooling (lam 0).
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if variant == "mmvaa":
        return 0.5
    if variant == "vaa":
        return 0.0
    if training:
        if rng is None:
            raise ValueError("training draws need an rng")
        return rng.uniform(0.0, 1.0)
    return float(lam_eval)


# --------------------------------------------------------------------------
# Inference helpers
# --------------------------------------------------------------------------


def _encode_views(params, hp, concepts, embeddings, lam):
    e = view_sequences(concepts, embeddings, hp.variant)
    zs = {}
    for view in VIEWS:
        h = encoder_forward(params, hp, e[view][None], view=view)
        zs[view] = mixed_pool(h, lam)
    return e, zs


def patient_representation(concepts: Sequence[int],
                           embeddings: Mapping[str, InnerViewEmbedding],
                           params: Mapping[str, Tensor], hp: HyperParams,
                           lam_eval: float = 0.5) -> dict[str, np.ndarray]:
    """Fused cross-view vector (pre-softmax) plus the dem-view mixed vector.

    Deterministic given parameters and ``lam_eval``.
    """
    if not params:
        raise ValueError("patient_representation needs trained parameters")
    with T.no_grad():
        _, zs = _encode_views(params, hp, concepts, embeddings, lam_eval)
        fused = T.tanh(T.add(T.add(T.matmul(zs["dem"], params["fuse.w_dem"]),
                                   T.matmul(zs["lab"], params["fuse.w_lab"])),
                             T.matmul(zs["notes"], params["fuse.w_notes"])))
    return {
        "fused": fused.data[0].copy(),
        "zdem": zs["dem"].data[0].copy(),
    }


def next_code_scores(concepts: Sequence[int],
                     embeddings: Mapping[str, InnerViewEmbedding],
                     params: Mapping[str, Tensor], hp: HyperParams,
                     lam_eval: float = 0.5) -> np.ndarray:
    """Distribution over the vocabulary for the concept after ``concepts``.

    The decoder consumes the whole history: its input is the shifted
    sequence extended by one slot, and the final row's softmax is
    returned.
    """
    with T.no_grad():
        e, zs = _encode_views(params, hp, concepts, embeddings, lam_eval)
        e_dem = e["dem"]
        t = e_dem.shape[0]
        dec_in = np.zeros((1, t + 1, e_dem.shape[1]), dtype=e_dem.dtype)
        dec_in[0, 1:] = e_dem
        h_d, _ = decoder_forward(params, hp, dec_in, zs["dem"], zs["lab"], zs["notes"],
                                 causal_mask(t + 1))
        logits = sequence_logits(params, h_d)
        probs = T.softmax(logits, axis=-1)
    return probs.data[0, -1].copy()
