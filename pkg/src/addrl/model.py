"""Forward computation and losses of the attribute-driven recommender.

Every embedding is viewed as contiguous per-attribute chunks. Items carry
three chunked representations (ID embedding, projected text features,
projected visual features); users only an ID embedding. Four losses shape
them:

* ranking: pairwise log-sigmoid loss over positive/negative score gaps,
  with L2 on the embedding rows touched by the batch;
* intra: a per-source linear classifier must recover each chunk's index
  from its content, separating attribute factors within one
  representation;
* inter: temperature-scaled contrastive alignment of same-index chunks
  across the three item representations;
* low: per-attribute value classifiers on the attention-fused chunks.

All functions thread an optional tape; with ``tape=None`` they run the
identical arithmetic without recording, which is the evaluation path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .datahub import AttributeSchema, Dataset
from .diffcore import Tape, Tensor
from .errors import ConfigError

RESIDUAL_CHUNK_NAME = "others"
SOURCES = ("user_id", "item_id", "textual", "visual")
ITEM_SOURCES = ("item_id", "textual", "visual")
ACTIVATIONS = ("tanh", "identity")

# weight-grid ladder used by the full-scale protocol: 1e-3 .. 1e+1 in 1-5 steps
WEIGHT_LADDER = (1e-3, 5e-3, 1e-2, 5e-2, 1e-1, 5e-1, 1e0, 5e0, 1e1)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and loss hyperparameters.

    ``n_attributes`` counts the named attributes; with ``residual_chunk``
    an extra unnamed chunk joins intra classification (as its own class),
    contrastive alignment, and scoring, but not the value loss.
    """

    n_attributes: int
    d0_text: int
    d0_visual: int
    chunk_dim: int = 32
    residual_chunk: bool = True
    activation: str = "tanh"
    tau: float = 0.2
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    l2_lambda: float = 0.01
    normalize_contrastive: bool = False

    def __post_init__(self):
        if self.n_attributes < 1:
            raise ConfigError(f"n_attributes must be >= 1, got {self.n_attributes}")
        if self.chunk_dim < 1:
            raise ConfigError(f"chunk_dim must be >= 1, got {self.chunk_dim}")
        if self.tau <= 0:
            raise ConfigError(f"temperature must be positive, got {self.tau}")
        if min(self.alpha, self.beta, self.gamma, self.l2_lambda) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.d0_text < 1 or self.d0_visual < 1:
            raise ConfigError("raw feature sizes must be positive")

    @property
    def n_chunks(self) -> int:
        return self.n_attributes + (1 if self.residual_chunk else 0)

    @property
    def dim(self) -> int:
        return self.chunk_dim * self.n_chunks

    def chunk_name(self, k: int, schema: AttributeSchema | None = None) -> str:
        if k < self.n_attributes:
            return schema.attributes[k].name if schema else f"attr{k}"
        return RESIDUAL_CHUNK_NAME

    def with_weights(self, alpha=None, beta=None, gamma=None, l2_lambda=None, tau=None) -> "ModelConfig":
        from dataclasses import replace

        kwargs = {}
        if alpha is not None:
            kwargs["alpha"] = alpha
        if beta is not None:
            kwargs["beta"] = beta
        if gamma is not None:
            kwargs["gamma"] = gamma
        if l2_lambda is not None:
            kwargs["l2_lambda"] = l2_lambda
        if tau is not None:
            kwargs["tau"] = tau
        return replace(self, **kwargs)


class ParameterStore:
    """All trainable tensors under stable names, in a fixed iteration order."""

    def __init__(self, tensors: dict[str, Tensor], n_users: int, n_items: int):
        self._tensors = dict(tensors)
        self.n_users = n_users
        self.n_items = n_items

    @classmethod
    def initialize(cls, config: ModelConfig, schema: AttributeSchema,
                   n_users: int, n_items: int, seed: int) -> "ParameterStore":
        d, cd, n_chunks = config.dim, config.chunk_dim, config.n_chunks
        shapes: dict[str, tuple[int, ...]] = {
            "user_emb": (n_users, d),
            "item_emb": (n_items, d),
            "text_proj_w": (config.d0_text, d),
            "text_proj_b": (d,),
            "visual_proj_w": (config.d0_visual, d),
            "visual_proj_b": (d,),
        }
        for source in SOURCES:
            shapes[f"intra_{source}_w"] = (cd, n_chunks)
            shapes[f"intra_{source}_b"] = (n_chunks,)
        shapes["attn_w1"] = (cd, 3)
        shapes["attn_b1"] = (3,)
        shapes["attn_w2"] = (3, 3)
        for k in range(config.n_attributes):
            a_k = schema.attributes[k].n_values
            shapes[f"value_clf_w{k}"] = (cd, a_k)
            shapes[f"value_clf_b{k}"] = (a_k,)
        tensors = {
            name: dc.xavier_init(shape, dc.rng_stream(seed, "param", name).integers(0, 2**62))
            for name, shape in shapes.items()
        }
        return cls(tensors, n_users, n_items)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._tensors.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self._tensors):
            missing = set(self._tensors) ^ set(arrays)
            raise ConfigError(f"parameter name mismatch on load: {sorted(missing)}")
        for name, arr in arrays.items():
            t = self._tensors[name]
            if t.data.shape != arr.shape:
                raise ConfigError(f"shape mismatch for {name}: {t.data.shape} vs {arr.shape}")
            t.data[...] = arr

    def zero_all(self) -> None:
        for t in self._tensors.values():
            t.data[...] = 0.0


@dataclass
class ChunkedVector:
    """A (batch, d) tensor together with its ordered chunk views."""

    full: Tensor
    chunks: list[Tensor]


@dataclass
class ScoreBreakdown:
    """Per-chunk positive preference scores and their sum, shape (batch, 1)."""

    parts: list[Tensor]
    total: Tensor


@dataclass
class ModelData:
    """Constant tensors and labels shared by every batch."""

    text_features: Tensor
    visual_features: Tensor
    labels: np.ndarray  # (n_items, K)
    schema: AttributeSchema

    @classmethod
    def from_dataset(cls, dataset: Dataset) -> "ModelData":
        return cls(
            text_features=Tensor(dataset.features["textual"].matrix),
            visual_features=Tensor(dataset.features["visual"].matrix),
            labels=dataset.labels,
            schema=dataset.schema,
        )


@dataclass
class Batch:
    users: np.ndarray       # (B,)
    pos_items: np.ndarray   # (B,)
    neg_items: np.ndarray   # (B * n_neg,) grouped per positive
    n_neg: int


@dataclass
class LossReport:
    bpr: float
    intra: float
    inter: float
    low: float
    total: float


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def chunk_vector(full: Tensor, config: ModelConfig, tape: Tape | None = None) -> ChunkedVector:
    """Split the last axis into n_chunks contiguous chunk_dim slices."""
    width = full.shape[-1]
    if width != config.dim:
        raise ValueError(f"vector width {width} does not match configured dim {config.dim}")
    cd = config.chunk_dim
    chunks = [dc.slice_cols(full, k * cd, (k + 1) * cd, tape) for k in range(config.n_chunks)]
    return ChunkedVector(full=full, chunks=chunks)


def project_modality(params: ParameterStore, config: ModelConfig, raw: Tensor,
                     modality: str, tape: Tape | None = None) -> ChunkedVector:
    """Nonlinear projection of raw modality features into the chunked space."""
    prefix = {"textual": "text", "visual": "visual"}[modality]
    expected = config.d0_text if modality == "textual" else config.d0_visual
    if raw.shape[-1] != expected:
        raise ValueError(f"{modality} features have width {raw.shape[-1]}, expected {expected}")
    pre = dc.add(dc.matmul(raw, params[f"{prefix}_proj_w"], tape), params[f"{prefix}_proj_b"], tape)
    out = dc.tanh(pre, tape) if config.activation == "tanh" else pre
    return chunk_vector(out, config, tape)


def _ce_rows_const_target(logits: Tensor, target: int, tape: Tape | None) -> Tensor:
    """Per-row cross-entropy against one fixed class index, shape (B, 1)."""
    ls = dc.log_softmax_rows(logits, tape)
    return dc.scale(dc.slice_cols(ls, target, target + 1, tape), -1.0, tape)


def _ce_rows_label_target(logits: Tensor, labels: np.ndarray, tape: Tape | None) -> Tensor:
    """Per-row cross-entropy against integer labels, shape (B, 1)."""
    n_classes = logits.shape[1]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise IndexError(f"label {labels.max()} out of range for {n_classes} classes")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    ls = dc.log_softmax_rows(logits, tape)
    return dc.scale(dc.rowdot(ls, Tensor(onehot), tape), -1.0, tape)


def _sum_tensors(parts: list[Tensor], tape: Tape | None) -> Tensor:
    """Left-to-right sum; chunk-order summation keeps score identities bitwise."""
    acc = parts[0]
    for part in parts[1:]:
        acc = dc.add(acc, part, tape)
    return acc


# ---------------------------------------------------------------------------
# disentanglement losses
# ---------------------------------------------------------------------------

def intra_modality_loss(params: ParameterStore, config: ModelConfig,
                        chunked: dict[str, ChunkedVector], tape: Tape | None = None) -> Tensor:
    """Chunk-index classification loss summed over chunks and sources.

    With uniform logits each chunk contributes ln(n_chunks) per row, so a
    batch row's total is 4 * n_chunks * ln(n_chunks).
    """
    rows = []
    for source, vec in chunked.items():
        w, b = params[f"intra_{source}_w"], params[f"intra_{source}_b"]
        for k, chunk in enumerate(vec.chunks):
            logits = dc.add(dc.matmul(chunk, w, tape), b, tape)
            rows.append(_ce_rows_const_target(logits, k, tape))
    return dc.sum_all(_sum_tensors(rows, tape), tape)


def _maybe_normalize(chunk: Tensor, tape: Tape | None) -> Tensor:
    norm_sq = dc.rowdot(chunk, chunk, tape)
    inv = dc.rsqrt(dc.add(norm_sq, Tensor(np.full(norm_sq.shape, 1e-12)), tape), tape)
    return dc.rowscale(chunk, inv, tape)


def inter_modality_loss(config: ModelConfig, item_id: ChunkedVector, textual: ChunkedVector,
                        visual: ChunkedVector, tape: Tape | None = None) -> Tensor:
    """Cross-representation contrastive loss over all three pairs.

    For each pair and chunk index k, the positive is the same-index chunk
    of the partner and the negatives are its other chunks; both directions
    are summed. Similarities are raw dot products divided by tau
    (optionally on L2-normalized chunks).
    """
    if config.tau <= 0:
        raise ConfigError(f"temperature must be positive, got {config.tau}")
    views = {"item_id": item_id.chunks, "textual": textual.chunks, "visual": visual.chunks}
    if config.normalize_contrastive:
        views = {name: [_maybe_normalize(c, tape) for c in chunks] for name, chunks in views.items()}
    n_chunks = config.n_chunks
    inv_tau = 1.0 / config.tau

    rows = []
    for name_a, name_b in (("item_id", "textual"), ("item_id", "visual"), ("textual", "visual")):
        a, b = views[name_a], views[name_b]
        sims = [[dc.scale(dc.rowdot(a[k], b[n], tape), inv_tau, tape) for n in range(n_chunks)]
                for k in range(n_chunks)]
        for k in range(n_chunks):
            logits_ab = dc.concat([sims[k][n] for n in range(n_chunks)], tape)
            rows.append(_ce_rows_const_target(logits_ab, k, tape))
            logits_ba = dc.concat([sims[n][k] for n in range(n_chunks)], tape)
            rows.append(_ce_rows_const_target(logits_ba, k, tape))
    return dc.sum_all(_sum_tensors(rows, tape), tape)


def attention_fuse(params: ParameterStore, config: ModelConfig, item_id: ChunkedVector,
                   textual: ChunkedVector, visual: ChunkedVector,
                   tape: Tape | None = None) -> tuple[list[Tensor], ChunkedVector]:
    """Per-chunk softmax attention over the three item representations.

    Returns the (B, 3) weight tensor per chunk and the fused chunked
    vector; the fusion is a convex combination, so three equal chunks
    fuse to themselves for any parameters.
    """
    weights_per_chunk: list[Tensor] = []
    fused_chunks: list[Tensor] = []
    for k in range(config.n_chunks):
        trio = (item_id.chunks[k], textual.chunks[k], visual.chunks[k])
        summed = dc.add(dc.add(trio[0], trio[1], tape), trio[2], tape)
        hidden = dc.tanh(dc.add(dc.matmul(summed, params["attn_w1"], tape), params["attn_b1"], tape), tape)
        logits = dc.matmul(hidden, params["attn_w2"], tape)
        weights = dc.softmax_rows(logits, tape)
        weights_per_chunk.append(weights)
        scaled = [
            dc.rowscale(chunk, dc.slice_cols(weights, j, j + 1, tape), tape)
            for j, chunk in enumerate(trio)
        ]
        fused_chunks.append(_sum_tensors(scaled, tape))
    full = dc.concat(fused_chunks, tape)
    return weights_per_chunk, ChunkedVector(full=full, chunks=fused_chunks)


def low_level_loss(params: ParameterStore, config: ModelConfig, fused: ChunkedVector,
                   item_labels: np.ndarray, tape: Tape | None = None) -> Tensor:
    """Attribute-value classification loss on fused chunks, summed over attributes.

    The residual chunk has no values and is excluded. A single-value
    attribute contributes exactly zero.
    """
    rows = []
    for k in range(config.n_attributes):
        w, b = params[f"value_clf_w{k}"], params[f"value_clf_b{k}"]
        logits = dc.add(dc.matmul(fused.chunks[k], w, tape), b, tape)
        rows.append(_ce_rows_label_target(logits, item_labels[:, k], tape))
    return dc.sum_all(_sum_tensors(rows, tape), tape)


# ---------------------------------------------------------------------------
# scoring and ranking losses
# ---------------------------------------------------------------------------

def score_pair(config: ModelConfig, user: ChunkedVector, item: ChunkedVector,
               tape: Tape | None = None) -> ScoreBreakdown:
    """Softplus of per-chunk dot products; the total is their chunk-order sum."""
    parts = [
        dc.softplus(dc.rowdot(u_k, i_k, tape), tape)
        for u_k, i_k in zip(user.chunks, item.chunks)
    ]
    return ScoreBreakdown(parts=parts, total=_sum_tensors(parts, tape))


def bpr_loss(pos_total: Tensor, neg_total: Tensor, n_neg: int, l2_lambda: float,
             embedding_rows: list[Tensor], tape: Tape | None = None) -> Tensor:
    """Pairwise ranking loss with one triplet per negative, plus row L2.

    ``neg_total`` holds n_neg consecutive rows per positive. The
    regularizer is the squared norm of the gathered user/positive/negative
    embedding rows, added once per batch.
    """
    if n_neg < 1 or neg_total.shape[0] != pos_total.shape[0] * n_neg:
        raise ValueError(
            f"negative scores {neg_total.shape} do not match {pos_total.shape} positives x {n_neg}"
        )
    repeat_idx = np.repeat(np.arange(pos_total.shape[0]), n_neg)
    pos_expanded = dc.gather_rows(pos_total, repeat_idx, tape)
    gap = dc.add(pos_expanded, dc.scale(neg_total, -1.0, tape), tape)
    loss = dc.scale(dc.sum_all(dc.log_sigmoid(gap, tape), tape), -1.0, tape)
    if l2_lambda > 0:
        for rows in embedding_rows:
            penalty = dc.scale(dc.sum_all(dc.rowdot(rows, rows, tape), tape), l2_lambda, tape)
            loss = dc.add(loss, penalty, tape)
    return loss


def controllable_score(parts, attribute: int, xi: float, n_attributes: int) -> float:
    """Total score with one attribute's part scaled by xi.

    Summation follows chunk order, so xi = 1 reproduces the plain total
    bitwise. The residual chunk is not addressable.
    """
    if not (0 <= attribute < n_attributes):
        raise IndexError(f"attribute {attribute} out of range for {n_attributes} named attributes")
    values = [float(p.item()) if isinstance(p, Tensor) else float(p) for p in parts]
    total = 0.0
    for k, value in enumerate(values):
        total += xi * value if k == attribute else value
    return total


# ---------------------------------------------------------------------------
# full objective
# ---------------------------------------------------------------------------

def forward_items(params: ParameterStore, config: ModelConfig, data: ModelData,
                  item_idx: np.ndarray, tape: Tape | None = None
                  ) -> tuple[ChunkedVector, ChunkedVector, ChunkedVector, ChunkedVector, Tensor]:
    """Chunked ID/text/visual views plus the fused representation for given items.

    Returns (id_chunks, text_chunks, visual_chunks, fused, id_rows).
    """
    id_rows = dc.gather_rows(params["item_emb"], item_idx, tape)
    id_c = chunk_vector(id_rows, config, tape)
    text_c = project_modality(params, config, dc.gather_rows(data.text_features, item_idx, tape),
                              "textual", tape)
    visual_c = project_modality(params, config, dc.gather_rows(data.visual_features, item_idx, tape),
                                "visual", tape)
    _, fused = attention_fuse(params, config, id_c, text_c, visual_c, tape)
    return id_c, text_c, visual_c, fused, id_rows


@dataclass
class _BatchForward:
    user_c: ChunkedVector
    pos_id_c: ChunkedVector
    pos_text_c: ChunkedVector
    pos_visual_c: ChunkedVector
    pos_fused: ChunkedVector
    bpr: Tensor


def _batch_forward(params: ParameterStore, config: ModelConfig, data: ModelData,
                   batch: Batch, tape: Tape | None) -> _BatchForward:
    user_rows = dc.gather_rows(params["user_emb"], batch.users, tape)
    user_c = chunk_vector(user_rows, config, tape)
    pos_id_c, pos_text_c, pos_visual_c, pos_fused, pos_rows = forward_items(
        params, config, data, batch.pos_items, tape)
    neg_fused, neg_id_rows = forward_items(params, config, data, batch.neg_items, tape)[3:]
    neg_rows_idx = np.repeat(np.arange(len(batch.users)), batch.n_neg)
    user_expanded_c = chunk_vector(dc.gather_rows(user_rows, neg_rows_idx, tape), config, tape)

    pos_scores = score_pair(config, user_c, pos_fused, tape)
    neg_scores = score_pair(config, user_expanded_c, neg_fused, tape)
    bpr = bpr_loss(pos_scores.total, neg_scores.total, batch.n_neg, config.l2_lambda,
                   [user_rows, pos_rows, neg_id_rows], tape)
    return _BatchForward(user_c, pos_id_c, pos_text_c, pos_visual_c, pos_fused, bpr)


def total_loss(params: ParameterStore, config: ModelConfig, data: ModelData,
               batch: Batch, tape: Tape | None = None) -> tuple[Tensor, LossReport]:
    """Weighted objective over one batch of (user, positive, negatives) triplets.

    Components with zero weight are skipped entirely (and reported as 0),
    so ablation by weight zeroing is exactly component removal. With all
    three weights zero the returned scalar is the ranking loss bitwise.
    """
    fwd = _batch_forward(params, config, data, batch, tape)
    loss = fwd.bpr
    intra_value = inter_value = low_value = 0.0
    if config.alpha > 0:
        intra = intra_modality_loss(
            params, config,
            {"user_id": fwd.user_c, "item_id": fwd.pos_id_c,
             "textual": fwd.pos_text_c, "visual": fwd.pos_visual_c},
            tape,
        )
        intra_value = intra.item()
        loss = dc.add(loss, dc.scale(intra, config.alpha, tape), tape)
    if config.beta > 0:
        inter = inter_modality_loss(config, fwd.pos_id_c, fwd.pos_text_c, fwd.pos_visual_c, tape)
        inter_value = inter.item()
        loss = dc.add(loss, dc.scale(inter, config.beta, tape), tape)
    if config.gamma > 0:
        low = low_level_loss(params, config, fwd.pos_fused, data.labels[batch.pos_items], tape)
        low_value = low.item()
        loss = dc.add(loss, dc.scale(low, config.gamma, tape), tape)

    report = LossReport(bpr=fwd.bpr.item(), intra=intra_value, inter=inter_value,
                        low=low_value, total=loss.item())
    return loss, report


def batch_losses(params: ParameterStore, config: ModelConfig, data: ModelData,
                 batch: Batch, tape: Tape | None = None) -> dict[str, Tensor]:
    """All four component losses plus the weighted total, computed unconditionally.

    Verification path for gradient checks; training uses ``total_loss``.
    """
    fwd = _batch_forward(params, config, data, batch, tape)
    intra = intra_modality_loss(
        params, config,
        {"user_id": fwd.user_c, "item_id": fwd.pos_id_c,
         "textual": fwd.pos_text_c, "visual": fwd.pos_visual_c},
        tape,
    )
    inter = inter_modality_loss(config, fwd.pos_id_c, fwd.pos_text_c, fwd.pos_visual_c, tape)
    low = low_level_loss(params, config, fwd.pos_fused, data.labels[batch.pos_items], tape)
    total = fwd.bpr
    for weight, term in ((config.alpha, intra), (config.beta, inter), (config.gamma, low)):
        total = dc.add(total, dc.scale(term, weight, tape), tape)
    return {"bpr": fwd.bpr, "intra": intra, "inter": inter, "low": low, "total": total}
