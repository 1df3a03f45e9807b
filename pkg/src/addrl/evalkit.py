"""Ranking metrics, disentanglement probes, and report generation.

Everything here is read-only over a trained parameter set: results are
deterministic, and per-user work can fan out freely. Candidate sets are
always the full catalog minus the user's training items.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import model as md
from .datahub import Dataset, DatasetSplit
from .errors import DataError
from .model import ModelConfig, ModelData, ParameterStore

MODALITY_SOURCES = ("item_id", "textual", "visual")
PROBE_SOURCES = ("user_id",) + MODALITY_SOURCES


@dataclass
class RankingResult:
    user: int
    item_ids: np.ndarray   # descending score, ties by ascending item id
    scores: np.ndarray


@dataclass
class MetricReport:
    recall: float
    ndcg: float
    n: int
    users_counted: int


@dataclass
class EvalContext:
    """A parameter snapshot bound to the dataset it was trained on."""

    params: ParameterStore
    config: ModelConfig
    data: ModelData
    split: DatasetSplit
    user_tokens: list[str]
    item_tokens: list[str]
    _fused: np.ndarray | None = field(default=None, repr=False)
    _source_chunks: dict = field(default_factory=dict, repr=False)

    @classmethod
    def build(cls, params: ParameterStore, config: ModelConfig,
              dataset: Dataset, split: DatasetSplit) -> "EvalContext":
        return cls(
            params=params, config=config, data=ModelData.from_dataset(dataset),
            split=split, user_tokens=dataset.interactions.user_tokens,
            item_tokens=dataset.interactions.item_tokens,
        )

    def user_index(self, token: str) -> int:
        try:
            return self.user_tokens.index(token)
        except ValueError:
            raise DataError(f"unknown user {token!r}") from None

    def item_index(self, token: str) -> int:
        try:
            return self.item_tokens.index(token)
        except ValueError:
            raise DataError(f"unknown item {token!r}") from None


def fused_items(ctx: EvalContext) -> np.ndarray:
    """Attention-fused item representations for the whole catalog, (I, d)."""
    if ctx._fused is None:
        n_items = ctx.params.n_items
        fused = md.forward_items(ctx.params, ctx.config, ctx.data, np.arange(n_items), None)[3]
        ctx._fused = fused.full.data
    return ctx._fused


def source_chunk_matrix(ctx: EvalContext, source: str) -> np.ndarray:
    """Chunked entity representations for one source, (n_entities, C, chunk_dim)."""
    if source not in ctx._source_chunks:
        cfg = ctx.config
        if source == "user_id":
            full = ctx.params["user_emb"].data
        elif source == "item_id":
            full = ctx.params["item_emb"].data
        elif source in ("textual", "visual"):
            raw = ctx.data.text_features if source == "textual" else ctx.data.visual_features
            full = md.project_modality(ctx.params, cfg, raw, source, None).full.data
        else:
            raise ValueError(f"unknown source {source!r}")
        ctx._source_chunks[source] = full.reshape(len(full), cfg.n_chunks, cfg.chunk_dim)
    return ctx._source_chunks[source]


# ---------------------------------------------------------------------------
# scoring and ranking
# ---------------------------------------------------------------------------

def score_parts(ctx: EvalContext, user_ids) -> np.ndarray:
    """Per-chunk scores of every item for the given users, (B, I, C)."""
    user_ids = np.atleast_1d(np.asarray(user_ids, dtype=np.int64))
    cfg = ctx.config
    fused = fused_items(ctx).reshape(-1, cfg.n_chunks, cfg.chunk_dim)
    users = ctx.params["user_emb"].data[user_ids].reshape(-1, cfg.n_chunks, cfg.chunk_dim)
    parts = np.empty((len(user_ids), fused.shape[0], cfg.n_chunks))
    for k in range(cfg.n_chunks):
        parts[:, :, k] = dc.softplus_array(users[:, k, :] @ fused[:, k, :].T)
    return parts


def totals_from_parts(parts: np.ndarray, xi: float = 1.0, attribute: int | None = None) -> np.ndarray:
    """Chunk-order sum of score parts, optionally scaling one attribute by xi.

    Summation order matches the pairwise scorer, so xi = 1 reproduces the
    plain totals bitwise.
    """
    total = np.zeros(parts.shape[:-1])
    for k in range(parts.shape[-1]):
        if attribute is not None and k == attribute:
            total = total + xi * parts[..., k]
        else:
            total = total + parts[..., k]
    return total


def rank_candidates(ctx: EvalContext, user: int, totals_row: np.ndarray,
                    n: int | None = None) -> RankingResult:
    """Order the user's candidates by descending score, ties by item id."""
    mask = ctx.split.candidate_mask(user)
    candidates = np.flatnonzero(mask)
    scores = totals_row[candidates]
    order = np.lexsort((candidates, -scores))
    if n is not None:
        order = order[:n]
    return RankingResult(user=user, item_ids=candidates[order], scores=scores[order])


def rank_items(ctx: EvalContext, user: int, n: int | None = None) -> RankingResult:
    """Top-n recommendation for one user over the full candidate set."""
    if not (0 <= user < ctx.params.n_users):
        raise DataError(f"unknown user index {user}")
    if n is not None and n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    parts = score_parts(ctx, [user])[0]
    return rank_candidates(ctx, user, totals_from_parts(parts), n)


def rank_items_controllable(ctx: EvalContext, user: int, attribute: int, xi: float,
                            n: int | None = None) -> RankingResult:
    if not (0 <= attribute < ctx.config.n_attributes):
        raise IndexError(
            f"attribute {attribute} out of range for {ctx.config.n_attributes} named attributes")
    parts = score_parts(ctx, [user])[0]
    totals = totals_from_parts(parts, xi=xi, attribute=attribute)
    return rank_candidates(ctx, user, totals, n)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def recall_at_n(ranked_ids, test_items, n: int) -> float:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    test = set(int(i) for i in test_items)
    if not test:
        return 0.0
    hits = sum(1 for item in list(ranked_ids)[:n] if int(item) in test)
    return hits / len(test)


def ndcg_at_n(ranked_ids, test_items, n: int) -> float:
    """Binary-relevance NDCG with log2 discounting, ideal DCG over |test| items."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    test = set(int(i) for i in test_items)
    if not test:
        return 0.0
    dcg = 0.0
    for rank, item in enumerate(list(ranked_ids)[:n], start=1):
        if int(item) in test:
            dcg += 1.0 / math.log2(rank + 1)
    ideal = 0.0
    for rank in range(1, len(test) + 1):
        ideal += 1.0 / math.log2(rank + 1)
    return dcg / ideal


def _target_sets(split: DatasetSplit, which: str) -> list[np.ndarray]:
    if which == "validation":
        return split.validation
    if which == "test":
        return split.test
    raise ValueError(f"split must be 'validation' or 'test', got {which!r}")


def evaluate_ranking(ctx: EvalContext, which: str = "validation", n: int = 20,
                     user_batch: int = 256) -> MetricReport:
    """Mean Recall@n / NDCG@n over users with a non-empty target set."""
    targets = _target_sets(ctx.split, which)
    users = [u for u in range(ctx.params.n_users) if len(targets[u]) > 0]
    recall_sum = ndcg_sum = 0.0
    for start in range(0, len(users), user_batch):
        chunk = users[start:start + user_batch]
        parts = score_parts(ctx, chunk)
        for row, user in enumerate(chunk):
            ranked = rank_candidates(ctx, user, totals_from_parts(parts[row]), n)
            recall_sum += recall_at_n(ranked.item_ids, targets[user], n)
            ndcg_sum += ndcg_at_n(ranked.item_ids, targets[user], n)
    counted = len(users)
    if counted == 0:
        return MetricReport(0.0, 0.0, n, 0)
    return MetricReport(recall_sum / counted, ndcg_sum / counted, n, counted)


def popularity_baseline(split: DatasetSplit, which: str = "test", n: int = 20) -> MetricReport:
    """Rank by global training interaction count, ties by item id."""
    counts = np.zeros(split.n_items, dtype=np.int64)
    for items in split.train:
        counts[items] += 1
    totals = counts.astype(np.float64)
    targets = _target_sets(split, which)
    recall_sum = ndcg_sum = counted = 0
    for user in range(split.n_users):
        if len(targets[user]) == 0:
            continue
        mask = np.ones(split.n_items, dtype=bool)
        mask[split.train[user]] = False
        candidates = np.flatnonzero(mask)
        order = np.lexsort((candidates, -totals[candidates]))[:n]
        ranked = candidates[order]
        recall_sum += recall_at_n(ranked, targets[user], n)
        ndcg_sum += ndcg_at_n(ranked, targets[user], n)
        counted += 1
    if counted == 0:
        return MetricReport(0.0, 0.0, n, 0)
    return MetricReport(recall_sum / counted, ndcg_sum / counted, n, counted)


def random_baseline(split: DatasetSplit, which: str = "test", n: int = 20,
                    seed: int = 0) -> MetricReport:
    targets = _target_sets(split, which)
    recall_sum = ndcg_sum = counted = 0
    for user in range(split.n_users):
        if len(targets[user]) == 0:
            continue
        mask = np.ones(split.n_items, dtype=bool)
        mask[split.train[user]] = False
        candidates = np.flatnonzero(mask)
        ranked = dc.rng_stream(seed, "random-baseline", user).permutation(candidates)[:n]
        recall_sum += recall_at_n(ranked, targets[user], n)
        ndcg_sum += ndcg_at_n(ranked, targets[user], n)
        counted += 1
    if counted == 0:
        return MetricReport(0.0, 0.0, n, 0)
    return MetricReport(recall_sum / counted, ndcg_sum / counted, n, counted)


# ---------------------------------------------------------------------------
# disentanglement probes
# ---------------------------------------------------------------------------

@dataclass
class ChunkProbeResult:
    source: str
    accuracy: float
    per_chunk: list[float]


def chunk_probe(ctx: EvalContext, source: str, refit: bool = False) -> ChunkProbeResult:
    """Accuracy of recovering a chunk's index from its content.

    By default the trained per-source classifier is reused (measures what
    the model itself disentangled); ``refit=True`` fits a fresh linear
    probe on the frozen chunks instead.
    """
    if source not in PROBE_SOURCES:
        raise ValueError(f"source must be one of {PROBE_SOURCES}, got {source!r}")
    chunks = source_chunk_matrix(ctx, source)  # (N, C, cd)
    n_entities, n_chunks, _ = chunks.shape
    if refit:
        w, b = _refit_linear_probe(chunks)
    else:
        w = ctx.params[f"intra_{source}_w"].data
        b = ctx.params[f"intra_{source}_b"].data
    per_chunk = []
    for k in range(n_chunks):
        logits = chunks[:, k, :] @ w + b
        per_chunk.append(float(np.mean(np.argmax(logits, axis=1) == k)))
    return ChunkProbeResult(source=source, accuracy=float(np.mean(per_chunk)), per_chunk=per_chunk)


def _refit_linear_probe(chunks: np.ndarray, steps: int = 300, lr: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Fit a fresh softmax probe (full-batch gradient descent with momentum)."""
    n_entities, n_chunks, cd = chunks.shape
    x = chunks.reshape(-1, cd)
    y = np.tile(np.arange(n_chunks), n_entities)
    onehot = np.zeros((len(y), n_chunks))
    onehot[np.arange(len(y)), y] = 1.0
    w = np.zeros((cd, n_chunks))
    b = np.zeros(n_chunks)
    mw = np.zeros_like(w)
    mb = np.zeros_like(b)
    for _ in range(steps):
        p = np.exp(dc.log_softmax_array(x @ w + b))
        gw = x.T @ (p - onehot) / len(y)
        gb = (p - onehot).mean(axis=0)
        mw = 0.9 * mw + gw
        mb = 0.9 * mb + gb
        w -= lr * mw
        b -= lr * mb
    return w, b


def value_probe(ctx: EvalContext) -> dict[str, float]:
    """Per-attribute accuracy of the trained value classifiers on fused chunks."""
    cfg = ctx.config
    fused = fused_items(ctx).reshape(-1, cfg.n_chunks, cfg.chunk_dim)
    out = {}
    for k in range(cfg.n_attributes):
        w = ctx.params[f"value_clf_w{k}"].data
        b = ctx.params[f"value_clf_b{k}"].data
        logits = fused[:, k, :] @ w + b
        correct = np.argmax(logits, axis=1) == ctx.data.labels[:, k]
        out[ctx.data.schema.attributes[k].name] = float(correct.mean())
    return out


def _unit_rows(mat: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.einsum("xkd,xkd->xk", mat, mat))
    return mat / np.maximum(norms, 1e-300)[:, :, None]


def crossmodal_retrieval(ctx: EvalContext) -> dict[tuple[str, str], float]:
    """Same-index chunk retrieval accuracy for every ordered modality pair.

    Chunk k of the query modality retrieves by cosine similarity among the
    partner's chunks; it counts as correct when index k attains the
    maximum, so exact ties resolve toward the query index. Identical
    views therefore score 1.0 and an untrained model sits at 1/C.
    """
    mats = {src: _unit_rows(source_chunk_matrix(ctx, src)) for src in MODALITY_SOURCES}
    out = {}
    for a in MODALITY_SOURCES:
        for b in MODALITY_SOURCES:
            if a == b:
                continue
            sims = np.einsum("xkd,xnd->xkn", mats[a], mats[b])
            diag = np.diagonal(sims, axis1=1, axis2=2)
            rowmax = sims.max(axis=2)
            out[(a, b)] = float(np.mean(diag >= rowmax))
    return out


# ---------------------------------------------------------------------------
# interpretability and controllability
# ---------------------------------------------------------------------------

def interpretability_report(ctx: EvalContext, users, items) -> list[dict]:
    """Per-(user, item) chunk scores with each chunk's share of the total."""
    users = [int(u) for u in users]
    items = [int(i) for i in items]
    for u in users:
        if not (0 <= u < ctx.params.n_users):
            raise DataError(f"unknown user index {u}")
    for i in items:
        if not (0 <= i < ctx.params.n_items):
            raise DataError(f"unknown item index {i}")
    rows = []
    parts_all = score_parts(ctx, users)
    for row, u in enumerate(users):
        for i in items:
            parts = parts_all[row, i, :]
            total = totals_from_parts(parts)
            for k in range(ctx.config.n_chunks):
                rows.append({
                    "user_token": ctx.user_tokens[u],
                    "item_token": ctx.item_tokens[i],
                    "attr_name": ctx.config.chunk_name(k, ctx.data.schema),
                    "score": float(parts[k]),
                    "share": float(parts[k] / total),
                })
    return rows


def select_cohort(ctx: EvalContext, attribute: int, value: int, size: int) -> list[int]:
    """Users whose training items are most concentrated on one attribute value."""
    labels = ctx.data.labels[:, attribute]
    shares = []
    for user in range(ctx.params.n_users):
        train = ctx.split.train[user]
        share = float(np.mean(labels[train] == value)) if len(train) else 0.0
        shares.append((-share, user))
    shares.sort()
    return [user for _, user in shares[:size]]


def controllability_report(ctx: EvalContext, cohort, attribute: int, xis, n: int = 20) -> list[dict]:
    """Distribution of the target attribute's values in the cohort's top-n lists.

    For each xi, every cohort user's candidates are re-ranked with the
    attribute's score part scaled by xi; fractions are pooled over the
    cohort, so each xi column sums to 1.
    """
    cohort = [int(u) for u in cohort]
    if not cohort:
        raise DataError("cohort is empty")
    if not (0 <= attribute < ctx.config.n_attributes):
        raise IndexError(f"attribute {attribute} out of range")
    attr = ctx.data.schema.attributes[attribute]
    labels = ctx.data.labels[:, attribute]
    parts = score_parts(ctx, cohort)
    rows = []
    for xi in xis:
        counts = np.zeros(attr.n_values, dtype=np.int64)
        picked = 0
        for row, user in enumerate(cohort):
            totals = totals_from_parts(parts[row], xi=float(xi), attribute=attribute)
            ranked = rank_candidates(ctx, user, totals, n)
            counts += np.bincount(labels[ranked.item_ids], minlength=attr.n_values)
            picked += len(ranked.item_ids)
        for v in range(attr.n_values):
            rows.append({
                "xi": float(xi),
                "level_name": attr.values[v],
                "fraction": float(counts[v] / picked),
            })
    return rows


# ---------------------------------------------------------------------------
# embedding export
# ---------------------------------------------------------------------------

EXPORT_KINDS = ("chunks-by-source", "fused-by-attribute")


def export_embeddings(ctx: EvalContext, what: str, path: str | Path) -> int:
    """Write chunk vectors as CSV for external clustering/plotting; returns row count."""
    if what not in EXPORT_KINDS:
        raise ValueError(f"what must be one of {EXPORT_KINDS}, got {what!r}")
    cfg = ctx.config
    schema = ctx.data.schema
    path = Path(path)
    header = "entity_token,source,chunk_index,attr_name,value_name," + ",".join(
        f"f{j + 1}" for j in range(cfg.chunk_dim))
    rows_written = 0
    try:
        with path.open("w", encoding="utf-8") as fh:
            fh.write(header + "\n")

            def emit(token, source, k, value_name, vec):
                nonlocal rows_written
                attr_name = cfg.chunk_name(k, schema)
                values = ",".join(f"{x:.17g}" for x in vec)
                fh.write(f"{token},{source},{k},{attr_name},{value_name},{values}\n")
                rows_written += 1

            if what == "chunks-by-source":
                users = source_chunk_matrix(ctx, "user_id")
                for u, token in enumerate(ctx.user_tokens):
                    for k in range(cfg.n_chunks):
                        emit(token, "user_id", k, "", users[u, k])
                for source in MODALITY_SOURCES:
                    mat = source_chunk_matrix(ctx, source)
                    for i, token in enumerate(ctx.item_tokens):
                        for k in range(cfg.n_chunks):
                            value = (schema.attributes[k].values[ctx.data.labels[i, k]]
                                     if k < cfg.n_attributes else "")
                            emit(token, source, k, value, mat[i, k])
            else:
                fused = fused_items(ctx).reshape(-1, cfg.n_chunks, cfg.chunk_dim)
                for i, token in enumerate(ctx.item_tokens):
                    for k in range(cfg.n_attributes):
                        value = schema.attributes[k].values[ctx.data.labels[i, k]]
                        emit(token, "fused", k, value, fused[i, k])
    except OSError as exc:
        raise DataError(f"cannot write embeddings to {path}: {exc}") from exc
    return rows_written
