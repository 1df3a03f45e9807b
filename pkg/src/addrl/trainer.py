"""Mini-batch Adam training with early stopping, checkpoints, and ablations.

One epoch is a pass over all training positives in shuffled order; every
positive draws fresh negatives from the per-(seed, user, step) sampler.
Validation Recall@n drives both checkpoint selection and early stopping.
Identical (dataset, configs, seed) always reproduces identical histories
and checkpoints.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import evalkit
from . import model as md
from .datahub import Dataset, DatasetSplit, sample_negatives
from .diffcore import Tape, Tensor, backward, rng_stream
from .errors import ConfigError, DataError, NumericalError
from .model import Batch, ModelConfig, ModelData, ParameterStore

CHECKPOINT_FORMAT = "ADDRL-CKPT-1"

ABLATION_VARIANTS = ("full", "w/o_disentangling", "w/o_intra", "w/o_inter", "w/o_high", "w/o_low")

HISTORY_COLUMNS = ("epoch", "loss_total", "loss_bpr", "loss_intra", "loss_inter",
                   "loss_low", "val_recall20", "val_ndcg20")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 1024
    n_neg: int = 4
    max_epochs: int = 300
    eval_every: int = 5
    patience: int = 50
    seed: int = 1
    eval_n: int = 20
    disable_intra: bool = False
    disable_inter: bool = False
    disable_high: bool = False
    disable_low: bool = False
    disable_all_disentangling: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.n_neg < 1:
            raise ConfigError(f"n_neg must be >= 1, got {self.n_neg}")
        if self.max_epochs < 0:
            raise ConfigError(f"max_epochs must be >= 0, got {self.max_epochs}")
        if self.patience < self.eval_every:
            raise ConfigError(
                f"patience ({self.patience}) must be >= eval interval ({self.eval_every})")

    def apply_ablation(self, config: ModelConfig) -> ModelConfig:
        """Zero the loss weights selected by the ablation flags."""
        alpha, beta, gamma = config.alpha, config.beta, config.gamma
        if self.disable_intra or self.disable_high or self.disable_all_disentangling:
            alpha = 0.0
        if self.disable_inter or self.disable_high or self.disable_all_disentangling:
            beta = 0.0
        if self.disable_low or self.disable_all_disentangling:
            gamma = 0.0
        return config.with_weights(alpha=alpha, beta=beta, gamma=gamma)


def variant_flags(variant: str) -> dict[str, bool]:
    """Map an ablation variant name onto TrainConfig disable flags."""
    table = {
        "full": {},
        "w/o_disentangling": {"disable_all_disentangling": True},
        "w/o_intra": {"disable_intra": True},
        "w/o_inter": {"disable_inter": True},
        "w/o_high": {"disable_high": True},
        "w/o_low": {"disable_low": True},
    }
    if variant not in table:
        raise ConfigError(f"unknown ablation variant {variant!r}; expected one of {ABLATION_VARIANTS}")
    return table[variant]


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParameterStore) -> "AdamState":
        return cls(
            m={name: np.zeros_like(t.data) for name, t in params.items()},
            v={name: np.zeros_like(t.data) for name, t in params.items()},
        )


def adam_step(params: ParameterStore, grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> AdamState:
    """One bias-corrected Adam update over every parameter, in place."""
    for name in params.names():
        g = grads[name]
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    correct1 = 1.0 - state.beta1 ** state.t
    correct2 = 1.0 - state.beta2 ** state.t
    for name, tensor in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        tensor.data -= lr * (m / correct1) / (np.sqrt(v / correct2) + state.eps)
    return state


# ---------------------------------------------------------------------------
# checkpoints and history
# ---------------------------------------------------------------------------

@dataclass
class HistoryRow:
    epoch: int
    loss_total: float
    loss_bpr: float
    loss_intra: float
    loss_inter: float
    loss_low: float
    val_recall: float | None = None
    val_ndcg: float | None = None

    def csv_cells(self) -> list[str]:
        cells = [str(self.epoch)] + [repr(v) for v in
                                     (self.loss_total, self.loss_bpr, self.loss_intra,
                                      self.loss_inter, self.loss_low)]
        cells.append("" if self.val_recall is None else repr(self.val_recall))
        cells.append("" if self.val_ndcg is None else repr(self.val_ndcg))
        return cells


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    model_config: ModelConfig
    train_config: TrainConfig
    epoch: int
    val_history: list[tuple[int, float, float]]
    rng_state: dict
    n_users: int
    n_items: int

    def best_validation(self) -> tuple[float, float]:
        for epoch, recall, ndcg in self.val_history:
            if epoch == self.epoch:
                return recall, ndcg
        raise ConfigError(f"checkpoint epoch {self.epoch} missing from validation history")

    def restore_params(self) -> ParameterStore:
        tensors = {name: Tensor(arr, requires_grad=True) for name, arr in self.arrays.items()}
        return ParameterStore(tensors, self.n_users, self.n_items)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    meta = {
        "format": CHECKPOINT_FORMAT,
        "model_config": asdict(ckpt.model_config),
        "train_config": asdict(ckpt.train_config),
        "epoch": ckpt.epoch,
        "val_history": ckpt.val_history,
        "rng_state": ckpt.rng_state,
        "n_users": ckpt.n_users,
        "n_items": ckpt.n_items,
        "tensors": {name: list(arr.shape) for name, arr in ckpt.arrays.items()},
    }
    payload = {f"param/{name}": arr for name, arr in ckpt.arrays.items()}
    payload["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as archive:
        if "__meta__" not in archive:
            raise DataError(f"{path}: not a checkpoint (missing metadata)")
        meta = json.loads(str(archive["__meta__"][()]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise DataError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
        arrays = {}
        for name, shape in meta["tensors"].items():
            key = f"param/{name}"
            if key not in archive:
                raise DataError(f"{path}: missing tensor {name!r}")
            arr = archive[key]
            if list(arr.shape) != shape:
                raise DataError(f"{path}: tensor {name!r} shape {arr.shape} != recorded {shape}")
            arrays[name] = arr.astype(np.float64, copy=True)
    return Checkpoint(
        arrays=arrays,
        model_config=ModelConfig(**meta["model_config"]),
        train_config=TrainConfig(**meta["train_config"]),
        epoch=meta["epoch"],
        val_history=[tuple(row) for row in meta["val_history"]],
        rng_state=meta["rng_state"],
        n_users=meta["n_users"],
        n_items=meta["n_items"],
    )


def write_history_csv(history: list[HistoryRow], path: str | Path, banner: str | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        if banner:
            fh.write(banner + "\n")
        fh.write(",".join(HISTORY_COLUMNS) + "\n")
        for row in history:
            fh.write(",".join(row.csv_cells()) + "\n")


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[HistoryRow]
    best_epoch: int
    stopped_early: bool
    runtime_seconds: float


def _make_batch(pairs: np.ndarray, order: np.ndarray, start: int, stop: int,
                split: DatasetSplit, n_neg: int, seed: int, step_base: int) -> Batch:
    idx = order[start:stop]
    users = pairs[idx, 0]
    pos = pairs[idx, 1]
    negatives = np.concatenate([
        sample_negatives(split, int(u), n_neg, seed, step=step_base + start + j)
        for j, u in enumerate(users)
    ])
    return Batch(users=users, pos_items=pos, neg_items=negatives, n_neg=n_neg)


def train(dataset: Dataset, split: DatasetSplit, model_config: ModelConfig,
          train_config: TrainConfig, checkpoint_path: str | Path | None = None,
          log=None) -> TrainResult:
    """Optimize the full objective; returns the best-validation checkpoint.

    Evaluates validation Recall/NDCG every ``eval_every`` epochs, keeps the
    parameters of the best Recall (ties by NDCG), saves them to
    ``checkpoint_path`` at each evaluation, and stops once ``patience``
    epochs pass without improvement.
    """
    t0 = time.perf_counter()
    cfg = train_config.apply_ablation(model_config)
    n_users = dataset.interactions.n_users
    n_items = dataset.interactions.n_items
    params = ParameterStore.initialize(cfg, dataset.schema, n_users, n_items, train_config.seed)
    data = ModelData.from_dataset(dataset)
    adam = AdamState.for_params(params)
    pairs = split.train_pairs()
    if len(pairs) == 0:
        raise DataError("empty training set")
    n_pos = len(pairs)
    seed = train_config.seed

    def validate() -> evalkit.MetricReport:
        ctx = evalkit.EvalContext.build(params, cfg, dataset, split)
        return evalkit.evaluate_ranking(ctx, "validation", n=train_config.eval_n)

    def snapshot_checkpoint(epoch, val_history, arrays) -> Checkpoint:
        return Checkpoint(
            arrays=arrays, model_config=cfg, train_config=train_config, epoch=epoch,
            val_history=list(val_history), rng_state={"seed": seed, "epoch": epoch},
            n_users=n_users, n_items=n_items,
        )

    history: list[HistoryRow] = []
    val_history: list[tuple[int, float, float]] = []
    best_metric: tuple[float, float] | None = None
    best_epoch = 0
    best_arrays = params.snapshot()
    stopped_early = False

    if train_config.max_epochs == 0:
        report = validate()
        val_history.append((0, report.recall, report.ndcg))
        ckpt = snapshot_checkpoint(0, val_history, params.snapshot())
        if checkpoint_path is not None:
            save_checkpoint(ckpt, checkpoint_path)
        return TrainResult(ckpt, history, 0, False, time.perf_counter() - t0)

    for epoch in range(1, train_config.max_epochs + 1):
        order = rng_stream(seed, "shuffle", epoch).permutation(n_pos)
        sums = {"total": 0.0, "bpr": 0.0, "intra": 0.0, "inter": 0.0, "low": 0.0}
        step_base = (epoch - 1) * n_pos
        for start in range(0, n_pos, train_config.batch_size):
            stop = min(start + train_config.batch_size, n_pos)
            batch = _make_batch(pairs, order, start, stop, split,
                                train_config.n_neg, seed, step_base)
            tape = Tape()
            loss, report = md.total_loss(params, cfg, data, batch, tape)
            if not np.isfinite(report.total):
                raise NumericalError(f"non-finite loss at epoch {epoch}")
            grads = backward(tape, loss)
            named = {name: grads[tensor] for name, tensor in params.items()}
            adam_step(params, named, adam, train_config.lr)
            sums["total"] += report.total
            sums["bpr"] += report.bpr
            sums["intra"] += report.intra
            sums["inter"] += report.inter
            sums["low"] += report.low

        row = HistoryRow(
            epoch=epoch,
            loss_total=sums["total"] / n_pos,
            loss_bpr=sums["bpr"] / n_pos,
            loss_intra=sums["intra"] / n_pos,
            loss_inter=sums["inter"] / n_pos,
            loss_low=sums["low"] / n_pos,
        )

        if epoch % train_config.eval_every == 0:
            report = validate()
            row.val_recall = report.recall
            row.val_ndcg = report.ndcg
            val_history.append((epoch, report.recall, report.ndcg))
            metric = (report.recall, report.ndcg)
            if best_metric is None or metric > best_metric:
                best_metric = metric
                best_epoch = epoch
                best_arrays = params.snapshot()
            if checkpoint_path is not None:
                save_checkpoint(snapshot_checkpoint(best_epoch, val_history, best_arrays),
                                checkpoint_path)
            if log is not None:
                log(f"epoch {epoch}: loss {row.loss_total:.4f} "
                    f"val recall@{train_config.eval_n} {report.recall:.4f} ndcg {report.ndcg:.4f}")
            history.append(row)
            if epoch - best_epoch >= train_config.patience:
                stopped_early = True
                break
        else:
            history.append(row)

    if best_metric is None:
        # no evaluation ever ran (max_epochs < eval_every): evaluate final state
        report = validate()
        best_epoch = train_config.max_epochs
        val_history.append((best_epoch, report.recall, report.ndcg))
        best_arrays = params.snapshot()

    ckpt = snapshot_checkpoint(best_epoch, val_history, best_arrays)
    if checkpoint_path is not None:
        save_checkpoint(ckpt, checkpoint_path)
    return TrainResult(ckpt, history, best_epoch, stopped_early, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# ablations and grid search
# ---------------------------------------------------------------------------

@dataclass
class AblationRow:
    variant: str
    recall: float
    ndcg: float
    best_epoch: int


def run_ablation(dataset: Dataset, split: DatasetSplit, model_config: ModelConfig,
                 train_config: TrainConfig, variant: str,
                 checkpoint_path: str | Path | None = None) -> tuple[AblationRow, TrainResult]:
    """Train one ablation variant and report its test metrics."""
    flags = variant_flags(variant)
    variant_config = replace(train_config, **flags)
    result = train(dataset, split, model_config, variant_config, checkpoint_path)
    params = result.checkpoint.restore_params()
    ctx = evalkit.EvalContext.build(params, result.checkpoint.model_config, dataset, split)
    report = evalkit.evaluate_ranking(ctx, "test", n=train_config.eval_n)
    return AblationRow(variant, report.recall, report.ndcg, result.best_epoch), result


GRID_FIELDS = ("alpha", "beta", "gamma", "l2_lambda", "tau", "n_neg", "lr")


@dataclass
class GridRow:
    settings: dict
    recall: float
    ndcg: float


def grid_search(dataset: Dataset, split: DatasetSplit, model_config: ModelConfig,
                train_config: TrainConfig, grid: dict[str, list],
                log=None) -> tuple[list[GridRow], GridRow]:
    """Train every grid combination with a shared seed; pick by validation Recall.

    Ties break by NDCG, then by the combination's position in lexicographic
    order over the sorted grid fields.
    """
    for key in grid:
        if key not in GRID_FIELDS:
            raise ConfigError(f"unknown grid field {key!r}; expected one of {GRID_FIELDS}")
        if not grid[key]:
            raise ConfigError(f"grid field {key!r} has no values")
    keys = sorted(grid)
    combos: list[dict] = [{}]
    for key in keys:
        combos = [dict(combo, **{key: value}) for combo in combos for value in grid[key]]

    rows: list[GridRow] = []
    best: tuple[tuple[float, float, int], GridRow] | None = None
    for pos, settings in enumerate(combos):
        m_kw = {k: v for k, v in settings.items() if k in ("alpha", "beta", "gamma", "l2_lambda", "tau")}
        t_kw = {k: (int(v) if k == "n_neg" else v) for k, v in settings.items() if k in ("n_neg", "lr")}
        cfg = model_config.with_weights(**m_kw) if m_kw else model_config
        tcfg = replace(train_config, **t_kw) if t_kw else train_config
        result = train(dataset, split, cfg, tcfg)
        recall, ndcg = result.checkpoint.best_validation()
        row = GridRow(settings=settings, recall=recall, ndcg=ndcg)
        rows.append(row)
        if log is not None:
            log(f"grid {settings}: recall {recall:.4f} ndcg {ndcg:.4f}")
        rank = (recall, ndcg, -pos)
        if best is None or rank > best[0]:
            best = (rank, row)
    return rows, best[1]
