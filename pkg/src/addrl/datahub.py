"""Dataset ingestion, splitting, negative sampling, and synthetic generation.

File formats (all UTF-8 text):

* interactions: one ``user_token<TAB>item_token`` per line.
* features (one file per modality): header ``item_token <d0>`` announcing
  the feature width, then ``item_token<TAB>f1,f2,...,fd0`` rows with
  comma-separated decimals.
* attributes: ``item_token<TAB>attr=value;attr=value;...``; the schema is
  inferred, attribute and value order is first appearance. Items missing
  an attribute get the designated ``unknown`` value.
* token->index mappings are exported as two-column TSV sidecars.

Everything loaded is immutable after construction and safe to share
read-only; the negative sampler is a pure function of (seed, user, step).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import rng_stream
from .errors import DataError

UNKNOWN_VALUE = "unknown"

INTERACTIONS_FILE = "interactions.tsv"
FEATURES_FILE = {"textual": "features_textual.tsv", "visual": "features_visual.tsv"}
ATTRIBUTES_FILE = "attributes.tsv"
SYNTHETIC_META_FILE = "synthetic_meta.json"


# ---------------------------------------------------------------------------
# core containers
# ---------------------------------------------------------------------------

@dataclass
class InteractionSet:
    """Deduplicated implicit-feedback pairs over dense 0-based id spaces."""

    user_tokens: list[str]
    item_tokens: list[str]
    pairs: np.ndarray  # (n, 2) int64, unique (user, item) rows

    @property
    def n_users(self) -> int:
        return len(self.user_tokens)

    @property
    def n_items(self) -> int:
        return len(self.item_tokens)

    @property
    def n_interactions(self) -> int:
        return len(self.pairs)

    def by_user(self) -> list[np.ndarray]:
        """Items of each user, ascending, as one array per user."""
        out: list[list[int]] = [[] for _ in range(self.n_users)]
        for u, i in self.pairs:
            out[u].append(i)
        return [np.array(sorted(items), dtype=np.int64) for items in out]


@dataclass(frozen=True)
class Attribute:
    name: str
    values: tuple[str, ...]

    @property
    def n_values(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class AttributeSchema:
    attributes: tuple[Attribute, ...]

    def __post_init__(self):
        if not self.attributes:
            raise DataError("schema needs at least one attribute")
        for attr in self.attributes:
            if attr.n_values < 1:
                raise DataError(f"attribute {attr.name!r} has no values")
            if len(set(attr.values)) != attr.n_values:
                raise DataError(f"attribute {attr.name!r} has duplicate value names")

    @property
    def n_attributes(self) -> int:
        return len(self.attributes)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(a.n_values for a in self.attributes)

    def index_of(self, name: str) -> int:
        for k, attr in enumerate(self.attributes):
            if attr.name == name:
                return k
        raise DataError(f"unknown attribute {name!r}")


@dataclass
class FeatureTable:
    modality: str
    matrix: np.ndarray  # (n_items, d0) float64

    @property
    def d0(self) -> int:
        return self.matrix.shape[1]


@dataclass
class Dataset:
    """Interactions plus the side information the model consumes."""

    interactions: InteractionSet
    features: dict[str, FeatureTable]  # keys: textual, visual
    schema: AttributeSchema
    labels: np.ndarray  # (n_items, K) int64, value index per attribute


@dataclass
class DatasetSplit:
    """Per-user train/validation/test partition of the interactions."""

    train: list[np.ndarray]
    validation: list[np.ndarray]
    test: list[np.ndarray]
    n_items: int
    _candidate_maps: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def n_users(self) -> int:
        return len(self.train)

    def train_pairs(self) -> np.ndarray:
        """All (user, item) training pairs, ordered by (user, item)."""
        rows = [(u, i) for u in range(self.n_users) for i in self.train[u]]
        return np.array(rows, dtype=np.int64).reshape(-1, 2)

    def n_candidates(self, user: int) -> int:
        return self.n_items - len(self.train[user])

    def candidate_rank_to_item(self, user: int, ranks: np.ndarray) -> np.ndarray:
        """Map ranks within the non-train complement to actual item ids."""
        train = self.train[user]
        shifted = self._candidate_maps.get(user)
        if shifted is None:
            shifted = train - np.arange(len(train))
            self._candidate_maps[user] = shifted
        return ranks + np.searchsorted(shifted, ranks, side="right")

    def candidate_mask(self, user: int) -> np.ndarray:
        mask = np.ones(self.n_items, dtype=bool)
        mask[self.train[user]] = False
        return mask


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

def load_interactions(path: str | Path) -> InteractionSet:
    """Read a TSV of user/item token pairs into dense first-appearance ids."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"interactions file not found: {path}")
    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    seen: set[tuple[int, int]] = set()
    pairs: list[tuple[int, int]] = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise DataError(f"{path}:{lineno}: expected 'user<TAB>item', got {line!r}")
            u = user_index.setdefault(parts[0], len(user_index))
            i = item_index.setdefault(parts[1], len(item_index))
            if (u, i) not in seen:
                seen.add((u, i))
                pairs.append((u, i))
    if not pairs:
        raise DataError(f"{path}: no interactions found")
    return InteractionSet(
        user_tokens=list(user_index),
        item_tokens=list(item_index),
        pairs=np.array(pairs, dtype=np.int64),
    )


def load_features(path: str | Path, modality: str, item_tokens: list[str]) -> FeatureTable:
    """Read one modality's feature file, reordered to the dataset's item ids."""
    path = Path(path)
    rows: dict[str, np.ndarray] = {}
    d0 = None
    with path.open(encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        parts = header.split()
        if len(parts) != 2 or parts[0] != "item_token":
            raise DataError(f"{path}:1: expected header 'item_token <d0>', got {header!r}")
        try:
            d0 = int(parts[1])
        except ValueError:
            raise DataError(f"{path}:1: feature width {parts[1]!r} is not an integer") from None
        if d0 < 1:
            raise DataError(f"{path}:1: feature width must be positive, got {d0}")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 2:
                raise DataError(f"{path}:{lineno}: expected 'item<TAB>f1,f2,...'")
            try:
                vec = np.array([float(x) for x in cols[1].split(",")], dtype=np.float64)
            except ValueError:
                raise DataError(f"{path}:{lineno}: unparsable feature values") from None
            if vec.size != d0:
                raise DataError(f"{path}:{lineno}: expected {d0} values, got {vec.size}")
            if not np.isfinite(vec).all():
                raise DataError(f"{path}:{lineno}: non-finite feature value")
            rows[cols[0]] = vec
    matrix = np.zeros((len(item_tokens), d0))
    for idx, token in enumerate(item_tokens):
        if token not in rows:
            raise DataError(f"{path}: no {modality} features for item {token!r}")
        matrix[idx] = rows[token]
    return FeatureTable(modality=modality, matrix=matrix)


def load_attributes(path: str | Path, item_tokens: list[str]) -> tuple[AttributeSchema, np.ndarray]:
    """Read per-item attribute assignments; infer the schema."""
    path = Path(path)
    attr_order: list[str] = []
    value_order: dict[str, list[str]] = {}
    value_index: dict[str, dict[str, int]] = {}
    per_item: dict[str, dict[str, str]] = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 2:
                raise DataError(f"{path}:{lineno}: expected 'item<TAB>attr=value;...'")
            assignments: dict[str, str] = {}
            for piece in cols[1].split(";"):
                if not piece:
                    continue
                if "=" not in piece:
                    raise DataError(f"{path}:{lineno}: bad assignment {piece!r}")
                name, value = piece.split("=", 1)
                if name not in value_order:
                    attr_order.append(name)
                    value_order[name] = []
                    value_index[name] = {}
                if value not in value_index[name]:
                    value_index[name][value] = len(value_order[name])
                    value_order[name].append(value)
                assignments[name] = value
            per_item[cols[0]] = assignments
    if not attr_order:
        raise DataError(f"{path}: no attributes found")

    labels = np.zeros((len(item_tokens), len(attr_order)), dtype=np.int64)
    for k, name in enumerate(attr_order):
        for idx, token in enumerate(item_tokens):
            value = per_item.get(token, {}).get(name)
            if value is None:
                value = UNKNOWN_VALUE
                if value not in value_index[name]:
                    value_index[name][value] = len(value_order[name])
                    value_order[name].append(value)
            labels[idx, k] = value_index[name][value]
    schema = AttributeSchema(
        tuple(Attribute(name, tuple(value_order[name])) for name in attr_order)
    )
    return schema, labels


def kcore_filter(interactions: InteractionSet, k: int) -> InteractionSet:
    """Iteratively drop users/items with fewer than k interactions, then re-index."""
    if k <= 1:
        return interactions
    pairs = interactions.pairs
    while True:
        user_counts = np.bincount(pairs[:, 0], minlength=interactions.n_users)
        item_counts = np.bincount(pairs[:, 1], minlength=interactions.n_items)
        keep = (user_counts[pairs[:, 0]] >= k) & (item_counts[pairs[:, 1]] >= k)
        if keep.all():
            break
        pairs = pairs[keep]
        if len(pairs) == 0:
            raise DataError(f"{k}-core filter removed every interaction")
    kept_users = np.unique(pairs[:, 0])
    kept_items = np.unique(pairs[:, 1])
    user_map = {old: new for new, old in enumerate(kept_users)}
    item_map = {old: new for new, old in enumerate(kept_items)}
    remapped = np.array([(user_map[u], item_map[i]) for u, i in pairs], dtype=np.int64)
    return InteractionSet(
        user_tokens=[interactions.user_tokens[u] for u in kept_users],
        item_tokens=[interactions.item_tokens[i] for i in kept_items],
        pairs=remapped,
    )


def load_dataset(data_dir: str | Path, min_interactions: int = 0) -> Dataset:
    """Load the four dataset files from a directory, optionally k-core filtered."""
    data_dir = Path(data_dir)
    interactions = load_interactions(data_dir / INTERACTIONS_FILE)
    if min_interactions > 1:
        interactions = kcore_filter(interactions, min_interactions)
    features = {
        modality: load_features(data_dir / fname, modality, interactions.item_tokens)
        for modality, fname in FEATURES_FILE.items()
    }
    schema, labels = load_attributes(data_dir / ATTRIBUTES_FILE, interactions.item_tokens)
    return Dataset(interactions=interactions, features=features, schema=schema, labels=labels)


def is_synthetic_dir(data_dir: str | Path) -> bool:
    return (Path(data_dir) / SYNTHETIC_META_FILE).exists()


# ---------------------------------------------------------------------------
# writing (round-trip of the formats above)
# ---------------------------------------------------------------------------

def write_dataset(dataset: Dataset, out_dir: str | Path, synthetic_meta: dict | None = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    inter = dataset.interactions

    with (out_dir / INTERACTIONS_FILE).open("w", encoding="utf-8") as fh:
        for u, i in inter.pairs:
            fh.write(f"{inter.user_tokens[u]}\t{inter.item_tokens[i]}\n")

    for modality, table in dataset.features.items():
        with (out_dir / FEATURES_FILE[modality]).open("w", encoding="utf-8") as fh:
            fh.write(f"item_token {table.d0}\n")
            for idx, token in enumerate(inter.item_tokens):
                values = ",".join(repr(float(v)) for v in table.matrix[idx])
                fh.write(f"{token}\t{values}\n")

    with (out_dir / ATTRIBUTES_FILE).open("w", encoding="utf-8") as fh:
        for idx, token in enumerate(inter.item_tokens):
            parts = [
                f"{attr.name}={attr.values[dataset.labels[idx, k]]}"
                for k, attr in enumerate(dataset.schema.attributes)
            ]
            fh.write(f"{token}\t{';'.join(parts)}\n")

    for name, tokens in (("users", inter.user_tokens), ("items", inter.item_tokens)):
        with (out_dir / f"{name}_index.tsv").open("w", encoding="utf-8") as fh:
            for idx, token in enumerate(tokens):
                fh.write(f"{token}\t{idx}\n")

    if synthetic_meta is not None:
        (out_dir / SYNTHETIC_META_FILE).write_text(
            json.dumps(synthetic_meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )


# ---------------------------------------------------------------------------
# discretization
# ---------------------------------------------------------------------------

def discretize_levels(values, n_levels: int) -> np.ndarray:
    """Quantile-bin scalar values into n_levels near-equal-population levels.

    Items are ordered by (value, index) and dealt into positional bins;
    equal values always share the bin of the first member of their tie
    group, so a constant column collapses to level 0. Missing values (NaN)
    get the dedicated level ``n_levels`` appended after the real bins.
    """
    if n_levels < 2:
        raise DataError(f"n_levels must be >= 2, got {n_levels}")
    values = np.asarray(values, dtype=np.float64)
    present = np.where(np.isfinite(values))[0]
    if present.size == 0:
        raise DataError("discretize_levels: all values missing")

    order = present[np.lexsort((present, values[present]))]
    m = order.size
    positional = np.minimum((np.arange(m) * n_levels) // m, n_levels - 1)

    levels = np.full(values.shape, n_levels, dtype=np.int64)
    group_level = 0
    for pos, idx in enumerate(order):
        if pos == 0 or values[idx] != values[order[pos - 1]]:
            group_level = int(positional[pos])
        levels[idx] = group_level
    return levels


def popularity_labels(interactions: InteractionSet, n_levels: int = 5) -> tuple[Attribute, np.ndarray]:
    """Discretized per-item interaction counts as an extra attribute."""
    counts = np.bincount(interactions.pairs[:, 1], minlength=interactions.n_items)
    levels = discretize_levels(counts.astype(np.float64), n_levels)
    names = tuple(f"level{j}" for j in range(n_levels)) + (UNKNOWN_VALUE,)
    used = int(levels.max()) + 1
    return Attribute("popularity", names[:max(used, n_levels)]), levels


def add_popularity_attribute(dataset: Dataset, n_levels: int = 5) -> Dataset:
    attr, levels = popularity_labels(dataset.interactions, n_levels)
    schema = AttributeSchema(dataset.schema.attributes + (attr,))
    labels = np.concatenate([dataset.labels, levels[:, None]], axis=1)
    return Dataset(dataset.interactions, dataset.features, schema, labels)


# ---------------------------------------------------------------------------
# splitting and negative sampling
# ---------------------------------------------------------------------------

def split_dataset(interactions: InteractionSet, seed: int, test_fraction: float = 0.2,
                  validation_fraction: float = 0.1) -> DatasetSplit:
    """Per-user holdout split with a global validation draw from the train pool.

    Per user, ceil(test_fraction * n) interactions go to test, but at
    least one always stays in train. Validation then takes
    floor(validation_fraction * pool) interactions from the global train
    pool at random, never emptying any user's train set.
    """
    by_user = interactions.by_user()
    train: list[list[int]] = []
    test: list[np.ndarray] = []
    for user, items in enumerate(by_user):
        if len(items) == 0:
            raise DataError(f"user index {user} has no interactions")
        n_test = min(int(np.ceil(test_fraction * len(items))), len(items) - 1)
        perm = rng_stream(seed, "split", user).permutation(len(items))
        test_idx = np.sort(perm[:n_test])
        keep = np.ones(len(items), dtype=bool)
        keep[test_idx] = False
        test.append(items[test_idx])
        train.append(list(items[keep]))

    pool = [(u, i) for u in range(len(train)) for i in train[u]]
    n_val = int(np.floor(validation_fraction * len(pool)))
    order = rng_stream(seed, "validation").permutation(len(pool))
    remaining = [len(t) for t in train]
    validation: list[list[int]] = [[] for _ in train]
    chosen: list[tuple[int, int]] = []
    for pos in order:
        if len(chosen) == n_val:
            break
        u, i = pool[pos]
        if remaining[u] <= 1:
            continue
        remaining[u] -= 1
        chosen.append((u, i))
    for u, i in chosen:
        validation[u].append(i)
        train[u].remove(i)

    return DatasetSplit(
        train=[np.array(sorted(t), dtype=np.int64) for t in train],
        validation=[np.array(sorted(v), dtype=np.int64) for v in validation],
        test=test,
        n_items=interactions.n_items,
    )


def sample_negatives(split: DatasetSplit, user: int, n_neg: int, seed: int, step: int = 0) -> np.ndarray:
    """Draw n_neg items uniformly with replacement from the user's non-train items."""
    if n_neg < 1:
        raise ValueError(f"n_neg must be >= 1, got {n_neg}")
    n_cand = split.n_candidates(user)
    if n_cand == 0:
        raise DataError(f"user {user} interacted with every item in training; cannot sample negatives")
    ranks = rng_stream(seed, "negatives", user, step).integers(0, n_cand, size=n_neg)
    return split.candidate_rank_to_item(user, ranks)


# ---------------------------------------------------------------------------
# synthetic data with planted attribute structure
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    n_users: int = 200
    n_items: int = 300
    attribute_sizes: tuple[int, ...] = (4, 3, 5)
    d0_text: int = 32
    d0_visual: int = 32
    interactions_per_user: int = 20
    noise: float = 0.1

    def meta(self) -> dict:
        return {
            "n_users": self.n_users,
            "n_items": self.n_items,
            "attribute_sizes": list(self.attribute_sizes),
            "d0_text": self.d0_text,
            "d0_visual": self.d0_visual,
            "interactions_per_user": self.interactions_per_user,
            "noise": self.noise,
        }


def gen_synthetic(spec: SyntheticSpec, seed: int) -> Dataset:
    """Generate a dataset whose interactions are driven by planted attributes.

    Items receive uniform random value labels. Each modality feature is
    the item's concatenated one-hot labels pushed through a random mixing
    matrix plus Gaussian noise. Each user prefers one value per attribute
    and interacts with distinct items sampled proportionally to the count
    of matching attribute values, so with a single attribute only matching
    items can ever be interacted with.
    """
    if spec.interactions_per_user > spec.n_items:
        raise DataError(
            f"interactions_per_user={spec.interactions_per_user} exceeds n_items={spec.n_items}"
        )
    if spec.n_users < 1 or spec.n_items < 1 or spec.interactions_per_user < 1:
        raise DataError("synthetic spec requires positive counts")
    sizes = spec.attribute_sizes
    k_attrs = len(sizes)

    labels = np.stack(
        [rng_stream(seed, "labels", k).integers(0, sizes[k], size=spec.n_items) for k in range(k_attrs)],
        axis=1,
    )

    onehot_width = int(sum(sizes))
    onehots = np.zeros((spec.n_items, onehot_width))
    offset = 0
    for k, a_k in enumerate(sizes):
        onehots[np.arange(spec.n_items), offset + labels[:, k]] = 1.0
        offset += a_k

    features: dict[str, FeatureTable] = {}
    for modality, d0 in (("textual", spec.d0_text), ("visual", spec.d0_visual)):
        mixing = rng_stream(seed, "mixing", modality).normal(size=(onehot_width, d0))
        noise = rng_stream(seed, "noise", modality).normal(size=(spec.n_items, d0))
        features[modality] = FeatureTable(modality, onehots @ mixing + spec.noise * noise)

    prefs = np.stack(
        [rng_stream(seed, "prefs", k).integers(0, sizes[k], size=spec.n_users) for k in range(k_attrs)],
        axis=1,
    )

    pairs = []
    for user in range(spec.n_users):
        weights = (labels == prefs[user][None, :]).sum(axis=1).astype(np.float64)
        eligible = int((weights > 0).sum())
        if eligible < spec.interactions_per_user:
            raise DataError(
                f"user {user}: only {eligible} items share any preferred attribute value, "
                f"need {spec.interactions_per_user}"
            )
        p = weights / weights.sum()
        items = rng_stream(seed, "interactions", user).choice(
            spec.n_items, size=spec.interactions_per_user, replace=False, p=p
        )
        pairs.extend((user, int(i)) for i in items)

    interactions = InteractionSet(
        user_tokens=[f"u{u}" for u in range(spec.n_users)],
        item_tokens=[f"i{i}" for i in range(spec.n_items)],
        pairs=np.array(pairs, dtype=np.int64),
    )
    schema = AttributeSchema(
        tuple(
            Attribute(f"attr{k}", tuple(f"v{j}" for j in range(sizes[k])))
            for k in range(k_attrs)
        )
    )
    return Dataset(interactions=interactions, features=features, schema=schema, labels=labels)
