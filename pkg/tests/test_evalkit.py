import csv
import itertools
import math

import numpy as np
import pytest

from addrl import evalkit as ek
from addrl import model as md
from addrl.errors import DataError
from conftest import make_setup


def make_ctx(**kw):
    setup = make_setup(**kw)
    return ek.EvalContext.build(setup.params, setup.config, setup.dataset, setup.split), setup


# ---------------------------------------------------------------------------
# metrics vs brute-force oracle
# ---------------------------------------------------------------------------

def oracle_recall(ranking, test_items, n):
    hits = 0
    for item in test_items:
        pos = ranking.index(item)
        if pos < n:
            hits += 1
    return hits / len(test_items)


def oracle_ndcg(ranking, test_items, n):
    ranks = sorted(ranking.index(item) + 1 for item in test_items if ranking.index(item) < n)
    dcg = 0.0
    for r in ranks:
        dcg += 1.0 / math.log2(r + 1)
    ideal = 0.0
    for r in range(1, len(test_items) + 1):
        ideal += 1.0 / math.log2(r + 1)
    return dcg / ideal


def test_metrics_match_oracle_small_enumeration():
    # the full <=6-item enumeration runs in the acceptance suite
    for m in range(1, 5):
        items = list(range(m))
        for ranking in itertools.permutations(items):
            for size in range(1, min(3, m) + 1):
                for test_items in itertools.combinations(items, size):
                    for n in (1, 2, 3, 20):
                        got_r = ek.recall_at_n(ranking, test_items, n)
                        got_n = ek.ndcg_at_n(ranking, test_items, n)
                        assert got_r == oracle_recall(list(ranking), list(test_items), n)
                        assert got_n == oracle_ndcg(list(ranking), list(test_items), n)


def test_ndcg_spot_values():
    assert ek.ndcg_at_n([7, 3, 5], [7], 20) == 1.0
    assert ek.recall_at_n([7, 3, 5], [7], 20) == 1.0
    assert abs(ek.ndcg_at_n([3, 7, 5], [7], 20) - 1.0 / math.log2(3)) < 1e-12
    assert abs(1.0 / math.log2(3) - 0.63093) < 1e-5
    assert ek.ndcg_at_n([3, 5, 9], [7], 2) == 0.0
    assert ek.recall_at_n([3, 5, 9], [7], 2) == 0.0


def test_recall_denominator_is_test_size():
    assert ek.recall_at_n([1, 2], [1, 2, 3], 2) == 2 / 3


# ---------------------------------------------------------------------------
# ranking
# ---------------------------------------------------------------------------

def test_rank_candidates_fixed_scores():
    ctx, _ = make_ctx(n_items=14)
    totals = np.zeros(14)
    totals[[4, 9, 2]] = [3.0, 2.0, 1.0]
    mask_free_user = 0
    ranked = ek.rank_candidates(ctx, mask_free_user, totals, n=3)
    candidates = set(np.flatnonzero(ctx.split.candidate_mask(mask_free_user)))
    expected = [i for i in (4, 9, 2) if i in candidates]
    assert ranked.item_ids[:len(expected)].tolist() == expected


def test_rank_excludes_train_items():
    ctx, setup = make_ctx()
    for user in range(setup.params.n_users):
        ranked = ek.rank_items(ctx, user)
        assert not set(ranked.item_ids.tolist()) & set(setup.split.train[user].tolist())
        assert len(ranked.item_ids) == setup.split.n_candidates(user)


def test_rank_ties_break_by_item_index():
    ctx, _ = make_ctx()
    totals = np.ones(14)
    ranked = ek.rank_candidates(ctx, 0, totals)
    assert ranked.item_ids.tolist() == sorted(ranked.item_ids.tolist())


def test_rank_matches_bruteforce_full_ranking():
    ctx, setup = make_ctx(n_users=4, n_items=10, interactions_per_user=3)
    for user in range(4):
        parts = ek.score_parts(ctx, [user])[0]
        totals = ek.totals_from_parts(parts)
        candidates = np.flatnonzero(ctx.split.candidate_mask(user))
        brute = sorted(candidates.tolist(), key=lambda i: (-totals[i], i))
        full = ek.rank_items(ctx, user)
        assert full.item_ids.tolist() == brute
        for n in (1, 2, 5):
            top = ek.rank_items(ctx, user, n)
            assert top.item_ids.tolist() == brute[:n]


def test_rank_unknown_user():
    ctx, _ = make_ctx()
    with pytest.raises(DataError):
        ek.rank_items(ctx, 99)


def test_ranking_invariant_under_increasing_transform():
    ctx, _ = make_ctx()
    parts = ek.score_parts(ctx, [1])[0]
    totals = ek.totals_from_parts(parts)
    base = ek.rank_candidates(ctx, 1, totals).item_ids.tolist()
    for transform in (lambda x: 2 * x + 1, np.exp, lambda x: x ** 3):
        again = ek.rank_candidates(ctx, 1, transform(totals)).item_ids.tolist()
        assert again == base


def test_evaluate_ranking_counts_only_nonempty(small_setup):
    ctx = ek.EvalContext.build(small_setup.params, small_setup.config,
                               small_setup.dataset, small_setup.split)
    report = ek.evaluate_ranking(ctx, "test", n=3)
    nonempty = sum(1 for t in small_setup.split.test if len(t) > 0)
    assert report.users_counted == nonempty


def test_baselines_are_sane():
    ctx, setup = make_ctx(n_users=8, n_items=20, interactions_per_user=6)
    pop = ek.popularity_baseline(setup.split, "test", n=5)
    rnd = ek.random_baseline(setup.split, "test", n=5, seed=1)
    assert 0.0 <= pop.recall <= 1.0 and 0.0 <= rnd.recall <= 1.0
    assert pop.users_counted == rnd.users_counted


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------

def test_chunk_probe_chance_level_untrained():
    ctx, setup = make_ctx(n_users=30, n_items=400, sizes=(3, 3, 2, 2), chunk_dim=6,
                          interactions_per_user=5, d0=8)
    c = setup.config.n_chunks  # 5 with residual
    probe = ctx_probe = ek.chunk_probe(ctx, "item_id")
    assert abs(probe.accuracy - 1.0 / c) < 0.05
    assert len(probe.per_chunk) == c


def test_chunk_probe_single_chunk_is_perfect():
    ctx, _ = make_ctx(sizes=(2,), residual=False)
    for source in ek.PROBE_SOURCES:
        assert ek.chunk_probe(ctx, source).accuracy == 1.0


def test_chunk_probe_refit_beats_chance():
    ctx, setup = make_ctx(n_users=30, n_items=120, interactions_per_user=5)
    refit = ek.chunk_probe(ctx, "textual", refit=True)
    frozen = ek.chunk_probe(ctx, "textual", refit=False)
    assert refit.accuracy >= frozen.accuracy - 0.05


def test_chunk_probe_unknown_source():
    ctx, _ = make_ctx()
    with pytest.raises(ValueError):
        ek.chunk_probe(ctx, "audio")


def test_value_probe_chance_level_untrained():
    # noise-dominated features keep fused chunks independent of the labels,
    # which is what makes an untrained model sit at chance
    ctx, setup = make_ctx(n_users=20, n_items=1000, sizes=(5,), chunk_dim=6,
                          interactions_per_user=5, d0=8, noise=30.0)
    acc = ek.value_probe(ctx)["attr0"]
    assert abs(acc - 0.2) < 0.05


def test_value_probe_single_value_attribute():
    ctx, _ = make_ctx(sizes=(1, 3))
    assert ek.value_probe(ctx)["attr0"] == 1.0


def test_crossmodal_identical_views_perfect():
    ctx, setup = make_ctx()
    # force text/visual chunk matrices identical to the item embedding chunks
    chunks = ek.source_chunk_matrix(ctx, "item_id")
    ctx._source_chunks["textual"] = chunks
    ctx._source_chunks["visual"] = chunks
    acc = ek.crossmodal_retrieval(ctx)
    for pair in ((("item_id", "textual")), ("textual", "item_id")):
        assert acc[pair] == 1.0


def test_crossmodal_chance_level_untrained():
    ctx, setup = make_ctx(n_users=20, n_items=500, sizes=(3, 3, 2, 2), chunk_dim=6,
                          interactions_per_user=5, d0=8, noise=30.0)
    acc = ek.crossmodal_retrieval(ctx)
    c = setup.config.n_chunks
    for pair, value in acc.items():
        assert abs(value - 1.0 / c) < 0.06, (pair, value)


# ---------------------------------------------------------------------------
# interpretability / controllability
# ---------------------------------------------------------------------------

def test_interpretability_shares(small_setup):
    ctx = ek.EvalContext.build(small_setup.params, small_setup.config,
                               small_setup.dataset, small_setup.split)
    rows = ek.interpretability_report(ctx, [0, 1], [2, 3, 4])
    c = small_setup.config.n_chunks
    assert len(rows) == 2 * 3 * c
    by_pair = {}
    for row in rows:
        by_pair.setdefault((row["user_token"], row["item_token"]), []).append(row["share"])
        assert row["score"] > 0
    for shares in by_pair.values():
        assert abs(sum(shares) - 1.0) < 1e-12


def test_interpretability_zero_embeddings_equal_shares(small_setup):
    small_setup.params.zero_all()
    ctx = ek.EvalContext.build(small_setup.params, small_setup.config,
                               small_setup.dataset, small_setup.split)
    rows = ek.interpretability_report(ctx, [0], [0])
    c = small_setup.config.n_chunks
    for row in rows:
        assert abs(row["share"] - 1.0 / c) < 1e-12


def test_interpretability_unknown_ids(small_setup):
    ctx = ek.EvalContext.build(small_setup.params, small_setup.config,
                               small_setup.dataset, small_setup.split)
    with pytest.raises(DataError):
        ek.interpretability_report(ctx, [99], [0])


def test_cohort_selection_prefers_concentrated_users():
    ctx, setup = make_ctx(n_users=10, n_items=30, interactions_per_user=5)
    cohort = ek.select_cohort(ctx, attribute=0, value=0, size=4)
    labels = setup.data.labels[:, 0]
    shares = [float(np.mean(labels[setup.split.train[u]] == 0)) for u in range(10)]
    picked = [shares[u] for u in cohort]
    rest = [shares[u] for u in range(10) if u not in cohort]
    assert min(picked) >= max(rest) - 1e-12


def test_controllability_report_xi_one_matches_base(small_setup):
    ctx = ek.EvalContext.build(small_setup.params, small_setup.config,
                               small_setup.dataset, small_setup.split)
    cohort = [0, 1, 2]
    rows = ek.controllability_report(ctx, cohort, attribute=0, xis=[1.0], n=4)
    # recompute the base distribution with plain ranking
    attr = small_setup.data.schema.attributes[0]
    labels = small_setup.data.labels[:, 0]
    counts = np.zeros(attr.n_values, dtype=np.int64)
    picked = 0
    for user in cohort:
        ranked = ek.rank_items(ctx, user, 4)
        counts += np.bincount(labels[ranked.item_ids], minlength=attr.n_values)
        picked += len(ranked.item_ids)
    for row in rows:
        v = attr.values.index(row["level_name"])
        assert row["fraction"] == counts[v] / picked


def test_controllability_fractions_sum_to_one(small_setup):
    ctx = ek.EvalContext.build(small_setup.params, small_setup.config,
                               small_setup.dataset, small_setup.split)
    rows = ek.controllability_report(ctx, [0, 1], attribute=1, xis=[-1.0, 0.0, 1.0, 2.0], n=5)
    by_xi = {}
    for row in rows:
        by_xi.setdefault(row["xi"], 0.0)
        by_xi[row["xi"]] += row["fraction"]
    for total in by_xi.values():
        assert abs(total - 1.0) < 1e-12


def test_xi_monotone_pairwise_gap():
    # if item i has the larger attribute part, the gap total(j) - total(i)
    # can only shrink as xi grows
    rng = np.random.Generator(np.random.Philox(key=8))
    parts = rng.uniform(0.1, 2.0, size=(2, 4))
    attribute = 1
    if parts[0, attribute] <= parts[1, attribute]:
        parts = parts[::-1]
    xis = (-1.0, 0.0, 0.5, 1.0, 2.0)
    gaps = []
    for xi in xis:
        t_i = ek.totals_from_parts(parts[0], xi=xi, attribute=attribute)
        t_j = ek.totals_from_parts(parts[1], xi=xi, attribute=attribute)
        gaps.append(t_j - t_i)
    assert all(a >= b for a, b in zip(gaps, gaps[1:]))


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def test_export_fused_row_count(tmp_path, small_setup):
    ctx = ek.EvalContext.build(small_setup.params, small_setup.config,
                               small_setup.dataset, small_setup.split)
    path = tmp_path / "fused.csv"
    n = ek.export_embeddings(ctx, "fused-by-attribute", path)
    k = small_setup.config.n_attributes
    assert n == small_setup.params.n_items * k
    with path.open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == n
    assert all(r["source"] == "fused" for r in rows)


def test_export_chunks_roundtrip_and_residual_label(tmp_path, small_setup):
    ctx = ek.EvalContext.build(small_setup.params, small_setup.config,
                               small_setup.dataset, small_setup.split)
    path = tmp_path / "chunks.csv"
    n = ek.export_embeddings(ctx, "chunks-by-source", path)
    cfg = small_setup.config
    expected = (small_setup.params.n_users + 3 * small_setup.params.n_items) * cfg.n_chunks
    assert n == expected
    with path.open() as fh:
        rows = list(csv.DictReader(fh))
    residual = [r for r in rows if r["attr_name"] == md.RESIDUAL_CHUNK_NAME]
    assert residual

    users = ek.source_chunk_matrix(ctx, "user_id")
    checked = 0
    for row in rows:
        if row["source"] != "user_id":
            continue
        u = int(row["entity_token"][1:])
        k = int(row["chunk_index"])
        vec = np.array([float(row[f"f{j + 1}"]) for j in range(cfg.chunk_dim)])
        assert np.abs(vec - users[u, k]).max() < 1e-12
        checked += 1
    assert checked == small_setup.params.n_users * cfg.n_chunks


def test_export_rejects_unknown_kind(tmp_path, small_setup):
    ctx = ek.EvalContext.build(small_setup.params, small_setup.config,
                               small_setup.dataset, small_setup.split)
    with pytest.raises(ValueError):
        ek.export_embeddings(ctx, "everything", tmp_path / "x.csv")
