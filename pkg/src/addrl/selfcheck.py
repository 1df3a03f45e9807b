"""Built-in toy problem and full-model gradient verification.

``gradcheck_report`` compares tape gradients of the ranking loss, the
three disentanglement losses, and the weighted total against central
finite differences over every parameter entry. One tape-free forward per
perturbation evaluates all five losses at once, which keeps the sweep
fast enough for routine use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import datahub as dh
from . import diffcore as dc
from . import model as md
from .errors import NumericalError

LOSS_NAMES = ("bpr", "intra", "inter", "low", "total")


@dataclass
class ToyProblem:
    params: md.ParameterStore
    config: md.ModelConfig
    data: md.ModelData
    batch: md.Batch
    dataset: dh.Dataset
    split: dh.DatasetSplit


def toy_problem(seed: int = 1) -> ToyProblem:
    """A 4-user / 6-item model small enough for exhaustive finite differences."""
    spec = dh.SyntheticSpec(
        n_users=4, n_items=6, attribute_sizes=(2, 3, 2),
        d0_text=8, d0_visual=8, interactions_per_user=3, noise=0.1,
    )
    dataset = dh.gen_synthetic(spec, seed)
    split = dh.split_dataset(dataset.interactions, seed, validation_fraction=0.0)
    config = md.ModelConfig(
        n_attributes=3, d0_text=8, d0_visual=8, chunk_dim=4, residual_chunk=True,
        tau=0.2, alpha=0.5, beta=0.5, gamma=0.5, l2_lambda=0.01,
    )
    params = md.ParameterStore.initialize(config, dataset.schema, 4, 6, seed)
    data = md.ModelData.from_dataset(dataset)

    n_neg = 2
    pairs = split.train_pairs()[:8]
    negatives = np.concatenate([
        dh.sample_negatives(split, int(u), n_neg, seed, step=pos)
        for pos, (u, _) in enumerate(pairs)
    ])
    batch = md.Batch(users=pairs[:, 0], pos_items=pairs[:, 1], neg_items=negatives, n_neg=n_neg)
    return ToyProblem(params, config, data, batch, dataset, split)


def gradcheck_report(seed: int = 1, eps: float = 1e-5,
                     problem: ToyProblem | None = None) -> dict[str, float]:
    """Max relative gradient error per loss over every parameter tensor."""
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps must be in [1e-7, 1e-3], got {eps}")
    toy = problem if problem is not None else toy_problem(seed)
    params, config, data, batch = toy.params, toy.config, toy.data, toy.batch

    ad_grads: dict[str, dc.Gradients] = {}
    for name in LOSS_NAMES:
        tape = dc.Tape()
        losses = md.batch_losses(params, config, data, batch, tape)
        ad_grads[name] = dc.backward(tape, losses[name])

    def values() -> dict[str, float]:
        losses = md.batch_losses(params, config, data, batch, None)
        return {name: losses[name].item() for name in LOSS_NAMES}

    worst = {name: 0.0 for name in LOSS_NAMES}
    for pname, tensor in params.items():
        buf = tensor.data.reshape(-1)
        for j in range(buf.size):
            orig = buf[j]
            buf[j] = orig + eps
            hi = values()
            buf[j] = orig - eps
            lo = values()
            buf[j] = orig
            for name in LOSS_NAMES:
                if not (np.isfinite(hi[name]) and np.isfinite(lo[name])):
                    raise NumericalError(f"non-finite {name} loss perturbing {pname}[{j}]")
                g_fd = (hi[name] - lo[name]) / (2.0 * eps)
                g_ad = ad_grads[name][tensor].reshape(-1)[j]
                err = abs(g_ad - g_fd) / max(1.0, abs(g_ad), abs(g_fd))
                if err > worst[name]:
                    worst[name] = err
    return worst
