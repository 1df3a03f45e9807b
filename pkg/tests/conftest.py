from dataclasses import dataclass

import numpy as np
import pytest

from addrl import datahub as dh
from addrl import model as md


@dataclass
class Setup:
    params: md.ParameterStore
    config: md.ModelConfig
    data: md.ModelData
    dataset: dh.Dataset
    split: dh.DatasetSplit

    def batch(self, n_pairs=6, n_neg=2, seed=3):
        pairs = self.split.train_pairs()[:n_pairs]
        negatives = np.concatenate([
            dh.sample_negatives(self.split, int(u), n_neg, seed, step=pos)
            for pos, (u, _) in enumerate(pairs)
        ])
        return md.Batch(users=pairs[:, 0], pos_items=pairs[:, 1],
                        neg_items=negatives, n_neg=n_neg)


def make_setup(seed=1, n_users=5, n_items=14, sizes=(2, 3), chunk_dim=4,
               d0=6, interactions_per_user=4, residual=True, noise=0.1, **cfg):
    spec = dh.SyntheticSpec(
        n_users=n_users, n_items=n_items, attribute_sizes=sizes,
        d0_text=d0, d0_visual=d0, interactions_per_user=interactions_per_user,
        noise=noise,
    )
    dataset = dh.gen_synthetic(spec, seed)
    split = dh.split_dataset(dataset.interactions, seed)
    config = md.ModelConfig(
        n_attributes=len(sizes), d0_text=d0, d0_visual=d0, chunk_dim=chunk_dim,
        residual_chunk=residual, **cfg,
    )
    params = md.ParameterStore.initialize(config, dataset.schema, n_users, n_items, seed)
    return Setup(params, config, md.ModelData.from_dataset(dataset), dataset, split)


@pytest.fixture
def small_setup():
    return make_setup()
