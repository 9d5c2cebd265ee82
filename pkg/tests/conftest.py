"""Shared fixtures. The expensive artifacts (pretrained model, unlearned and
meta-unlearned checkpoints) are built once per session."""

from __future__ import annotations

import numpy as np
import pytest

from metaunlearn import concepts as cc
from metaunlearn import diffusion as dm
from metaunlearn import meta as mt
from metaunlearn import unlearn as ul
from metaunlearn.pipeline import train_dm

WORLD_SEED = 42
DATA_SEED = 43
PRETRAIN_SEED = 100
UNLEARN_SEED = 11
EVAL_SEED = 7


@pytest.fixture(scope="session")
def model_cfg():
    return dm.ModelConfig()


@pytest.fixture(scope="session")
def sched():
    return dm.make_schedule(100, 1e-4, 0.02)


@pytest.fixture(scope="session")
def table():
    return cc.default_world(WORLD_SEED)


@pytest.fixture(scope="session")
def bundle(table):
    return cc.draw_split(table, cc.SplitSizes(), DATA_SEED)


@pytest.fixture(scope="session")
def theta_star(model_cfg, sched, table, bundle):
    """Base model trained on all concepts (forget + retain)."""
    rng = np.random.default_rng(PRETRAIN_SEED)
    params = dm.init_params(model_cfg, rng)
    x = np.concatenate([bundle.forget.x, bundle.retain.x])
    names = bundle.forget.names + bundle.retain.names
    train_dm(params, x, names, table, sched, steps=6000, lr=1e-3, batch=64, optimizer="adam", rng=rng)
    return params


@pytest.fixture(scope="session")
def esd_config():
    return ul.UnlearnConfig(method="esd", eta=1.0, mask="u", steps=1000, lr=1e-3, batch=16, lam=1.0)


@pytest.fixture(scope="session")
def uce_config():
    return ul.UnlearnConfig(method="uce", lam1=0.5, lam2=1e-2)


@pytest.fixture(scope="session")
def theta_esd(theta_star, esd_config, bundle, table, sched):
    return ul.run_unlearn(theta_star, esd_config, bundle, table, sched, np.random.default_rng(UNLEARN_SEED))


@pytest.fixture(scope="session")
def theta_uce(theta_star, uce_config, bundle, table, sched):
    return ul.run_unlearn(theta_star, uce_config, bundle, table, sched, np.random.default_rng(UNLEARN_SEED))


@pytest.fixture(scope="session")
def meta_esd_config(esd_config):
    return mt.MetaConfig(
        outer_steps=1000,
        inner_steps=1,
        inner_lr=1e-3,
        outer_lr=1e-3,
        gamma1=1.0,
        gamma2=0.1,
        zeta=1.0,
        ft_batch=16,
        retain_batch=32,
        mode="exact",
        unlearn=esd_config,
    )


@pytest.fixture(scope="session")
def meta_uce_config(uce_config):
    return mt.MetaConfig(
        outer_steps=1000,
        inner_steps=1,
        inner_lr=1e-3,
        outer_lr=1e-3,
        gamma1=1.0,
        gamma2=0.1,
        zeta=1.0,
        ft_batch=16,
        retain_batch=32,
        mode="exact",
        unlearn=uce_config,
        meta_mask="x",
    )


@pytest.fixture(scope="session")
def theta_meta_esd(theta_star, meta_esd_config, bundle, table, sched):
    params, records = mt.meta_unlearn(
        theta_star, meta_esd_config, bundle, table, sched, np.random.default_rng(UNLEARN_SEED)
    )
    return params, records


@pytest.fixture(scope="session")
def theta_meta_uce(theta_uce, meta_uce_config, bundle, table, sched):
    params, records = mt.meta_unlearn(
        theta_uce, meta_uce_config, bundle, table, sched, np.random.default_rng(UNLEARN_SEED)
    )
    return params, records


@pytest.fixture()
def frozen_pair(model_cfg, sched, table, bundle):
    """One frozen forget/retain draw pair for gradient studies."""
    ft_batch = ul.sample_batch(bundle.forget, 32, table, model_cfg.tokens, np.random.default_rng(5))
    rt_batch = ul.sample_batch(bundle.retain, 32, table, model_cfg.tokens, np.random.default_rng(6))
    ft = dm.freeze_draws(ft_batch, sched, np.random.default_rng(7))
    rt = dm.freeze_draws(rt_batch, sched, np.random.default_rng(8))
    return ft, rt
