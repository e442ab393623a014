"""The fixed-seed outlier fixture shared by the scheme-ordering regressions."""

import numpy as np

from ssmquant.model import ModelConfig, init_model

FIXTURE_CFG = ModelConfig(d_model=64, d_inner=128, d_state=16, d_conv=4, dt_rank=4, n_blocks=4, seed=0)
OUTLIER_FRAC = 0.05
OUTLIER_GAIN = 50.0
DATA_SEED = 0
CALIB_SHAPE = (64, 32, 64)
PROBE_SHAPE = (8, 32, 64)


def outlier_fixture():
    model = init_model(FIXTURE_CFG, OUTLIER_FRAC, OUTLIER_GAIN)
    rng = np.random.default_rng(DATA_SEED)
    calib = rng.standard_normal(CALIB_SHAPE)
    probe = rng.standard_normal(PROBE_SHAPE)
    return model, calib, probe
