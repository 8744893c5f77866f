import numpy as np
import pandas as pd
import pytest

from common.settings import load_settings
from parsers.csv_processor import Dataset
from simulators.simulator import PredictorGenerator, SimConfig, simulate


@pytest.fixture
def settings():
    return load_settings()


@pytest.fixture
def write_text(tmp_path):
    def _write(name, text):
        path = tmp_path / name
        path.write_text(text)
        return path
    return _write


def make_dataset(columns, cluster='school'):
    return Dataset(pd.DataFrame(columns), cluster)


def balanced_config(J=50, n=20, tau00=4.0, sigma2=10.0, seed=0, gamma=None,
                    predictors=(), random_slopes=(), tau=None, **kwargs):
    return SimConfig(J=J, group_sizes=(n,), gamma=tuple((gamma or {'intercept': 50.0}).items()),
                     tau=np.array([[tau00]]) if tau is None else np.asarray(tau, dtype=float),
                     sigma2=sigma2, predictors=tuple(predictors),
                     random_slopes=tuple(random_slopes), seed=seed, **kwargs)


@pytest.fixture
def balanced_data():
    """Random-intercept data, 50 groups of 20, tau00 = 4, sigma2 = 10."""
    return simulate(balanced_config())


@pytest.fixture
def predictor_data():
    """One level-1 and one level-2 predictor of a random-intercept outcome."""
    cfg = balanced_config(J=40, n=15, tau00=9.0, sigma2=25.0, seed=7,
                          gamma={'intercept': 500.0, 'x': 3.0, 'w': -2.0},
                          predictors=(PredictorGenerator('x', level=1, mean=2.0, sd=1.5),
                                      PredictorGenerator('w', level=2, sd=2.0)))
    return simulate(cfg)


@pytest.fixture
def slope_data():
    """Random intercept and a strongly varying slope on x."""
    cfg = balanced_config(J=50, n=20, sigma2=1.0, seed=3,
                          gamma={'intercept': 10.0, 'x': 2.0},
                          predictors=(PredictorGenerator('x', level=1),),
                          random_slopes=('x',), tau=[[4.0, 0.0], [0.0, 25.0]])
    return simulate(cfg)
