import pytest

from dltlab.config import parse_config

SMALL = """
[run]
t_total = 6
hidden = 16
seed = 1
[data]
n_per_class = 30
n_classes = 4
dim = 8
center_spread = 3.0
[noise]
rate = 0.4
[policy]
s = 4
t_warm = 2
t_grad = 3
[optim]
batch_size = 32
lr = 0.05
lr_drop_epoch = 4
"""


@pytest.fixture
def small_cfg():
    return parse_config(SMALL)


@pytest.fixture
def small_cfg_text():
    return SMALL
