"""Causal dilated convolutions: the future never leaks into the past."""

import warnings

import numpy as np

from ssvtcn.nn_core import Rng
from ssvtcn.tcn import TcnConfig, init_tcn, receptive_field, tcn_forward

config = TcnConfig(input_channels=3, num_classes=4, levels=4, channels=8, kernel_size=3)
print("receptive field, 4 levels:", receptive_field(config))
print("receptive field, 8 levels:", receptive_field(TcnConfig(3, 4, levels=8)))

with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    params = init_tcn(config, Rng(1))

window = np.random.default_rng(2).normal(size=(32, 3))
base = tcn_forward(window, params).hidden_sequence.data

t = 20
bumped = window.copy()
bumped[t] += 5.0
after = tcn_forward(bumped, params).hidden_sequence.data
change = np.abs(after - base).max(axis=1)
print(f"largest change before step {t}: {change[:t].max():.1e}")
print(f"largest change from step {t} on: {change[t:].max():.3f}")
