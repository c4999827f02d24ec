import warnings

import numpy as np
import pytest

from ssvtcn.data import SynthConfig, synth_generate
from ssvtcn.model import Model, ModelConfig, batch_loss
from ssvtcn.nn_core import backward, finite_diff_grad, relative_error

SMALL = ModelConfig(input_dim=3, num_classes=4, window=8, levels=2, channels=4, kernel_size=3, latent_dim=6)


@pytest.fixture(scope="session")
def corpus():
    return synth_generate(SynthConfig(records=1500, seed=3))


@pytest.fixture
def small_model():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return Model.initialize(SMALL, seed=11)


def param_group(name: str) -> str:
    """Collapse a parameter name to the group the gradient suite reports on."""
    if name.startswith("tcn.head"):
        return "classifier head"
    if ".skip." in name:
        return "residual skips"
    if name.startswith("tcn."):
        return "TCN convs"
    if ".enc_" in name:
        return "encoder"
    return "decoder heads"


def full_graph_gradient_errors(model, windows, n_labeled, labels, pseudo, noise, h=1e-5):
    """Worst relative error per parameter group, backward pass vs central differences."""
    for p in model.parameters():
        p.grad = None
    total, _, _ = batch_loss(model, windows, n_labeled, labels, pseudo, noise)
    backward(total)
    worst = {}
    for name, p in model.named_parameters():
        def f(values, p=p):
            saved = p.data
            p.data = values
            try:
                return batch_loss(model, windows, n_labeled, labels, pseudo, noise)[0].item()
            finally:
                p.data = saved

        numeric = finite_diff_grad(f, p.data, h)
        err = relative_error(p.grad, numeric)
        group = param_group(name)
        worst[group] = max(worst.get(group, 0.0), err)
    return worst


def gradient_batch(config, seed=0):
    rng = np.random.default_rng(seed)
    windows = rng.normal(size=(2, config.window, config.input_dim))
    noise = rng.normal(size=(2, config.latent_dim))
    return windows, noise


ACCEPTANCE_LINES: list[str] = []


def acceptance_line(number, ok, text):
    """Record and print one acceptance verdict (``None`` means informational)."""
    status = "INFO" if ok is None else ("PASS" if ok else "FAIL")
    line = f"[{status}] criterion {number}: {text}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
