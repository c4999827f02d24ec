"""The composite SS-VTCN network, its semi-supervised loss and training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator

import numpy as np

from .nn_core import (
    Adam,
    NonFiniteError,
    Rng,
    Tensor,
    backward,
    clamp_min,
    log,
    mul,
    no_grad,
    softmax,
)
from .tcn import TcnConfig, TcnParams, init_tcn, tcn_forward
from .vae import LatentGaussian, VaeConfig, VaeParams, init_vae, l_v_loss, vae_forward

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-12


class NonFiniteLossError(NonFiniteError):
    def __init__(self, term: str, value: float):
        super().__init__(f"{term} diverged (value {value!r})")
        self.term = term
        self.value = value


DEFAULT_SIGMA = 4.0


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 11  # u
    num_classes: int = 4  # M
    window: int = 16  # W
    levels: int = 8  # |l|
    channels: int = 8  # |c|, also the VAE input width h
    kernel_size: int = 3  # w
    latent_dim: int = 16  # z
    # sigma = 1 on unit-variance features lets the reconstruction terms
    # flatten the embedding within an epoch; 4 keeps the classifier alive
    sigma: float = DEFAULT_SIGMA

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        # both sub-configs validate their own fields
        self.tcn_config()
        self.vae_config()

    def tcn_config(self) -> TcnConfig:
        return TcnConfig(
            input_channels=self.input_dim,
            num_classes=self.num_classes,
            levels=self.levels,
            channels=self.channels,
            kernel_size=self.kernel_size,
        )

    def vae_config(self) -> VaeConfig:
        return VaeConfig(
            input_dim=self.channels, latent_dim=self.latent_dim, raw_dim=self.input_dim, sigma=self.sigma
        )


class Model:
    def __init__(self, config: ModelConfig, tcn: TcnParams, vae: VaeParams):
        if vae.config.input_dim != tcn.config.channels:
            raise ValueError("VAE input width must equal the TCN channel count")
        self.config = config
        self.tcn = tcn
        self.vae = vae
        self.metadata: dict = {}

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0) -> Model:
        rng = Rng(seed).child("init")
        tcn = init_tcn(config.tcn_config(), rng.child("tcn"), window_length=config.window)
        vae = init_vae(config.vae_config(), rng.child("vae"))
        return cls(config, tcn, vae)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.tcn.named_parameters()
        yield from self.vae.named_parameters()

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch; missing {missing}, unexpected {extra}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != expected {p.shape}")
            p.data = arr.copy()

    def copy(self) -> Model:
        clone = Model.initialize(self.config, 0)
        clone.load_state_dict(self.state_dict())
        clone.metadata = dict(self.metadata)
        return clone


@dataclass
class ModelOutput:
    logits: Tensor
    probs: Tensor
    hidden_sequence: Tensor
    embedding: Tensor  # X^_t
    gaussian: LatentGaussian
    sample: Tensor  # Z_t
    recon_embedding: Tensor  # X~_t
    recon_raw: Tensor


def forward(model: Model, windows, noise=None) -> ModelOutput:
    """Run TCN then VAE on one window ``[W, u]`` or a batch ``[B, W, u]``.

    ``noise`` is the standard-normal draw for the latent sample; ``None``
    means zero noise (Z_t = mean), which is what inference uses.
    """
    windows = windows if isinstance(windows, Tensor) else Tensor(windows)
    cfg = model.config
    if windows.ndim not in (2, 3) or windows.shape[-2:] != (cfg.window, cfg.input_dim):
        raise ValueError(
            f"expected window shape [..., {cfg.window}, {cfg.input_dim}], got {windows.shape}"
        )
    t = tcn_forward(windows, model.tcn)
    v = vae_forward(t.embedding, model.vae, noise)
    return ModelOutput(
        logits=t.logits,
        probs=softmax(t.logits),
        hidden_sequence=t.hidden_sequence,
        embedding=t.embedding,
        gaussian=v.gaussian,
        sample=v.sample,
        recon_embedding=v.recon_embedding,
        recon_raw=v.recon_raw,
    )


def predict_proba(model: Model, windows: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    windows = np.asarray(windows, dtype=np.float64)
    out = np.empty((len(windows), model.config.num_classes))
    with no_grad():
        for start in range(0, len(windows), batch_size):
            chunk = windows[start : start + batch_size]
            out[start : start + len(chunk)] = forward(model, chunk).probs.data
    return out


# ---------------------------------------------------------------------------
# Losses


def indicator(prediction_class: int, reference_class: int) -> int:
    return int(prediction_class == reference_class)


def l_t_loss(
    labeled_probs: Tensor | None,
    labels,
    unlabeled_probs: Tensor | None = None,
    pseudo_labels=None,
) -> Tensor:
    """Semi-supervised classification loss.

    Labeled records contribute ``-log p[true]``; unlabeled records contribute
    ``-p[pseudo] * log p[pseudo]``.  The sum is divided by the total record
    count.  Logs are floored at 1e-12.
    """
    terms: list[Tensor] = []
    n = 0
    if labeled_probs is not None and labeled_probs.shape[0] > 0:
        labels = np.asarray(labels, dtype=np.int64)
        p = labeled_probs[np.arange(len(labels)), labels]
        terms.append(-log(clamp_min(p, LOG_FLOOR)).sum())
        n += len(labels)
    if unlabeled_probs is not None and unlabeled_probs.shape[0] > 0:
        pseudo = np.asarray(pseudo_labels, dtype=np.int64)
        p = unlabeled_probs[np.arange(len(pseudo)), pseudo]
        terms.append(-(p * log(clamp_min(p, LOG_FLOOR))).sum())
        n += len(pseudo)
    if n == 0:
        raise ValueError("l_t_loss needs at least one labeled or unlabeled record")
    total = terms[0] if len(terms) == 1 else terms[0] + terms[1]
    return mul(total, 1.0 / n)


def total_loss(l_t: Tensor, l_v: Tensor) -> Tensor:
    for name, term in (("L_T", l_t), ("L_V", l_v)):
        value = float(np.asarray(term.data if isinstance(term, Tensor) else term))
        if not math.isfinite(value):
            raise NonFiniteLossError(name, value)
    return l_t + l_v


# ---------------------------------------------------------------------------
# Pseudo-labels


@dataclass
class PseudoLabelState:
    labels: np.ndarray

    @classmethod
    def initial(cls, n: int) -> PseudoLabelState:
        return cls(np.zeros(n, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.labels)


def update_pseudo_labels(
    model: Model, windows: np.ndarray, state: PseudoLabelState
) -> tuple[PseudoLabelState, int]:
    """Replace every pseudo-label with the current argmax (lowest index wins ties)."""
    if len(windows) != len(state):
        raise ValueError(f"{len(windows)} unlabeled windows but {len(state)} pseudo-labels")
    if len(state) == 0:
        return PseudoLabelState.initial(0), 0
    new = predict_proba(model, windows).argmax(axis=1).astype(np.int64)
    changes = int(np.count_nonzero(new != state.labels))
    return PseudoLabelState(new), changes


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.005
    epochs: int = 8
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    L_T: float
    L_V: float
    total: float
    labeled_acc: float
    pseudo_changes: int


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.epochs)

    def __getitem__(self, i) -> EpochRecord:
        return self.epochs[i]

    def to_dicts(self) -> list[dict]:
        return [asdict(e) for e in self.epochs]


def batch_loss(
    model: Model,
    windows: np.ndarray,
    n_labeled: int,
    labels,
    pseudo_labels,
    noise=None,
) -> tuple[Tensor, Tensor, Tensor]:
    """(total, L_T, L_V) for a batch whose first ``n_labeled`` rows are labeled."""
    out = forward(model, windows, noise)
    n = out.probs.shape[0]
    lab = out.probs[:n_labeled] if n_labeled else None
    unl = out.probs[n_labeled:] if n_labeled < n else None
    lt = l_t_loss(lab, labels, unl, pseudo_labels)
    raw = np.asarray(windows)[:, -1, :]
    lv = l_v_loss(out.embedding, raw, out, model.config.sigma)
    return total_loss(lt, lv), lt, lv


def fit(
    labeled_windows: np.ndarray,
    labels,
    unlabeled_windows: np.ndarray | None,
    model_config: ModelConfig,
    train_config: TrainConfig = TrainConfig(),
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[Model, TrainHistory]:
    """Train SS-VTCN on labeled windows plus (optionally) unlabeled windows.

    Each epoch shuffles both sets with the seeded stream and splits them into
    the same number of mini-batches, so every batch carries labeled and
    unlabeled records in their global proportion.  Pseudo-labels start at
    class 0 and are refreshed once, after each epoch's optimizer pass.
    Passing no unlabeled windows gives plain supervised training.
    """
    labeled_windows = np.asarray(labeled_windows, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labeled_windows) == 0:
        raise ValueError("fit needs a non-empty labeled set")
    if len(labels) != len(labeled_windows):
        raise ValueError("labels and labeled windows differ in length")
    if labels.min() < 0 or labels.max() >= model_config.num_classes:
        raise ValueError(f"labels must lie in [0, {model_config.num_classes})")
    if unlabeled_windows is None:
        unlabeled_windows = np.empty((0, model_config.window, model_config.input_dim))
    unlabeled_windows = np.asarray(unlabeled_windows, dtype=np.float64)

    rng = Rng(train_config.seed)
    model = Model.initialize(model_config, train_config.seed)
    shuffle_rng = rng.child("shuffle")
    noise_rng = rng.child("noise")
    opt = Adam(
        model.parameters(),
        lr=train_config.lr,
        beta1=train_config.beta1,
        beta2=train_config.beta2,
        eps=train_config.eps,
    )

    n_lab, n_unl = len(labeled_windows), len(unlabeled_windows)
    n_batches = max(1, math.ceil((n_lab + n_unl) / train_config.batch_size))
    pseudo = PseudoLabelState.initial(n_unl)
    history = TrainHistory()

    for epoch in range(1, train_config.epochs + 1):
        lab_chunks = np.array_split(shuffle_rng.permutation(n_lab), n_batches)
        unl_chunks = np.array_split(shuffle_rng.permutation(n_unl), n_batches)
        lt_sum = lv_sum = 0.0
        seen = 0
        for li, ui in zip(lab_chunks, unl_chunks):
            if len(li) + len(ui) == 0:
                continue
            x = np.concatenate([labeled_windows[li], unlabeled_windows[ui]])
            noise = noise_rng.normal(size=(len(x), model_config.latent_dim))
            loss, lt, lv = batch_loss(model, x, len(li), labels[li], pseudo.labels[ui], noise)
            opt.zero_grad()
            backward(loss)
            opt.step()
            lt_sum += lt.item() * len(x)
            lv_sum += lv.item() * len(x)
            seen += len(x)

        acc = float(np.mean(predict_proba(model, labeled_windows).argmax(axis=1) == labels))
        pseudo, changes = update_pseudo_labels(model, unlabeled_windows, pseudo)
        l_t, l_v = lt_sum / seen, lv_sum / seen
        record = EpochRecord(epoch, l_t, l_v, l_t + l_v, acc, changes)
        history.epochs.append(record)
        logger.info(
            "epoch %d: L_T=%.5f L_V=%.5f total=%.5f acc=%.4f pseudo_changes=%d",
            epoch, l_t, l_v, l_t + l_v, acc, changes,
        )
        if on_epoch is not None:
            on_epoch(record)

    return model, history
