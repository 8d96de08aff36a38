"""Training loop: input corruption, cyclical KL annealing, AMSGrad, early stopping."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import Tensor

from .model import TeVAE, gaussian_nll

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class AnnealSchedule:
    grace_epochs: int = 25
    grace_beta_max: float = 1e-8
    cycle_epochs: int = 25
    cycle_beta_max: float = 1e-2

    def __post_init__(self):
        if self.grace_epochs < 1 or self.cycle_epochs < 1:
            raise ValueError("annealing epochs must be positive")
        if not (self.grace_beta_max > 0 and self.cycle_beta_max > 0):
            raise ValueError("annealing betas must be positive")


@dataclass
class TrainConfig:
    batch_size: int = 64
    max_epochs: int | None = None
    patience: int = 250
    corrupt_std: float = 0.01
    seed: int = 0
    learning_rate: float = 1e-3
    anneal: AnnealSchedule = field(default_factory=AnnealSchedule)

    def __post_init__(self):
        if isinstance(self.anneal, dict):
            self.anneal = AnnealSchedule(**self.anneal)
        if self.max_epochs is None:
            self.max_epochs = 10 * self.patience
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.corrupt_std < 0:
            raise ValueError("corrupt_std must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EarlyStopState:
    best_val_nll: float = math.inf
    best_epoch: int = -1
    epochs_since_improve: int = 0

    def update(self, epoch: int, val_nll: float) -> bool:
        """Record one epoch; returns True when it is a new best."""
        if val_nll < self.best_val_nll:
            self.best_val_nll = val_nll
            self.best_epoch = epoch
            self.epochs_since_improve = 0
            return True
        self.epochs_since_improve += 1
        return False


def kl_weight(epoch: int, s: AnnealSchedule | None = None) -> float:
    """Linear ramp 0 -> grace max over the grace period, then repeated ramps to the cycle max."""
    s = s or AnnealSchedule()
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch < s.grace_epochs:
        return s.grace_beta_max * epoch / s.grace_epochs
    e = (epoch - s.grace_epochs) % s.cycle_epochs
    return s.grace_beta_max + (s.cycle_beta_max - s.grace_beta_max) * e / s.cycle_epochs


def corrupt(X: Tensor, std: float, noise: Tensor) -> Tensor:
    if std == 0:
        return X
    return X + std * noise


@dataclass
class History:
    epoch: list[int] = field(default_factory=list)
    train_nll: list[float] = field(default_factory=list)
    train_kl: list[float] = field(default_factory=list)
    beta: list[float] = field(default_factory=list)
    val_nll: list[float] = field(default_factory=list)

    def __len__(self):
        return len(self.epoch)

    def rows(self):
        return list(zip(self.epoch, self.train_nll, self.train_kl, self.beta, self.val_nll))

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,train_nll,train_kl,beta,val_nll\n")
            for e, n, k, b, v in self.rows():
                fh.write(f"{e},{n:.10g},{k:.10g},{b:.10g},{v:.10g}\n")


@torch.no_grad()
def validation_nll(model: TeVAE, windows: Tensor, batch_size: int = 512) -> float:
    """Mean per-window reconstruction NLL on the deterministic inference path."""
    model.eval()
    total = 0.0
    for i in range(0, windows.shape[0], batch_size):
        X = windows[i:i + batch_size]
        op, _ = model.forward_infer(X)
        total += float(gaussian_nll(X, op.mu, op.logvar).sum(dim=(-2, -1)).sum())
    return total / windows.shape[0]


def fit(train_windows, val_windows, model: TeVAE, cfg: TrainConfig,
        on_epoch=None) -> tuple[dict, History, EarlyStopState]:
    """Train ``model`` in place and load the weights of the best validation epoch.

    Returns ``(best_state_dict, history, early_stop_state)``.
    """
    dtype = next(model.parameters()).dtype
    train = torch.as_tensor(np.asarray(train_windows), dtype=dtype)
    val = torch.as_tensor(np.asarray(val_windows), dtype=dtype)
    if train.shape[0] == 0 or val.shape[0] == 0:
        raise ValueError("training and validation splits must both be non-empty")

    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999),
                           eps=1e-7, amsgrad=True)
    stop = EarlyStopState()
    hist = History()
    best_state = copy.deepcopy(model.state_dict())
    d_Z = model.config.d_Z

    for epoch in range(cfg.max_epochs):
        beta = kl_weight(epoch, cfg.anneal)
        model.train()
        order = torch.randperm(train.shape[0], generator=gen)
        sum_nll = sum_kl = 0.0
        for i in range(0, train.shape[0], cfg.batch_size):
            X = train[order[i:i + cfg.batch_size]]
            X_in = corrupt(X, cfg.corrupt_std, torch.randn(X.shape, generator=gen, dtype=dtype))
            noise = torch.randn(*X.shape[:-1], d_Z, generator=gen, dtype=dtype)
            _, _, loss = model.forward_train(X_in, noise, beta, target=X)
            if not torch.isfinite(loss.total):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {i // cfg.batch_size}: "
                    f"nll={float(loss.nll.detach())}, kl={float(loss.kl.detach())}, beta={beta}")
            opt.zero_grad()
            loss.total.backward()
            opt.step()
            sum_nll += float(loss.nll.detach()) * X.shape[0]
            sum_kl += float(loss.kl.detach()) * X.shape[0]

        val_nll = validation_nll(model, val)
        if not math.isfinite(val_nll):
            raise TrainingDiverged(f"non-finite validation NLL at epoch {epoch}")
        hist.epoch.append(epoch)
        hist.train_nll.append(sum_nll / train.shape[0])
        hist.train_kl.append(sum_kl / train.shape[0])
        hist.beta.append(beta)
        hist.val_nll.append(val_nll)
        if stop.update(epoch, val_nll):
            best_state = copy.deepcopy(model.state_dict())
        log.debug("epoch %d train_nll %.4f kl %.4f beta %.3g val_nll %.4f",
                 epoch, hist.train_nll[-1], hist.train_kl[-1], beta, val_nll)
        if on_epoch is not None:
            on_epoch(epoch, hist, stop)
        if stop.epochs_since_improve >= cfg.patience:
            break

    model.load_state_dict(best_state)
    model.eval()
    return best_state, hist, stop

