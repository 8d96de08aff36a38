"""TeVAE network: BiLSTM encoder, multi-head attention bridge, BiLSTM decoder.

Queries and keys are projections of the input window, values are projections
of the latent matrix (a sample ``Z`` during training, ``mu_Z`` at inference).
The NoMA variant drops the attention bridge and feeds the latent matrix straight
into the decoder.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class ModelConfig:
    w: int = 256
    d_D: int = 13
    d_Z: int = 64
    h: int = 8
    d_K: int | None = None
    enc_hidden: tuple[int, int] = (512, 256)
    dec_hidden: tuple[int, int] = (256, 512)
    attention: bool = True

    def __post_init__(self):
        if self.d_K is None:
            self.d_K = max(1, self.d_D // self.h)
        self.enc_hidden = tuple(int(v) for v in self.enc_hidden)
        self.dec_hidden = tuple(int(v) for v in self.dec_hidden)
        values = [self.w, self.d_D, self.d_Z, self.h, self.d_K, *self.enc_hidden, *self.dec_hidden]
        if any(v < 1 for v in values):
            raise ValueError(f"all model sizes must be positive: {self}")
        if len(self.enc_hidden) != 2 or len(self.dec_hidden) != 2:
            raise ValueError("enc_hidden and dec_hidden need exactly two sizes each")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["enc_hidden"] = list(self.enc_hidden)
        d["dec_hidden"] = list(self.dec_hidden)
        return d


class LatentParams(NamedTuple):
    mu: Tensor
    logvar: Tensor


class OutputParams(NamedTuple):
    mu: Tensor
    logvar: Tensor


class LossBreakdown(NamedTuple):
    nll: Tensor
    kl: Tensor
    beta: float
    total: Tensor


def sample_latent(lp: LatentParams, noise: Tensor) -> Tensor:
    """Reparametrised draw ``mu + exp(logvar / 2) * noise``."""
    return lp.mu + torch.exp(0.5 * lp.logvar) * noise


def softmax_rows(scores: Tensor) -> Tensor:
    shifted = scores - scores.amax(dim=-1, keepdim=True)
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def attend(X: Tensor, V_src: Tensor, W_Q: Tensor, W_K: Tensor, W_V: Tensor, W_O: Tensor,
           return_scores: bool = False):
    """Multi-head scaled dot-product attention with Q, K from ``X`` and V from ``V_src``.

    Shapes: ``X (..., w, d_D)``, ``V_src (..., w, d_Z)``, ``W_Q/W_K (h, d_D, d_K)``,
    ``W_V (h, d_Z, d_K)``, ``W_O (h * d_K, d_Z)``. Returns ``C (..., w, d_Z)`` and,
    optionally, the ``(..., h, w, w)`` row-stochastic score tensor.
    """
    h, d_D, d_K = W_Q.shape
    if X.shape[-1] != d_D or W_K.shape != W_Q.shape:
        raise ValueError(f"query/key projections expect {d_D} input channels, got {X.shape[-1]}")
    if V_src.shape[-1] != W_V.shape[1] or W_V.shape[0] != h or W_V.shape[2] != d_K:
        raise ValueError(f"value projection shape {tuple(W_V.shape)} incompatible with V_src {tuple(V_src.shape)}")
    if X.shape[-2] != V_src.shape[-2]:
        raise ValueError("X and V_src must cover the same time steps")
    if W_O.shape[0] != h * d_K:
        raise ValueError(f"output projection expects {W_O.shape[0]} rows, heads give {h * d_K}")

    Xh = X.unsqueeze(-3)  # (..., 1, w, d_D)
    Q = Xh @ W_Q  # (..., h, w, d_K)
    K = Xh @ W_K
    V = V_src.unsqueeze(-3) @ W_V
    if return_scores:
        scores = softmax_rows(Q @ K.transpose(-1, -2) / math.sqrt(d_K))
        heads = scores @ V  # (..., h, w, d_K)
    else:
        # fused kernel, same max-shifted softmax without materialising the w x w scores
        heads = F.scaled_dot_product_attention(Q, K, V)
    concat = heads.transpose(-3, -2).reshape(*heads.shape[:-3], heads.shape[-2], h * d_K)
    C = concat @ W_O
    if return_scores:
        return C, scores
    return C


def gaussian_nll(x: Tensor, mu: Tensor, logvar: Tensor) -> Tensor:
    """Element-wise negative log-density of a diagonal Gaussian."""
    return 0.5 * (LOG_2PI + logvar + (x - mu) ** 2 / torch.exp(logvar))


def kl_standard_normal(lp: LatentParams) -> Tensor:
    """Closed-form KL(N(mu, exp(logvar)) || N(0, 1)) summed over the last two axes."""
    # expm1 avoids cancellation near logvar = 0 and keeps every term non-negative
    return 0.5 * ((torch.expm1(lp.logvar) - lp.logvar) + lp.mu ** 2).sum(dim=(-2, -1))


def elbo_loss(X: Tensor, op: OutputParams, lp: LatentParams, beta: float) -> LossBreakdown:
    """Negative ELBO per window, averaged over any leading batch axis.

    ``nll`` sums over the ``w * d_D`` entries of a window and ``kl`` over ``w * d_Z``;
    ``beta`` only weights the KL term.
    """
    if X.shape != op.mu.shape:
        raise ValueError(f"target shape {tuple(X.shape)} != output shape {tuple(op.mu.shape)}")
    nll = gaussian_nll(X, op.mu, op.logvar).sum(dim=(-2, -1)).mean()
    kl = kl_standard_normal(lp).mean()
    return LossBreakdown(nll, kl, beta, nll + beta * kl)


class _BiStack(nn.Module):
    """Two stacked bidirectional LSTMs followed by two time-distributed affine heads."""

    def __init__(self, d_in: int, hidden: tuple[int, int], d_out: int):
        super().__init__()
        self.rnn1 = nn.LSTM(d_in, hidden[0], batch_first=True, bidirectional=True)
        self.rnn2 = nn.LSTM(2 * hidden[0], hidden[1], batch_first=True, bidirectional=True)
        self.mu = nn.Linear(2 * hidden[1], d_out)
        self.logvar = nn.Linear(2 * hidden[1], d_out)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        lead = x.shape[:-2]
        x = x.reshape(-1, *x.shape[-2:])
        y, _ = self.rnn1(x)
        y, _ = self.rnn2(y)
        mu = self.mu(y)
        logvar = torch.clamp(self.logvar(y), LOGVAR_MIN, LOGVAR_MAX)
        return mu.reshape(*lead, *mu.shape[-2:]), logvar.reshape(*lead, *logvar.shape[-2:])


class TeVAE(nn.Module):
    def __init__(self, config: ModelConfig, seed: int | None = None):
        super().__init__()
        self.config = config
        c = config
        if seed is not None:
            torch.manual_seed(seed)
        self.encoder = _BiStack(c.d_D, c.enc_hidden, c.d_Z)
        self.decoder = _BiStack(c.d_Z, c.dec_hidden, c.d_D)
        if c.attention:
            self.W_Q = nn.Parameter(_uniform_fan_in(c.h, c.d_D, c.d_K))
            self.W_K = nn.Parameter(_uniform_fan_in(c.h, c.d_D, c.d_K))
            self.W_V = nn.Parameter(_uniform_fan_in(c.h, c.d_Z, c.d_K))
            self.W_O = nn.Parameter(_uniform_fan_in(c.h * c.d_K, c.d_Z))

    def _check(self, X: Tensor):
        c = self.config
        if X.dim() < 2 or X.shape[-2:] != (c.w, c.d_D):
            raise ValueError(f"expected windows of shape (..., {c.w}, {c.d_D}), got {tuple(X.shape)}")

    def encode(self, X: Tensor) -> LatentParams:
        self._check(X)
        return LatentParams(*self.encoder(X))

    def decode(self, C: Tensor) -> OutputParams:
        c = self.config
        if C.shape[-2:] != (c.w, c.d_Z):
            raise ValueError(f"expected context of shape (..., {c.w}, {c.d_Z}), got {tuple(C.shape)}")
        return OutputParams(*self.decoder(C))

    def attend(self, X: Tensor, V_src: Tensor, return_scores: bool = False):
        return attend(X, V_src, self.W_Q, self.W_K, self.W_V, self.W_O, return_scores)

    def _bridge(self, X: Tensor, V_src: Tensor) -> Tensor:
        if self.config.attention:
            return self.attend(X, V_src)
        return V_src

    def forward_train(self, X: Tensor, noise: Tensor, beta: float,
                      target: Tensor | None = None) -> tuple[OutputParams, LatentParams, LossBreakdown]:
        """``X`` is the (possibly corrupted) input; the loss is taken against ``target``."""
        lp = self.encode(X)
        Z = sample_latent(lp, noise)
        op = self.decode(self._bridge(X, Z))
        loss = elbo_loss(X if target is None else target, op, lp, beta)
        return op, lp, loss

    def forward_infer(self, X: Tensor) -> tuple[OutputParams, LatentParams]:
        lp = self.encode(X)
        op = self.decode(self._bridge(X, lp.mu))
        return op, lp

    def forward(self, X: Tensor) -> tuple[OutputParams, LatentParams]:
        return self.forward_infer(X)


def forward_noma(model: TeVAE, X: Tensor, noise: Tensor | None = None) -> tuple[OutputParams, LatentParams]:
    """Encoder straight into decoder, sampling only when ``noise`` is given."""
    lp = model.encode(X)
    Z = lp.mu if noise is None else sample_latent(lp, noise)
    return model.decode(Z), lp


def _uniform_fan_in(*shape: int) -> Tensor:
    bound = 1.0 / math.sqrt(shape[-2])
    return torch.empty(*shape).uniform_(-bound, bound)


def save_checkpoint(path, model: TeVAE, epoch: int, val_nll: float, extra: dict | None = None) -> None:
    """Write config, named weight arrays, epoch and validation NLL to one ``.npz`` file."""
    state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {
        "config": model.config.to_dict(),
        "epoch": int(epoch),
        "val_nll": float(val_nll),
        "weights": {k: {"shape": list(v.shape), "dtype": str(v.dtype)} for k, v in state.items()},
    }
    if extra:
        meta["extra"] = extra
    arrays = {f"w/{k}": v for k, v in state.items()}
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[TeVAE, dict]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        state = {k[2:]: torch.from_numpy(data[k].copy()) for k in data.files if k.startswith("w/")}
    model = TeVAE(ModelConfig(**meta["config"]))
    dtype = next(iter(state.values())).dtype
    model.to(dtype)
    model.load_state_dict(state)
    model.eval()
    return model, meta
