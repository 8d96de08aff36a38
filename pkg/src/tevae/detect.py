"""Sequence scoring with reverse-windowing, threshold estimation and detection."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch

from .model import LOG_2PI, TeVAE


class ReverseWindowMethod(str, Enum):
    FIRST = "first"
    LAST = "last"
    MEAN = "mean"


@dataclass
class AnomalyScore:
    s: np.ndarray  # (T,)
    per_channel: np.ndarray  # (T, d)
    mu_S: np.ndarray  # (T, d)
    sigma_S: np.ndarray  # (T, d)

    @property
    def T(self) -> int:
        return self.s.shape[0]


@dataclass(frozen=True)
class DetectionOutcome:
    label: str  # "normal" | "anomalous"
    first_flagged_step: int | None
    root_cause_channel: int | None
    max_score: float

    @property
    def flagged(self) -> bool:
        return self.label == "anomalous"


def reverse_window(mu_windows: np.ndarray, var_windows: np.ndarray,
                   method: ReverseWindowMethod | str = "mean") -> tuple[np.ndarray, np.ndarray]:
    """Collapse shift-1 window outputs ``(n, w, d)`` into per-step ``(T, d)`` mean and variance.

    mean  -- average over every window covering a step (means and variances alike)
    first -- step t from the window starting at t; the last w-1 steps from the final window
    last  -- step t from the window ending at t; the first w-1 steps from the first window
    """
    method = ReverseWindowMethod(method)
    n, w, d = mu_windows.shape
    T = n + w - 1
    if method is ReverseWindowMethod.MEAN:
        mu_sum = np.zeros((T, d))
        var_sum = np.zeros((T, d))
        for j in range(w):
            mu_sum[j:j + n] += mu_windows[:, j]
            var_sum[j:j + n] += var_windows[:, j]
        counts = np.minimum.reduce([np.arange(1, T + 1), np.full(T, w), np.full(T, n),
                                    np.arange(T, 0, -1)]).astype(float)[:, None]
        return mu_sum / counts, var_sum / counts
    if method is ReverseWindowMethod.FIRST:
        mu = np.concatenate([mu_windows[:, 0], mu_windows[-1, 1:]], axis=0)
        var = np.concatenate([var_windows[:, 0], var_windows[-1, 1:]], axis=0)
        return mu, var
    mu = np.concatenate([mu_windows[0, :-1], mu_windows[:, -1]], axis=0)
    var = np.concatenate([var_windows[0, :-1], var_windows[:, -1]], axis=0)
    return mu, var


def nll_scores(x: np.ndarray, mu_S: np.ndarray, var_S: np.ndarray) -> AnomalyScore:
    sigma = np.sqrt(var_S)
    per_channel = 0.5 * (LOG_2PI + 2.0 * np.log(sigma) + (x - mu_S) ** 2 / sigma ** 2)
    return AnomalyScore(per_channel.sum(axis=1), per_channel, mu_S, sigma)


@torch.no_grad()
def infer_windows(model: TeVAE, values: np.ndarray, batch_size: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Run inference on every shift-1 window; returns float64 ``(mu, var)`` of shape ``(n, w, d)``."""
    w = model.config.w
    T = values.shape[0]
    if T < w:
        raise ValueError(f"sequence shorter than window ({T} < {w})")
    model.eval()
    dtype = next(model.parameters()).dtype
    windows = np.lib.stride_tricks.sliding_window_view(values, w, axis=0).swapaxes(1, 2)
    n = windows.shape[0]
    mu = np.empty((n, w, values.shape[1]))
    var = np.empty_like(mu)
    for i in range(0, n, batch_size):
        X = torch.tensor(windows[i:i + batch_size], dtype=dtype)
        op, _ = model.forward_infer(X)
        mu[i:i + batch_size] = op.mu.double().numpy()
        var[i:i + batch_size] = torch.exp(op.logvar.double()).numpy()
    return mu, var


def score_sequence(values: np.ndarray, model: TeVAE, method: ReverseWindowMethod | str = "mean",
                   batch_size: int = 1024) -> AnomalyScore:
    """Per-step multivariate NLL and its per-channel decomposition for one normalised sequence."""
    values = np.asarray(values, dtype=float)
    mu_w, var_w = infer_windows(model, values, batch_size)
    mu_S, var_S = reverse_window(mu_w, var_w, method)
    return nll_scores(values, mu_S, var_S)


def estimate_threshold(val_sequences, model: TeVAE, method: ReverseWindowMethod | str = "mean") -> float:
    """Maximum anomaly score over all validation sequences."""
    scores = [score_sequence(v, model, method) for v in val_sequences]
    return threshold_from_scores(scores)


def threshold_from_scores(scores) -> float:
    if len(scores) == 0:
        raise ValueError("threshold estimation needs at least one validation sequence")
    maxima = [float(np.max(sc.s if isinstance(sc, AnomalyScore) else sc)) for sc in scores]
    tau = max(maxima)
    if not math.isfinite(tau):
        raise ValueError("validation scores produced a non-finite threshold")
    return tau


def decide(score: AnomalyScore, tau: float) -> DetectionOutcome:
    """Flag when any step scores strictly above ``tau``; attribute the first flagged step."""
    above = np.flatnonzero(score.s > tau)
    max_score = float(np.max(score.s))
    if above.size == 0:
        return DetectionOutcome("normal", None, None, max_score)
    t = int(above[0])
    channel = int(np.argmax(score.per_channel[t]))  # argmax returns the lowest index on ties
    return DetectionOutcome("anomalous", t, channel, max_score)


def detect(values: np.ndarray, model: TeVAE, tau: float,
           method: ReverseWindowMethod | str = "mean") -> DetectionOutcome:
    return decide(score_sequence(values, model, method), tau)


def write_score_dump(path, score: AnomalyScore, channel_names: list[str]) -> None:
    header = ",".join(["t", "s", *[f"s_{name}" for name in channel_names]])
    table = np.column_stack([np.arange(score.T), score.s, score.per_channel])
    fmt = ["%d"] + ["%.10g"] * (table.shape[1] - 1)
    np.savetxt(path, table, delimiter=",", header=header, comments="", fmt=fmt)
