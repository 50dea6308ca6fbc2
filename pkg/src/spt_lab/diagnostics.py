"""Prompt/patch-token diagnostics: sigmoid-normalized joint distribution, NMI, linear CKA."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import log_expit, logsumexp

from .tensor import no_grad


@dataclass
class JointDistribution:
    pi: np.ndarray          # [N_p, N_e]
    marginal_p: np.ndarray  # [N_p]
    marginal_e: np.ndarray  # [N_e]
    log_pi: np.ndarray = field(repr=False, default=None)


def _log_joint(P: np.ndarray, E: np.ndarray) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    E = np.asarray(E, dtype=np.float64)
    if P.ndim != 2 or E.ndim != 2 or P.shape[1] != E.shape[1]:
        raise ValueError(f"expected [N_p, D] and [N_e, D] with equal D, got {P.shape} and {E.shape}")
    if P.shape[0] < 1 or E.shape[0] < 1:
        raise ValueError("need at least one prompt and one patch token")
    log_sig = log_expit(P @ E.T)  # unscaled dot products
    return log_sig - logsumexp(log_sig)


def joint_distribution(P: np.ndarray, E: np.ndarray) -> JointDistribution:
    """pi(p_k, e_j) = sigmoid(p_k . e_j) / sum over all (k, j), plus both marginals."""
    log_pi = _log_joint(P, E)
    pi = np.exp(log_pi)
    return JointDistribution(pi, pi.sum(axis=1), pi.sum(axis=0), log_pi)


def nmi_from_joint(pi: np.ndarray, log_pi: np.ndarray | None = None) -> float:
    """2 I / (H_row + H_col) of a joint table (natural log); 0 when both entropies vanish."""
    pi = np.asarray(pi, dtype=np.float64)
    if log_pi is None:
        with np.errstate(divide="ignore"):
            log_pi = np.log(pi)
    log_p = logsumexp(log_pi, axis=1)
    log_e = logsumexp(log_pi, axis=0)
    p, e = np.exp(log_p), np.exp(log_e)
    mask = pi > 0
    mi = float(np.sum(pi[mask] * (log_pi - log_p[:, None] - log_e[None, :])[mask]))
    h_p = float(-np.sum(p[p > 0] * log_p[p > 0]))
    h_e = float(-np.sum(e[e > 0] * log_e[e > 0]))
    denom = h_p + h_e
    if denom <= 0:
        return 0.0
    return max(0.0, 2.0 * mi / denom)


def nmi(P: np.ndarray, E: np.ndarray) -> float:
    """Normalized mutual information between prompt tokens P and patch tokens E."""
    log_pi = _log_joint(P, E)
    return nmi_from_joint(np.exp(log_pi), log_pi)


def nmi_trace(model, prompts, probe_images: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Per-block NMI between the prompts and patch tokens entering each block.

    NMI is computed per image and averaged over the probe batch. Returns an
    array of length L (entry i is block i+1).
    """
    from .prompts import PromptTrace
    from .vit import forward_features

    depth = model.config.depth
    totals = np.zeros(depth)
    count = 0
    with no_grad():
        for start in range(0, len(probe_images), chunk):
            batch = probe_images[start:start + chunk]
            trace = PromptTrace()
            forward_features(batch, model, prompts, trace=trace)
            for i in range(depth):
                P, E = trace.prompt_in[i], trace.patch_in[i]
                for b in range(len(batch)):
                    Pb = P if P.ndim == 2 else P[b]
                    totals[i] += nmi(Pb, E[b])
            count += len(batch)
    return totals / count


def linear_cka(X: np.ndarray, Y: np.ndarray) -> float:
    """||Y^T X||_F^2 / (||X^T X||_F ||Y^T Y||_F) on column-centered X [n, d1] and Y [n, d2]."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ValueError(f"expected [n, d1] and [n, d2] with equal n, got {X.shape} and {Y.shape}")
    if X.shape[0] < 2:
        raise ValueError("CKA needs at least two rows")
    X = X - X.mean(axis=0)
    Y = Y - Y.mean(axis=0)
    xx = np.linalg.norm(X.T @ X)
    yy = np.linalg.norm(Y.T @ Y)
    if xx == 0 or yy == 0:
        warnings.warn("zero-variance input to linear_cka; returning 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return float(np.linalg.norm(Y.T @ X) ** 2 / (xx * yy))


def cka_trace(model, prompts, probe_images: np.ndarray, chunk: int = 64) -> np.ndarray:
    """L x L matrix: CKA between layer-i prompts and layer-j patch tokens.

    Prompt and patch token counts differ, so the D feature axes act as the
    shared examples: CKA(P_i^T, Ebar_j^T), with Ebar_j the patch tokens
    entering block j averaged over the probe images.
    """
    from .prompts import PromptTrace
    from .vit import forward_features

    depth = model.config.depth
    prompt_sum = None
    patch_sum = None
    count = 0
    with no_grad():
        for start in range(0, len(probe_images), chunk):
            batch = probe_images[start:start + chunk]
            trace = PromptTrace()
            forward_features(batch, model, prompts, trace=trace)
            P = np.stack([p if p.ndim == 2 else p.mean(axis=0) for p in trace.prompt_in]) * len(batch)
            E = np.stack([e.sum(axis=0) for e in trace.patch_in])
            prompt_sum = P if prompt_sum is None else prompt_sum + P
            patch_sum = E if patch_sum is None else patch_sum + E
            count += len(batch)
    prompt_mean, patch_mean = prompt_sum / count, patch_sum / count
    out = np.zeros((depth, depth))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for i in range(depth):
            for j in range(depth):
                out[i, j] = linear_cka(prompt_mean[i].T, patch_mean[j].T)
    return out


@dataclass
class NmiCurve:
    """NMI per (epoch, layer) for one run."""

    values: dict[int, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def add(self, epoch: int, per_layer) -> None:
        self.values[int(epoch)] = np.asarray(per_layer, dtype=np.float64)

    @property
    def epochs(self) -> list[int]:
        return sorted(self.values)

    def as_array(self) -> np.ndarray:
        return np.stack([self.values[e] for e in self.epochs])

    def rows(self):
        for e in self.epochs:
            for layer, v in enumerate(self.values[e], start=1):
                yield e, layer, float(v)


def write_curve_csv(path, rows) -> None:
    """CSV with columns epoch, layer, value."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "layer", "value"])
        for e, layer, v in rows:
            w.writerow([e, layer, f"{v:.10g}"])


def read_curve_csv(path) -> list[tuple[int, int, float]]:
    with Path(path).open() as fh:
        return [(int(r["epoch"]), int(r["layer"]), float(r["value"])) for r in csv.DictReader(fh)]


def write_summary_json(path, summary: dict) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True, default=_jsonable))


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(f"not JSON serializable: {type(x)}")
