"""Semantic enhancements: embedding alignment (FRE) and field-guided interactions (FIE).

All losses here are batch means, so their weights do not depend on the batch
size.  Each loss returns its gradients alongside the value; the model layer
chains them into parameter gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# candidate values for both enhancement weights
LAMBDA_GRID = (0.01, 0.05, 0.1, 0.3, 0.5, 0.7, 1.0)
FRE_VARIANTS = ("kl", "mse", "cl")
FIE_MODES = ("off", "explicit", "implicit")


@dataclass(frozen=True)
class FreConfig:
    lambda_kl: float = 0.0
    variant: str = "kl"
    cl_temperature: float = 0.02

    def __post_init__(self):
        if not self.lambda_kl >= 0:
            raise ValueError(f"lambda_kl must be >= 0, got {self.lambda_kl}")
        if self.variant not in FRE_VARIANTS:
            raise ValueError(f"unknown alignment variant {self.variant!r}; expected one of {FRE_VARIANTS}")
        if not self.cl_temperature > 0:
            raise ValueError(f"cl_temperature must be > 0, got {self.cl_temperature}")

    @property
    def active(self) -> bool:
        return self.lambda_kl > 0


@dataclass(frozen=True)
class FieConfig:
    lambda_fm: float = 0.0
    mode: str = "off"

    def __post_init__(self):
        if not self.lambda_fm >= 0:
            raise ValueError(f"lambda_fm must be >= 0, got {self.lambda_fm}")
        if self.mode not in FIE_MODES:
            raise ValueError(f"unknown FIE mode {self.mode!r}; expected one of {FIE_MODES}")

    @property
    def active(self) -> bool:
        return self.mode != "off" and self.lambda_fm > 0


def check_lambda_grid(values, name="lambda"):
    """Reject weights outside :data:`LAMBDA_GRID`."""
    bad = [v for v in values if not any(np.isclose(v, g, rtol=0, atol=1e-12) for g in LAMBDA_GRID)]
    if bad:
        raise ValueError(f"{name} values {bad} are not in the tuning grid {LAMBDA_GRID}")
    return [float(v) for v in values]


def softmax_normalize(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    z = np.exp(v - v.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def log_softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    shifted = v - v.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _softmax_backward(s: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return s * (grad - np.sum(s * grad, axis=-1, keepdims=True))


def kl_terms(E: np.ndarray, H_adapted: np.ndarray) -> np.ndarray:
    """Per-(instance, field) KL(softmax(e_ik) || softmax(h'_k)), shape (B, K)."""
    logp = log_softmax(E)
    logq = log_softmax(H_adapted)
    return np.sum(np.exp(logp) * (logp - logq[None]), axis=-1)


def _kl(E, Hp):
    B = E.shape[0]
    logp = log_softmax(E)
    logq = log_softmax(Hp)
    p, q = np.exp(logp), np.exp(logq)
    terms = np.sum(p * (logp - logq[None]), axis=-1)
    dE = p * (logp - logq[None] - terms[..., None]) / B
    dHp = (B * q - p.sum(axis=0)) / B
    return terms.sum() / B, dE, dHp


def _mse(E, Hp):
    B = E.shape[0]
    p, q = softmax_normalize(E), softmax_normalize(Hp)
    diff = p - q[None]
    loss = np.sum(diff * diff) / B
    dp = 2.0 * diff / B
    dq = -dp.sum(axis=0)
    return loss, _softmax_backward(p, dp), _softmax_backward(q, dq)


def _cl(E, Hp, tau):
    # each normalized feature embedding is contrasted against all K field targets
    B, K, _ = E.shape
    p, q = softmax_normalize(E), softmax_normalize(Hp)
    pnorm = np.linalg.norm(p, axis=-1, keepdims=True)
    qnorm = np.linalg.norm(q, axis=-1, keepdims=True)
    pn, qn = p / pnorm, q / qnorm
    C = np.einsum("bkd,ld->bkl", pn, qn)
    logP = log_softmax(C / tau)
    diag = np.arange(K)
    loss = -logP[:, diag, diag].sum() / B
    dZ = np.exp(logP)
    dZ[:, diag, diag] -= 1.0
    dC = dZ / (tau * B)
    dpn = np.einsum("bkl,ld->bkd", dC, qn)
    dqn = np.einsum("bkl,bkd->ld", dC, pn)
    dp = (dpn - np.sum(dpn * pn, axis=-1, keepdims=True) * pn) / pnorm
    dq = (dqn - np.sum(dqn * qn, axis=-1, keepdims=True) * qn) / qnorm
    return loss, _softmax_backward(p, dp), _softmax_backward(q, dq)


def fre_loss(E: np.ndarray, H_adapted: np.ndarray, cfg: FreConfig):
    """Alignment loss between looked-up embeddings ``E`` (B, K, D) and adapted field rows (K, D).

    Returns ``(loss, dE, dH_adapted)``; the loss is unweighted (``lambda_kl``
    is applied by :func:`total_loss`) but an inactive config yields zeros.
    """
    E = np.asarray(E, dtype=np.float64)
    if E.ndim != 3 or H_adapted.shape != E.shape[1:]:
        raise ValueError(f"shape mismatch: E {E.shape}, H_adapted {H_adapted.shape}")
    if not cfg.active:
        return 0.0, np.zeros_like(E), np.zeros_like(H_adapted)
    if cfg.variant == "kl":
        return _kl(E, H_adapted)
    if cfg.variant == "mse":
        return _mse(E, H_adapted)
    return _cl(E, H_adapted, cfg.cl_temperature)


def pair_gram(x: np.ndarray, E: np.ndarray) -> np.ndarray:
    """``G[b, k, l] = x_bk x_bl <e_bk, e_bl>`` for a batch."""
    V = x[..., None] * E
    return np.einsum("bkd,bld->bkl", V, V)


def upper_pair_sum(G: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """Sum of ``G[:, k, l] * weights[k, l]`` over pairs ``k < l``."""
    K = G.shape[-1]
    W = np.triu(np.ones((K, K)) if weights is None else np.asarray(weights, dtype=np.float64), 1)
    return np.einsum("bkl,kl->b", G, W)


def fie_term_explicit(x: np.ndarray, E: np.ndarray, Mprime: np.ndarray, cfg: FieConfig) -> np.ndarray:
    """Additive logit term ``lambda_fm * sum_{k<l} x_k x_l <e_k, e_l> m'_kl`` per instance."""
    if cfg.lambda_fm == 0 or cfg.mode == "off":
        return np.zeros(E.shape[0])
    return cfg.lambda_fm * upper_pair_sum(pair_gram(x, E), Mprime)


def fie_plugin_implicit(x: np.ndarray, E: np.ndarray, Mprime: np.ndarray) -> np.ndarray:
    """Unweighted plugin logit; the host fuses it as ``host + lambda_fm * plugin``."""
    return upper_pair_sum(pair_gram(x, E), Mprime)


def total_loss(bce: float, align: float, cfg: FreConfig) -> float:
    if cfg.lambda_kl == 0:
        return bce
    return bce + cfg.lambda_kl * align
