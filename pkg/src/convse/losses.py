"""Cosine similarity, hardest-negative mining and the six batch losses.

Every loss works on the N x N cross-modal similarity matrix ``S`` of a
mini-batch, where ``S[i, j]`` compares image ``i`` with caption ``j`` and the
diagonal holds the positive pairs. A loss computes its mean per-pair value
together with ``dL/dS``; the gradient is then pushed back through the cosine
normalization to the unnormalized embeddings.

Kinds:

* ``SH``         sum of hinges over all in-batch negatives (VSE)
* ``MH``         hinge on the hardest negative only (VSE++)
* ``CSN``        softmax cross-entropy over all in-batch captions / images (ConVSE)
* ``CMN_TILDE``  log-ratio against the hardest negative, unclamped
* ``CMN``        margin-shifted, clamped version of ``CMN_TILDE`` (ConVSE++)
* ``MVN``        softmax over negatives from both modalities
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np

from .errors import ConfigError, NoNegativesError, ShapeError
from .model import EmbeddingNetwork, backward, forward
from .numerics import normalize_backward, row_l2_normalize


class LossKind(str, Enum):
    SH = "SH"
    MH = "MH"
    CSN = "CSN"
    CMN_TILDE = "CMN_TILDE"
    CMN = "CMN"
    MVN = "MVN"

    @classmethod
    def parse(cls, name: str) -> "LossKind":
        if isinstance(name, cls):
            return name
        aliases = {"VSE": "SH", "VSE++": "MH", "CONVSE": "CSN", "CONVSE++": "CMN", "CMN~": "CMN_TILDE"}
        key = str(name).strip().upper().replace("-", "_")
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ConfigError(f"unknown loss kind {name!r}; choose from {[k.value for k in cls]}") from None


_USES_MARGIN = {LossKind.SH, LossKind.MH, LossKind.CMN}
_USES_TEMPERATURE = {LossKind.CSN, LossKind.CMN_TILDE, LossKind.CMN, LossKind.MVN}


@dataclass(frozen=True)
class LossConfig:
    kind: LossKind = LossKind.CMN
    margin: float = 0.2
    temperature: float = 0.1
    # treat captions of the same image as non-negatives of each other
    mask_same_image: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", LossKind.parse(self.kind))
        if not np.isfinite(self.margin) or self.margin < 0:
            raise ConfigError(f"margin must be >= 0, got {self.margin}")
        if not np.isfinite(self.temperature) or self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")

    @property
    def uses_margin(self) -> bool:
        return self.kind in _USES_MARGIN

    @property
    def uses_temperature(self) -> bool:
        return self.kind in _USES_TEMPERATURE


@dataclass
class SimilarityMatrix:
    S: np.ndarray
    unit_img: np.ndarray | None = None
    unit_txt: np.ndarray | None = None
    norms_img: np.ndarray | None = None
    norms_txt: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.S.shape[0]


@dataclass
class HardNegatives:
    c_star: np.ndarray  # hardest caption per image anchor (row argmax)
    i_star: np.ndarray  # hardest image per caption anchor (column argmax)


@dataclass
class LossOutput:
    value: float
    grad_S: np.ndarray
    grad_ZI: np.ndarray | None = None
    grad_ZC: np.ndarray | None = None


def similarity_matrix(z_img: np.ndarray, z_txt: np.ndarray) -> SimilarityMatrix:
    if z_img.ndim != 2 or z_img.shape != z_txt.shape:
        raise ShapeError(f"embedding batches must share shape (N, d), got {z_img.shape} and {z_txt.shape}")
    u_img, n_img = row_l2_normalize(z_img, modality="image")
    u_txt, n_txt = row_l2_normalize(z_txt, modality="caption")
    # row_l2_normalize rejects non-finite norms, so S is finite here; that matters
    # because the hinge masks compare with > 0 and would silently drop NaN entries
    return SimilarityMatrix(u_img @ u_txt.T, u_img, u_txt, n_img, n_txt)


@lru_cache(maxsize=64)
def _off_diagonal(n: int) -> np.ndarray:
    mask = ~np.eye(n, dtype=bool)
    mask.flags.writeable = False
    return mask


def negative_mask(n: int, groups=None) -> np.ndarray:
    """``mask[i, k]`` is True when caption k is a negative for image i (and vice versa)."""
    if groups is None:
        return _off_diagonal(n)
    g = np.asarray(groups)
    if g.shape != (n,):
        raise ShapeError(f"groups must have length {n}")
    return g[:, None] != g[None, :]


def _as_sim(sim) -> SimilarityMatrix:
    if isinstance(sim, SimilarityMatrix):
        return sim
    S = np.asarray(sim, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ShapeError(f"similarity matrix must be square, got {S.shape}")
    return SimilarityMatrix(S)


def _mine(S: np.ndarray, neg: np.ndarray):
    """Hardest negatives plus their similarities (-inf where an anchor has none)."""
    n = S.shape[0]
    masked = np.where(neg, S, -np.inf)
    # argmax returns the first maximum, i.e. the lowest index on ties
    c_star = np.argmax(masked, axis=1)
    i_star = np.argmax(masked, axis=0)
    rows = np.arange(n)
    best_i = masked[rows, c_star]
    best_c = masked[i_star, rows]
    c_star[best_i == -np.inf] = -1
    i_star[best_c == -np.inf] = -1
    return HardNegatives(c_star, i_star), best_i, best_c


def hardest_negatives(sim, neg: np.ndarray | None = None) -> HardNegatives:
    S = _as_sim(sim).S
    n = S.shape[0]
    if n < 2:
        raise NoNegativesError("hard-negative mining needs a batch of at least 2 pairs")
    return _mine(S, negative_mask(n) if neg is None else neg)[0]


def _require(cfg: LossConfig, kind: LossKind):
    if cfg.kind is not kind:
        raise ConfigError(f"expected a {kind.value} config, got {cfg.kind.value}")


def _require_negatives(n: int, kind: LossKind):
    if n < 2:
        raise NoNegativesError(f"{kind.value} needs a batch of at least 2 pairs")


def _logsumexp_rows(x: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Masked log-sum-exp per row and the matching softmax weights."""
    top = np.max(np.where(mask, x, -np.inf), axis=1, keepdims=True)
    e = np.where(mask, np.exp(x - top), 0.0)
    total = e.sum(axis=1, keepdims=True)
    return (np.log(total) + top)[:, 0], e / total


# -- per-kind value and dL/dS ------------------------------------------------

def _sh(S, cfg, neg, need_grad=True):
    n = S.shape[0]
    pos = np.diag(S)
    hinge_i = np.where(neg, cfg.margin + S - pos[:, None], 0.0)   # image anchors, along rows
    hinge_c = np.where(neg, cfg.margin + S - pos[None, :], 0.0)   # caption anchors, along columns
    value = (np.maximum(hinge_i, 0.0).sum() + np.maximum(hinge_c, 0.0).sum()) / n
    if not need_grad:
        return value, None
    act_i, act_c = hinge_i > 0, hinge_c > 0
    dS = (act_i.astype(float) + act_c.astype(float)) / n
    dS[np.diag_indices(n)] -= (act_i.sum(axis=1) + act_c.sum(axis=0)) / n
    return value, dS


def _hard_terms(S, neg, shift, scale):
    """Shared core of MH, CMN and CMN_TILDE: (terms_i, terms_c, hard) before clamping."""
    hard, best_i, best_c = _mine(S, neg)
    pos = S.diagonal()
    valid_i, valid_c = hard.c_star >= 0, hard.i_star >= 0
    term_i = (best_i + shift - pos) / scale
    term_c = (best_c + shift - pos) / scale
    # anchors without negatives contribute nothing
    term_i[~valid_i] = 0.0
    term_c[~valid_c] = 0.0
    return term_i, term_c, hard, valid_i, valid_c


def _hard_grad(n, hard, on_i, on_c, scale):
    rows = np.arange(n)
    dS = np.zeros((n, n))
    w_i = on_i / (n * scale)
    w_c = on_c / (n * scale)
    np.add.at(dS, (rows, np.where(hard.c_star >= 0, hard.c_star, 0)), w_i)
    np.add.at(dS, (np.where(hard.i_star >= 0, hard.i_star, 0), rows), w_c)
    dS[rows, rows] -= w_i + w_c
    return dS


def _mh_like(S, neg, margin, scale, need_grad):
    n = S.shape[0]
    term_i, term_c, hard, _, _ = _hard_terms(S, neg, margin, scale)
    value = (np.maximum(term_i, 0.0).sum() + np.maximum(term_c, 0.0).sum()) / n
    if not need_grad:
        return value, None
    act_i, act_c = term_i > 0, term_c > 0
    return value, _hard_grad(n, hard, act_i.astype(float), act_c.astype(float), scale)


def _mh(S, cfg, neg, need_grad=True):
    return _mh_like(S, neg, cfg.margin, 1.0, need_grad)


def _cmn(S, cfg, neg, need_grad=True):
    return _mh_like(S, neg, cfg.margin, cfg.temperature, need_grad)


def _cmn_tilde(S, cfg, neg, need_grad=True):
    n = S.shape[0]
    term_i, term_c, hard, valid_i, valid_c = _hard_terms(S, neg, 0.0, cfg.temperature)
    value = (term_i.sum() + term_c.sum()) / n
    if not need_grad:
        return value, None
    return value, _hard_grad(n, hard, valid_i.astype(float), valid_c.astype(float), cfg.temperature)


def _csn(S, cfg, neg, need_grad=True):
    n = S.shape[0]
    tau = cfg.temperature
    allowed = neg | np.eye(n, dtype=bool)
    X = S / tau
    lse_i, p_i = _logsumexp_rows(X, allowed)
    lse_c, p_c = _logsumexp_rows(X.T, allowed.T)
    pos = np.diag(X)
    value = ((lse_i - pos).sum() + (lse_c - pos).sum()) / n
    if not need_grad:
        return value, None
    dS = (p_i + p_c.T) / (n * tau)
    dS[np.diag_indices(n)] -= 2.0 / (n * tau)
    return value, dS


_SIM_LOSSES = {
    LossKind.SH: _sh,
    LossKind.MH: _mh,
    LossKind.CSN: _csn,
    LossKind.CMN_TILDE: _cmn_tilde,
    LossKind.CMN: _cmn,
}


def _through_cosine(sim: SimilarityMatrix, dS: np.ndarray | None):
    if sim.unit_img is None or dS is None:
        return None, None
    g_img = normalize_backward(sim.unit_img, sim.norms_img, dS @ sim.unit_txt)
    g_txt = normalize_backward(sim.unit_txt, sim.norms_txt, dS.T @ sim.unit_img)
    return g_img, g_txt


def _similarity_loss(sim, cfg: LossConfig, kind: LossKind, groups=None, need_grad=True) -> LossOutput:
    _require(cfg, kind)
    sim = _as_sim(sim)
    n = sim.n
    if kind is not LossKind.CSN:
        _require_negatives(n, kind)
    neg = negative_mask(n, groups if cfg.mask_same_image else None)
    value, dS = _SIM_LOSSES[kind](sim.S, cfg, neg, need_grad)
    g_img, g_txt = _through_cosine(sim, dS)
    return LossOutput(float(value), dS, g_img, g_txt)


def loss_sh(sim, cfg: LossConfig, groups=None) -> LossOutput:
    """Sum of hinges over every in-batch negative caption and image."""
    return _similarity_loss(sim, cfg, LossKind.SH, groups)


def loss_mh(sim, cfg: LossConfig, groups=None) -> LossOutput:
    """Hinge on the hardest in-batch negative in each direction."""
    return _similarity_loss(sim, cfg, LossKind.MH, groups)


def loss_csn(sim, cfg: LossConfig, groups=None) -> LossOutput:
    """Temperature-scaled cross-entropy; denominators include the positive."""
    return _similarity_loss(sim, cfg, LossKind.CSN, groups)


def loss_cmn_tilde(sim, cfg: LossConfig, groups=None) -> LossOutput:
    """Unclamped hardest-negative log-ratio. Goes negative once retrieval is correct."""
    return _similarity_loss(sim, cfg, LossKind.CMN_TILDE, groups)


def loss_cmn(sim, cfg: LossConfig, groups=None) -> LossOutput:
    """Clamped, margin-shifted hardest-negative loss; equals ``loss_mh / tau``."""
    return _similarity_loss(sim, cfg, LossKind.CMN, groups)


def loss_mvn(z_img: np.ndarray, z_txt: np.ndarray, cfg: LossConfig, groups=None,
             need_grad: bool = True) -> LossOutput:
    """Cross-entropy whose negatives come from both modalities.

    Each anchor is contrasted against the positive plus the other N-1
    items of the opposite modality and the other N-1 items of its own.
    """
    _require(cfg, LossKind.MVN)
    sim = similarity_matrix(z_img, z_txt)
    n, tau = sim.n, cfg.temperature
    neg = negative_mask(n, groups if cfg.mask_same_image else None)
    eye = np.eye(n, dtype=bool)
    S_ii = sim.unit_img @ sim.unit_img.T
    S_cc = sim.unit_txt @ sim.unit_txt.T

    def anchor_side(cross, within):
        # columns [0, n): cross-modal candidates, [n, 2n): same-modality ones
        X = np.hstack([cross, within]) / tau
        allowed = np.hstack([neg | eye, neg])
        lse, p = _logsumexp_rows(X, allowed)
        return (lse - np.diag(cross) / tau).sum(), p[:, :n], p[:, n:]

    v_i, p_cross_i, p_within_i = anchor_side(sim.S, S_ii)
    v_c, p_cross_c, p_within_c = anchor_side(sim.S.T, S_cc)
    value = (v_i + v_c) / n
    if not need_grad:
        return LossOutput(float(value), None)

    scale = 1.0 / (n * tau)
    dS = (p_cross_i + p_cross_c.T) * scale
    dS[np.diag_indices(n)] -= 2.0 * scale
    d_ii = p_within_i * scale
    d_cc = p_within_c * scale
    g_unit_img = dS @ sim.unit_txt + (d_ii + d_ii.T) @ sim.unit_img
    g_unit_txt = dS.T @ sim.unit_img + (d_cc + d_cc.T) @ sim.unit_txt
    return LossOutput(
        float(value), dS,
        normalize_backward(sim.unit_img, sim.norms_img, g_unit_img),
        normalize_backward(sim.unit_txt, sim.norms_txt, g_unit_txt),
    )


def compute_loss(z_img: np.ndarray, z_txt: np.ndarray, cfg: LossConfig, groups=None,
                 need_grad: bool = True) -> LossOutput:
    """Value and embedding gradients for whichever kind ``cfg`` selects.

    ``need_grad=False`` skips the backward arithmetic; gradient fields are then None.
    """
    if cfg.kind is LossKind.MVN:
        return loss_mvn(z_img, z_txt, cfg, groups, need_grad)
    sim = similarity_matrix(z_img, z_txt)
    return _similarity_loss(sim, cfg, cfg.kind, groups, need_grad)


def batch_loss(net: EmbeddingNetwork, image_feats: np.ndarray, text_feats: np.ndarray,
               cfg: LossConfig, groups=None) -> tuple[float, dict[str, np.ndarray]]:
    """Forward, loss and backward for one mini-batch of aligned pairs."""
    z_img, z_txt, cache = forward(net, image_feats, text_feats)
    out = compute_loss(z_img, z_txt, cfg, groups)
    return out.value, backward(net, cache, out.grad_ZI, out.grad_ZC)
