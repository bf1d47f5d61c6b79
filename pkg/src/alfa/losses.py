"""The seven training objectives and their weighted aggregate.

Components, in aggregation order: triplet self-supervision (alpha), soft
class-domain alignment (beta), domain classification (gamma), the three
pairwise cross-covariance penalties, and the class cross-entropy.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from . import tensor as T
from .model import ModelParams, head
from .tensor import Tensor

COMPONENTS = ("l_ssl", "l_i", "l_s", "l_ab", "l_ag", "l_bg", "l_c")


@dataclass(frozen=True)
class LossWeights:
    a: tuple = (1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    margin: float = 1.5
    mining_margin: float = 0.7
    tau: float = 2.0
    zeta: float = 0.9
    normalize_pc: bool = True
    # reproduce the leading minus sign printed on the covariance penalties
    printed_cov_sign: bool = False

    def __post_init__(self):
        if len(self.a) != 7:
            raise ValueError("need exactly seven loss coefficients")
        if self.tau <= 1:
            raise ValueError(f"temperature must exceed 1, got {self.tau}")
        if not 0 < self.zeta < 1:
            raise ValueError(f"zeta must lie in (0, 1), got {self.zeta}")
        if self.margin <= 0:
            raise ValueError(f"margin must be positive, got {self.margin}")

    def weight(self, component: str) -> float:
        return self.a[COMPONENTS.index(component)]


@dataclass
class LossReport:
    components: dict = field(default_factory=dict)  # name -> float, None when inactive
    total: float = 0.0
    unused: list = field(default_factory=list)

    def row(self) -> list:
        return [self.components.get(c) or 0.0 for c in COMPONENTS] + [self.total]


# ------------------------------------------------------------------------ KL


def _kl_rows(p: Tensor, q: Tensor) -> Tensor:
    """Row-wise KL(p || q); logs clamp at 1e-12 so 0 log 0 = 0 and q is floored."""
    return T.sum(p * (T.log(p) - T.log(q)), axis=1)


def kl_divergence(p, q) -> Tensor:
    p, q = T.as_tensor(p), T.as_tensor(q)
    if p.shape != q.shape:
        raise T.ShapeError("kl_divergence", p.shape, q.shape)
    if p.data.ndim == 1:
        p, q = T.reshape(p, (1, -1)), T.reshape(q, (1, -1))
    return T.sum(_kl_rows(p, q))


# ------------------------------------------------------------------- triplet


def ssl_triplet_loss(z_anchor: Tensor, z_pos: Tensor, z_neg: Tensor, margin: float = 1.5) -> Tensor:
    d_ap = T.norm(z_anchor - z_pos, axis=1)
    d_an = T.norm(z_anchor - z_neg, axis=1)
    return T.mean(T.hinge(T.add_scalar(d_ap - d_an, margin)))


def mine_semi_hard(z, pseudo_ids, mining_margin: float = 0.7, pairs=None) -> np.ndarray:
    """(anchor, positive, negative) row triples.

    For each positive pair the negative is the closest one with
    d(a,p) < d(a,n) < d(a,p) + mining_margin; with an empty band it is the
    closest negative overall. ``pairs`` defaults to every same-id row pair.
    """
    z = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    ids = np.asarray(pseudo_ids)
    if len(np.unique(ids)) < 2:
        raise ValueError("semi-hard mining needs at least two pseudo-classes")
    sq = (z**2).sum(axis=1)
    dist = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2 * z @ z.T, 0.0))
    if pairs is None:
        pairs = [(a, p) for a in range(len(ids)) for p in range(a + 1, len(ids)) if ids[a] == ids[p]]
    triples = []
    for a, p in pairs:
        cand = np.flatnonzero(ids != ids[a])
        d_an = dist[a, cand]
        d_ap = dist[a, p]
        band = (d_an > d_ap) & (d_an < d_ap + mining_margin)
        pick = cand[band][np.argmin(d_an[band])] if band.any() else cand[np.argmin(d_an)]
        triples.append((a, p, pick))
    return np.array(triples, dtype=int).reshape(-1, 3)


# ----------------------------------------------------------------- alignment


def soft_class_label(c: int, n_c: int, zeta: float = 0.9, normalize: bool = True) -> np.ndarray:
    """1 at ``c`` and ``zeta / (n_c - 1)`` elsewhere; divided by ``1 + zeta``
    when normalised, so the target class then gets ``1 / (1 + zeta)``."""
    if n_c < 2:
        raise ValueError("soft class labels need at least 2 classes")
    p = np.full(n_c, zeta / (n_c - 1))
    p[c] = 1.0
    return p / (1.0 + zeta) if normalize else p


def _class_mean_matrix(y, h, keys, n) -> np.ndarray:
    avg = np.zeros((len(keys), n))
    for r, (k, c) in enumerate(keys):
        members = (h == k) & (y == c)
        avg[r, members] = 1.0 / members.sum()
    return avg


def soft_confusion_rows(params: ModelParams, z_beta: Tensor, y, h, tau: float):
    """Tempered softmax of the aligner head on every (domain, class) mean
    embedding present in the batch. Returns (rows, keys)."""
    y, h = np.asarray(y), np.asarray(h)
    keys = sorted({(int(k), int(c)) for k, c in zip(h, y)})
    means = Tensor(_class_mean_matrix(y, h, keys, len(y))) @ z_beta
    return T.softmax(T.scale(head(params, "head_beta", means), 1.0 / tau)), keys


def soft_confusion_row(params: ModelParams, z_beta: Tensor, y, h, k: int, c: int, tau: float):
    """s_c^(k), or None when domain ``k`` holds no example of class ``c``."""
    y, h = np.asarray(y), np.asarray(h)
    if not np.any((h == k) & (y == c)):
        return None
    means = Tensor(_class_mean_matrix(y, h, [(k, c)], len(y))) @ z_beta
    return T.softmax(T.scale(head(params, "head_beta", means), 1.0 / tau))


def alignment_from_rows(rows: Tensor, keys, targets: np.ndarray) -> Tensor:
    """Average of the six-way symmetric KL over every (domain pair, class)
    term where both domains have the class. ``targets[c]`` is p_c."""
    index = {key: r for r, key in enumerate(keys)}
    domains = sorted({k for k, _ in keys})
    n_rows = len(keys)
    left, right = [], []
    n_terms = 0
    for h1, h2 in combinations(domains, 2):
        for c in range(len(targets)):
            if (h1, c) not in index or (h2, c) not in index:
                continue
            s1, s2, pc = index[(h1, c)], index[(h2, c)], n_rows + c
            left += [s1, s2, pc, s2, s1, pc]
            right += [s2, s1, s2, pc, pc, s1]
            n_terms += 1
    if n_terms == 0:
        warnings.warn("alignment loss: no (domain pair, class) term available", RuntimeWarning, stacklevel=2)
        return Tensor(0.0)
    table = T.concat([rows, Tensor(targets)], axis=0)
    kl = _kl_rows(T.take_rows(table, left), T.take_rows(table, right))
    return T.scale(T.sum(kl), 1.0 / (6 * n_terms))


def alignment_loss(params: ModelParams, z_beta: Tensor, y, h, weights: LossWeights) -> Tensor:
    if len(np.unique(h)) < 2:
        raise ValueError("alignment loss needs examples from at least 2 source domains")
    rows, keys = soft_confusion_rows(params, z_beta, y, h, weights.tau)
    n_c = params.n_classes
    targets = np.stack([soft_class_label(c, n_c, weights.zeta, weights.normalize_pc) for c in range(n_c)])
    return alignment_from_rows(rows, keys, targets)


# -------------------------------------------------------- supervised + covariance


def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=int)
    n, width = logits.shape
    if len(labels) != n:
        raise T.ShapeError("cross_entropy", logits.shape, labels.shape)
    if np.any(labels < 0) or np.any(labels >= width):
        raise ValueError(f"label out of range for {width} logits")
    onehot = np.zeros((n, width))
    onehot[np.arange(n), labels] = 1.0
    return T.neg(T.mean(T.sum(T.log_softmax(logits) * Tensor(onehot), axis=1)))


def specific_loss(logits_gamma: Tensor, h) -> Tensor:
    return cross_entropy(logits_gamma, h)


def classification_loss(logits_c: Tensor, y) -> Tensor:
    return cross_entropy(logits_c, y)


def cross_covariance(z_a: Tensor, z_b: Tensor) -> Tensor:
    n = z_a.shape[0]
    if n < 2:
        raise ValueError("covariance needs a batch of at least 2")
    if z_b.shape[0] != n:
        raise T.ShapeError("cross_covariance", z_a.shape, z_b.shape)
    return T.scale(T.center(z_a, axis=0).T @ T.center(z_b, axis=0), 1.0 / (n - 1))


def cov_loss(z_a: Tensor, z_b: Tensor, printed_sign: bool = False) -> Tensor:
    """Frobenius norm of the empirical cross-covariance (minimised)."""
    value = T.frobenius_norm(cross_covariance(z_a, z_b))
    return T.neg(value) if printed_sign else value


# ------------------------------------------------------------------ aggregate


def total_loss(components: dict, weights: LossWeights):
    """Weighted sum over the active components, in the fixed order.

    Returns ``(total_tensor, LossReport)``; ``LossReport.total`` is the value
    of ``total_tensor``.
    """
    total = None
    report = LossReport()
    for name, a in zip(COMPONENTS, weights.a):
        value = components.get(name)
        if value is None:
            report.components[name] = None
            report.unused.append(name)
            continue
        report.components[name] = value.item()
        term = T.scale(value, a)
        total = term if total is None else total + term
    if total is None:
        total = Tensor(0.0)
    report.total = total.item()
    return total, report
