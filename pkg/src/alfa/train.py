"""Joint multi-loss training, the episodic meta update of the domain-specific
path, the pooled cross-entropy baseline, and the extractor ablation grid."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import tensor as T
from .augment import AugmentSpec, make_triplet_batch
from .datasets import DomainDataset, LodoSplit, MetaSplit, batch_iter, derive_rng, meta_split
from .losses import (
    COMPONENTS,
    LossReport,
    LossWeights,
    alignment_loss,
    classification_loss,
    cov_loss,
    mine_semi_hard,
    specific_loss,
    ssl_triplet_loss,
    total_loss,
)
from .model import (
    EXTRACTORS,
    FULL_MASK,
    EncoderConfig,
    FeatureTriple,
    ModelParams,
    concat_features,
    encode,
    flatten,
    head,
    init_params,
    mlp,
    predict_proba,
)
from .tensor import AdamState, Tensor, adam_step

log = logging.getLogger(__name__)

# ablation row order: single extractors, pairs, then the full model
ABLATION_MASKS = (
    (True, False, False),
    (False, True, False),
    (False, False, True),
    (True, True, False),
    (True, False, True),
    (False, True, True),
    (True, True, True),
)


def mask_label(mask) -> str:
    return "".join(n[0] if m else "-" for n, m in zip(("a", "b", "g"), mask))


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 3000
    batch: int = 32
    lr: float = 5e-5
    inner_lr: float | None = None
    mask: tuple = FULL_MASK
    weights: LossWeights = field(default_factory=LossWeights)
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    seed: int = 0
    phase2: bool = True
    interleave: bool = True
    sequential_phase2_share: float = 0.2
    meta_frac_tr: float = 0.5
    val_every: int = 50
    hidden: tuple = (128, 64)
    embed_dim: int = 32

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if len(self.mask) != 3 or not any(self.mask):
            raise ValueError(f"mask needs at least one active extractor, got {self.mask}")

    @property
    def inner(self) -> float:
        return self.lr if self.inner_lr is None else self.inner_lr


@dataclass
class RunResult:
    params: ModelParams  # best-validation snapshot
    final_params: ModelParams
    losses: list  # LossReport per Phase I step
    val_history: list  # (iteration, source-validation accuracy)
    meta_losses: list
    best_iteration: int
    domain_map: dict  # dataset domain index -> domain-head index
    frozen_violations: int = 0


class TrainingError(RuntimeError):
    pass


def active_components(mask) -> tuple:
    a, b, g = mask
    on = {
        "l_ssl": a,
        "l_i": b,
        "l_s": g,
        "l_ab": a and b,
        "l_ag": a and g,
        "l_bg": b and g,
        "l_c": True,
    }
    return tuple(c for c in COMPONENTS if on[c])


def _grads(params: dict) -> dict:
    out = {}
    for name, p in params.items():
        if p.grad is None:
            raise TrainingError(f"parameter {name} received no gradient")
        out[name] = p.grad
        p.grad = None
    return out


# -------------------------------------------------------------------- Phase I


def compute_losses(params: ModelParams, images, y, h_local, config: TrainConfig, rng) -> dict:
    """Every active component on one batch, as tracked scalars."""
    mask = params.mask
    w = config.weights
    n = len(images)
    x = flatten(images)
    comps = {}
    z = {}
    if mask[0]:
        trip = make_triplet_batch(images, config.augment, n, rng)
        both = mlp(params, "alpha", T.concat([x, flatten(trip.positives)], axis=0))
        z["alpha"] = T.take_rows(both, np.arange(n))
        ids = np.concatenate([np.arange(n), trip.anchor_idx])
        pairs = [(int(a), n + j) for j, a in enumerate(trip.anchor_idx)]
        triples = mine_semi_hard(both, ids, w.mining_margin, pairs)
        comps["l_ssl"] = ssl_triplet_loss(
            T.take_rows(both, triples[:, 0]),
            T.take_rows(both, triples[:, 1]),
            T.take_rows(both, triples[:, 2]),
            w.margin,
        )
    if mask[1]:
        z["beta"] = mlp(params, "beta", x)
        comps["l_i"] = alignment_loss(params, z["beta"], y, h_local, w)
    if mask[2]:
        z["gamma"] = mlp(params, "gamma", x)
        comps["l_s"] = specific_loss(head(params, "head_gamma", z["gamma"]), h_local)
    for comp, (p, q) in (("l_ab", ("alpha", "beta")), ("l_ag", ("alpha", "gamma")), ("l_bg", ("beta", "gamma"))):
        if p in z and q in z:
            comps[comp] = cov_loss(z[p], z[q], w.printed_cov_sign)
    feats = FeatureTriple(z.get("alpha"), z.get("beta"), z.get("gamma"))
    comps["l_c"] = classification_loss(head(params, "cls", concat_features(params, feats)), y)
    return comps


def phase1_step(params: ModelParams, images, y, h_local, config: TrainConfig, adam: AdamState, rng) -> LossReport:
    """One joint update of every parameter group present in ``params``."""
    comps = compute_losses(params, images, y, h_local, config, rng)
    total, report = total_loss(comps, config.weights)
    if total.requires_grad:
        T.backward(total)
    adam_step(params.tensors, _grads(params.tensors), adam)
    return report


# ------------------------------------------------------------------- Phase II


def first_order_meta_grad(
    f_tr: Callable[[dict], Tensor],
    f_te: Callable[[dict], Tensor],
    omega: dict,
    inner_lr: float,
):
    """One inner gradient step on the meta-train objective, then the gradient
    of the meta-test objective at the adapted point.

    ``omega`` maps names to arrays. Returns ``(meta_loss, meta_grad,
    omega_tilde, inner_loss)``; ``meta_grad`` is evaluated at ``omega_tilde``
    and is meant to be applied to ``omega`` (first-order approximation).
    """
    leaves = {k: T.leaf(v) for k, v in omega.items()}
    inner = f_tr(leaves)
    grads = T.backward(inner) if inner.requires_grad else {}
    adapted = {}
    for k, leaf in leaves.items():
        g = grads.get(leaf)
        adapted[k] = leaf.data - inner_lr * g if g is not None else leaf.data.copy()
    adapted_leaves = {k: T.leaf(v) for k, v in adapted.items()}
    outer = f_te(adapted_leaves)
    outer_grads = T.backward(outer) if outer.requires_grad else {}
    meta_grad = {}
    for k, leaf in adapted_leaves.items():
        g = outer_grads.get(leaf)
        meta_grad[k] = g if g is not None else np.zeros_like(leaf.data)
    return outer.item(), meta_grad, adapted, inner.item()


def omega_names(params: ModelParams) -> list:
    groups = ("gamma", "cls") if params.mask[2] else ("cls",)
    return list(params.group(*groups))


def _frozen_features(params: ModelParams, images) -> FeatureTriple:
    x = flatten(images)
    out = {}
    for name, active in zip(EXTRACTORS[:2], params.mask[:2]):
        if active:
            consts = {k: T.constant(v.data) for k, v in params.group(name).items()}
            view = ModelParams(params.config, params.n_classes, params.n_domains, params.mask, consts)
            out[name] = mlp(view, name, x)
    return FeatureTriple(out.get("alpha"), out.get("beta"), None)


def _meta_objective(params: ModelParams, images, y, frozen: FeatureTriple):
    x = flatten(images)

    def f(omega: dict) -> Tensor:
        view = ModelParams(params.config, params.n_classes, params.n_domains, params.mask, dict(omega))
        z_gamma = mlp(view, "gamma", x) if params.mask[2] else None
        feats = FeatureTriple(frozen.alpha, frozen.beta, z_gamma)
        return classification_loss(head(view, "cls", concat_features(view, feats)), y)

    return f


def phase2_meta_step(params: ModelParams, ds: DomainDataset, meta: MetaSplit, config: TrainConfig, adam: AdamState, rng):
    """Meta update of the domain-specific encoder and the classifier; the
    self-supervised and invariant encoders stay untouched.

    Returns the mean meta-test loss over the source domains used.
    """
    names = omega_names(params)
    omega = {k: params.tensors[k].data for k in names}
    total = {k: np.zeros_like(v) for k, v in omega.items()}
    losses = []
    # one meta step sees about one batch in total across source domains
    per_domain = max(2, config.batch // max(len(meta.tr), 1))
    for k in sorted(meta.tr):
        tr, te = meta.tr[k], meta.te[k]
        if len(te) == 0 or len(tr) == 0:
            log.warning("meta split of domain %s is empty; skipped", k)
            continue
        tr = tr[rng.permutation(len(tr))[:per_domain]]
        te = te[rng.permutation(len(te))[:per_domain]]
        f_tr = _meta_objective(params, ds.images[tr], ds.y[tr], _frozen_features(params, ds.images[tr]))
        f_te = _meta_objective(params, ds.images[te], ds.y[te], _frozen_features(params, ds.images[te]))
        loss, grad, _, _ = first_order_meta_grad(f_tr, f_te, omega, config.inner)
        losses.append(loss)
        for name in names:
            total[name] += grad[name]
    if not losses:
        return None
    grads = {name: g / len(losses) for name, g in total.items()}
    adam_step({k: params.tensors[k] for k in names}, grads, adam)
    return float(np.mean(losses))


# ---------------------------------------------------------------------- runs


def accuracy_on(params: ModelParams, ds: DomainDataset, idx) -> float:
    if len(idx) == 0:
        return float("nan")
    probs = predict_proba(params.detached(), ds.images[idx])
    return float(np.mean(probs.argmax(axis=1) == ds.y[idx]) * 100.0)


def _input_size(ds: DomainDataset) -> int:
    return int(np.prod(ds.image_shape))


def train_run(ds: DomainDataset, split: LodoSplit, config: TrainConfig) -> RunResult:
    """Phase I steps with interleaved (or trailing) meta steps; keeps the
    parameters with the best source-validation accuracy."""
    enc = EncoderConfig(_input_size(ds), tuple(config.hidden), config.embed_dim)
    domain_map = {k: j for j, k in enumerate(split.sources)}
    params = init_params(enc, ds.n_classes, len(split.sources), config.mask, config.seed)
    adam1 = AdamState(lr=config.lr)
    adam2 = AdamState(lr=config.lr)
    train_idx = split.train_indices()
    stream = batch_iter(train_idx, config.batch, config.seed, domains=ds.h[train_idx])
    step_rng = derive_rng(config.seed, 10)
    meta_rng = derive_rng(config.seed, 11)
    val_idx = split.val_indices()
    remap = np.vectorize(domain_map.get, otypes=[int])

    if config.phase2 and not config.interleave:
        n_phase1 = max(1, int(round(config.iterations * (1 - config.sequential_phase2_share))))
    else:
        n_phase1 = config.iterations

    losses, val_history, meta_losses = [], [], []
    best = (-1.0, 0, params.arrays())
    frozen_violations = 0
    frozen = params.group("alpha", "beta", "head_beta", "head_gamma")
    snapshot = {k: v.data.copy() for k, v in frozen.items()}
    for it in range(config.iterations):
        try:
            if it < n_phase1:
                b = next(stream)
                report = phase1_step(params, ds.images[b], ds.y[b], remap(ds.h[b]), config, adam1, step_rng)
                losses.append(report)
            run_meta = config.phase2 and (config.interleave or it >= n_phase1)
            if run_meta:
                for k, v in frozen.items():
                    np.copyto(snapshot[k], v.data)
                meta = meta_split(split, ds.y, config.meta_frac_tr, config.seed, epoch=it)
                meta_losses.append(phase2_meta_step(params, ds, meta, config, adam2, meta_rng))
                frozen_violations += sum(not np.array_equal(snapshot[k], v.data) for k, v in frozen.items())
        except Exception as exc:
            raise TrainingError(f"iteration {it}: {exc}") from exc
        if (it + 1) % config.val_every == 0 or it + 1 == config.iterations:
            acc = accuracy_on(params, ds, val_idx)
            val_history.append((it + 1, acc))
            if acc > best[0]:
                best = (acc, it + 1, params.arrays())
    final = params.clone()
    params.load_arrays(best[2])
    return RunResult(params, final, losses, val_history, meta_losses, best[1], domain_map, frozen_violations)


def erm_baseline_run(ds: DomainDataset, split: LodoSplit, config: TrainConfig) -> RunResult:
    """Single encoder + classifier trained by cross-entropy on pooled source
    data. Domain labels are never read."""
    enc = EncoderConfig(_input_size(ds), tuple(config.hidden), config.embed_dim)
    mask = (False, True, False)
    params = init_params(enc, ds.n_classes, 1, mask, config.seed, with_heads=False)
    adam = AdamState(lr=config.lr)
    train_idx = np.sort(split.train_indices())
    stream = batch_iter(train_idx, config.batch, config.seed)
    val_idx = np.sort(split.val_indices())
    losses, val_history = [], []
    best = (-1.0, 0, params.arrays())
    for it in range(config.iterations):
        b = next(stream)
        feats = encode(params, ds.images[b])
        loss = classification_loss(head(params, "cls", concat_features(params, feats)), ds.y[b])
        T.backward(loss)
        adam_step(params.tensors, _grads(params.tensors), adam)
        losses.append(LossReport({c: (loss.item() if c == "l_c" else None) for c in COMPONENTS}, loss.item()))
        if (it + 1) % config.val_every == 0 or it + 1 == config.iterations:
            acc = accuracy_on(params, ds, val_idx)
            val_history.append((it + 1, acc))
            if acc > best[0]:
                best = (acc, it + 1, params.arrays())
    final = params.clone()
    params.load_arrays(best[2])
    return RunResult(params, final, losses, val_history, [], best[1], {})


def ablation_matrix(ds: DomainDataset, split: LodoSplit, config: TrainConfig, masks=ABLATION_MASKS) -> list:
    """One run per extractor mask; returns ``(mask, RunResult)`` pairs."""
    return [(mask, train_run(ds, split, replace(config, mask=tuple(mask)))) for mask in masks]
