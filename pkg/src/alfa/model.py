"""Three MLP encoders (self-supervised, domain-invariant, domain-specific),
their heads, and the layer-normalised feature concatenation."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .tensor import Tensor, layer_norm

EXTRACTORS = ("alpha", "beta", "gamma")
FULL_MASK = (True, True, True)


@dataclass(frozen=True)
class EncoderConfig:
    input_size: int
    hidden: tuple = (128, 64)
    embed_dim: int = 32
    ln_eps: float = 1e-5

    @classmethod
    def wide_preset(cls, input_size: int) -> "EncoderConfig":
        return cls(input_size=input_size, hidden=(512,), embed_dim=512)


class FeatureTriple(NamedTuple):
    alpha: Tensor | None
    beta: Tensor | None
    gamma: Tensor | None


@dataclass
class ModelParams:
    config: EncoderConfig
    n_classes: int
    n_domains: int
    mask: tuple
    tensors: dict = field(default_factory=dict)

    def group(self, *prefixes) -> dict:
        return {k: v for k, v in self.tensors.items() if k.split(".")[0] in prefixes}

    def clone(self) -> "ModelParams":
        copied = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.tensors.items()}
        return ModelParams(self.config, self.n_classes, self.n_domains, self.mask, copied)

    def detached(self) -> "ModelParams":
        """Untracked view sharing the current arrays, for evaluation."""
        consts = {k: T.constant(v.data) for k, v in self.tensors.items()}
        return ModelParams(self.config, self.n_classes, self.n_domains, self.mask, consts)

    def arrays(self) -> dict:
        return {k: v.data.copy() for k, v in self.tensors.items()}

    def load_arrays(self, arrays: dict) -> None:
        for k, v in arrays.items():
            self.tensors[k].data = np.array(v, dtype=np.float64)

    def zero_grad(self) -> None:
        for p in self.tensors.values():
            p.grad = None


def _check_mask(mask) -> tuple:
    mask = tuple(bool(m) for m in mask)
    if len(mask) != 3 or not any(mask):
        raise ValueError(f"mask needs at least one active extractor, got {mask}")
    return mask


def init_params(
    config: EncoderConfig, n_classes: int, n_domains: int, mask=FULL_MASK, seed: int = 0, with_heads: bool = True
) -> ModelParams:
    """He-uniform weights, zero biases, unit layer-norm gains. Inactive
    extractors (and the heads reading them) are never created."""
    mask = _check_mask(mask)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 77]))
    tensors = {}

    def dense(prefix, fan_in, fan_out):
        bound = np.sqrt(6.0 / fan_in)
        tensors[f"{prefix}.w"] = Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), True, f"{prefix}.w")
        tensors[f"{prefix}.b"] = Tensor(np.zeros(fan_out), True, f"{prefix}.b")

    d = config.embed_dim
    widths = (config.input_size, *config.hidden, d)
    for name, active in zip(EXTRACTORS, mask):
        if not active:
            continue
        for i in range(len(widths) - 1):
            dense(f"{name}.{i}", widths[i], widths[i + 1])
    if mask[1] and with_heads:
        dense("head_beta.0", d, n_classes)
    if mask[2] and with_heads:
        dense("head_gamma.0", d, n_domains)
    for name, active in zip(EXTRACTORS, mask):
        if active:
            tensors[f"cls.ln_{name}.gain"] = Tensor(np.ones(d), True, f"cls.ln_{name}.gain")
            tensors[f"cls.ln_{name}.bias"] = Tensor(np.zeros(d), True, f"cls.ln_{name}.bias")
    dense("cls.0", sum(mask) * d, n_classes)
    return ModelParams(config, n_classes, n_domains, mask, tensors)


def mlp(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    n_layers = len(params.config.hidden) + 1
    p = params.tensors
    for i in range(n_layers):
        x = T.linear(x, p[f"{prefix}.{i}.w"], p[f"{prefix}.{i}.b"])
        if i < n_layers - 1:
            x = T.relu(x)
    return x


def flatten(images) -> Tensor:
    arr = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    return Tensor(arr.reshape(len(arr), -1))


def encode(params: ModelParams, images, which=None) -> FeatureTriple:
    """Independent forward passes of every active (or requested) encoder."""
    x = flatten(images)
    if x.shape[1] != params.config.input_size:
        raise T.ShapeError("encode", x.shape, (x.shape[0], params.config.input_size))
    which = which or [n for n, a in zip(EXTRACTORS, params.mask) if a]
    out = {n: None for n in EXTRACTORS}
    for name in which:
        out[name] = mlp(params, name, x)
    return FeatureTriple(**out)


def concat_features(params: ModelParams, feats: FeatureTriple, mask=None) -> Tensor:
    """Layer-normalise each active representation, then join them in
    alpha, beta, gamma order."""
    mask = _check_mask(params.mask if mask is None else mask)
    p = params.tensors
    parts = []
    for name, active, z in zip(EXTRACTORS, mask, feats):
        if not active:
            continue
        if z is None:
            raise ValueError(f"mask activates {name} but no {name} features were given")
        parts.append(layer_norm(z, p[f"cls.ln_{name}.gain"], p[f"cls.ln_{name}.bias"], params.config.ln_eps))
    return parts[0] if len(parts) == 1 else T.concat(parts, axis=1)


def head(params: ModelParams, name: str, x: Tensor) -> Tensor:
    p = params.tensors
    return T.linear(x, p[f"{name}.0.w"], p[f"{name}.0.b"])


def heads(params: ModelParams, feats: FeatureTriple, mask=None):
    """(domain-aligner logits, domain-classifier logits, class logits); the
    first two are None when their extractor is inactive."""
    mask = _check_mask(params.mask if mask is None else mask)
    width = params.tensors["cls.0.w"].shape[0]
    if sum(mask) * params.config.embed_dim != width:
        raise ValueError(f"mask {mask} gives classifier width {sum(mask) * params.config.embed_dim}, parameters expect {width}")
    lb = head(params, "head_beta", feats.beta) if mask[1] and feats.beta is not None else None
    lg = head(params, "head_gamma", feats.gamma) if mask[2] and feats.gamma is not None else None
    lc = head(params, "cls", concat_features(params, feats, mask))
    return lb, lg, lc


def predict_proba(params: ModelParams, images, batch: int = 256) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch):
        feats = encode(params, images[i : i + batch])
        logits = head(params, "cls", concat_features(params, feats))
        out.append(T.softmax(logits).data)
    return np.concatenate(out) if out else np.zeros((0, params.n_classes))


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(params: ModelParams, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for name, t in params.tensors.items():
        T.save_tensor(directory / f"{name}.alfa", t.data)
        lines.append(f"{name} {' '.join(str(s) for s in t.shape)}")
    cfg = params.config
    lines += [
        f"#config input_size={cfg.input_size} hidden={','.join(map(str, cfg.hidden))} embed_dim={cfg.embed_dim}",
        f"#model n_classes={params.n_classes} n_domains={params.n_domains} mask={''.join(str(int(m)) for m in params.mask)}",
    ]
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_checkpoint(directory) -> ModelParams:
    directory = Path(directory)
    names, meta = [], {}
    for line in (directory / "manifest.txt").read_text().splitlines():
        if line.startswith("#"):
            for item in line[1:].split()[1:]:
                k, v = item.split("=")
                meta[k] = v
        elif line.strip():
            names.append(line.split()[0])
    cfg = EncoderConfig(
        input_size=int(meta["input_size"]),
        hidden=tuple(int(h) for h in meta["hidden"].split(",") if h),
        embed_dim=int(meta["embed_dim"]),
    )
    mask = tuple(c == "1" for c in meta["mask"])
    tensors = {n: Tensor(T.load_tensor(directory / f"{n}.alfa"), True, n) for n in names}
    return ModelParams(cfg, int(meta["n_classes"]), int(meta["n_domains"]), mask, tensors)
