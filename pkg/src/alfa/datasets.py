"""Multi-domain datasets: a synthetic stain-shift generator, an on-disk loader,
leave-one-domain-out and meta-train/meta-test splits, and batch streams."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .augment import hed_jitter, hed_to_rgb
from .tensor import load_tensor, save_tensor

DEFAULT_THETAS = (0.0, 0.01, 0.05, 0.5)


def derive_rng(seed, *tags) -> np.random.Generator:
    """Independent generator for ``(seed, *tags)``; tags are non-negative ints."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, tags)]))


@dataclass
class DomainDataset:
    images: np.ndarray  # (N, 3, H, W)
    y: np.ndarray
    h: np.ndarray
    n_classes: int
    n_domains: int
    domain_names: list = field(default_factory=list)
    class_names: list = field(default_factory=list)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=int)
        self.h = np.asarray(self.h, dtype=int)
        if not self.domain_names:
            self.domain_names = [f"domain_{k}" for k in range(self.n_domains)]
        if not self.class_names:
            self.class_names = [f"class_{c}" for c in range(self.n_classes)]
        if len(self.images) != len(self.y) or len(self.y) != len(self.h):
            raise ValueError("images, y and h must have equal length")
        if np.any(self.y < 0) or np.any(self.y >= self.n_classes):
            raise ValueError("class label out of range")
        if np.any(self.h < 0) or np.any(self.h >= self.n_domains):
            raise ValueError("domain label out of range")
        for k in range(self.n_domains):
            present = np.unique(self.y[self.h == k])
            if len(present) < 2:
                raise ValueError(f"domain {self.domain_names[k]!r} holds fewer than 2 classes")

    def __len__(self):
        return len(self.y)

    @property
    def image_shape(self) -> tuple:
        return self.images.shape[1:]

    def domain_indices(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.h == k)


@dataclass
class LodoSplit:
    target: int
    sources: list
    train: dict  # domain -> indices
    val: dict
    val_frac: float

    def train_indices(self) -> np.ndarray:
        return np.concatenate([self.train[k] for k in self.sources])

    def val_indices(self) -> np.ndarray:
        return np.concatenate([self.val[k] for k in self.sources])


@dataclass
class MetaSplit:
    tr: dict
    te: dict


# ----------------------------------------------------------------- synthesis


def _draw_base_hed(rng: np.random.Generator, label: int, n_classes: int, size: int) -> np.ndarray:
    """Stain concentrations of one base tile: eosin texture plus hematoxylin
    ellipses. The class shifts the nucleus count range (neighbouring classes
    overlap by one) and the elongation; size, orientation and position are
    nuisance variables."""
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    noise = rng.normal(0.0, 1.0, (size, size))
    # cheap smoothing: average with shifted copies
    smooth = (noise + np.roll(noise, 1, 0) + np.roll(noise, 1, 1) + np.roll(noise, (1, 1), (0, 1))) / 4
    hed = np.zeros((3, size, size))
    hed[1] = 0.12 + 0.03 * smooth

    aspect = 1.0 + 0.8 * label / max(n_classes - 1, 1)
    count = 1 + 2 * label + rng.integers(0, 3)
    area = (size / 8.0) ** 2
    for _ in range(count):
        r_minor = np.sqrt(area / aspect) * rng.uniform(0.8, 1.2)
        r_major = r_minor * aspect
        phi = rng.uniform(0, np.pi)
        cy, cx = rng.uniform(0.15 * size, 0.85 * size, size=2)
        dy, dx = rows - cy, cols - cx
        u = dx * np.cos(phi) + dy * np.sin(phi)
        v = -dx * np.sin(phi) + dy * np.cos(phi)
        inside = (u / r_major) ** 2 + (v / r_minor) ** 2
        hed[0] += 0.45 * np.exp(-2.0 * np.maximum(inside - 0.6, 0.0) ** 2) * (inside < 1.6)
    hed[0] += 0.02 * np.abs(smooth)
    return hed


def synth_base_image(seed, domain: int, index: int, label: int, n_classes: int, size: int) -> np.ndarray:
    rng = derive_rng(seed, 1, domain, index)
    return np.clip(hed_to_rgb(_draw_base_hed(rng, label, n_classes, size)), 0.0, 1.0)


def synth_generate(
    n_per_domain: int,
    thetas: Sequence[float] = DEFAULT_THETAS,
    n_classes: int = 2,
    image_size: int = 16,
    seed: int = 0,
) -> DomainDataset:
    """One domain per jitter magnitude; every image of domain k gets a single
    HED jitter draw of strength ``thetas[k]`` on top of a class-driven tile."""
    if image_size < 8:
        raise ValueError(f"image_size must be >= 8, got {image_size}")
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    if len(set(thetas)) != len(thetas):
        raise ValueError(f"thetas must be distinct, got {list(thetas)}")
    if n_per_domain < 2 * n_classes:
        raise ValueError("n_per_domain too small to hold every class twice")
    images, ys, hs = [], [], []
    for k, theta in enumerate(thetas):
        labels = np.arange(n_per_domain) % n_classes
        derive_rng(seed, 0, k).shuffle(labels)
        for i, c in enumerate(labels):
            base = synth_base_image(seed, k, i, int(c), n_classes, image_size)
            images.append(hed_jitter(base, theta, derive_rng(seed, 2, k, i)))
            ys.append(c)
            hs.append(k)
    return DomainDataset(
        images=np.stack(images),
        y=np.array(ys),
        h=np.array(hs),
        n_classes=n_classes,
        n_domains=len(thetas),
        domain_names=[f"theta_{t:g}" for t in thetas],
    )


# --------------------------------------------------------------------- splits


def _stratified_take(idx: np.ndarray, labels: np.ndarray, frac: float, rng, min_each: int = 0):
    """Split ``idx`` into (taken, rest) with ``taken`` holding ~frac of every
    class; the total is round(frac * n), remainders go by largest fraction."""
    classes = np.unique(labels)
    counts = np.array([np.sum(labels == c) for c in classes])
    exact = frac * counts
    take = np.floor(exact).astype(int)
    left = int(np.floor(frac * counts.sum() + 0.5)) - take.sum()
    order = np.argsort(-(exact - take), kind="stable")
    for j in order[: max(left, 0)]:
        take[j] += 1
    take = np.clip(take, min_each, counts - min_each)
    taken, rest = [], []
    for c, n_take in zip(classes, take):
        members = idx[labels == c]
        members = members[rng.permutation(len(members))]
        taken.append(members[:n_take])
        rest.append(members[n_take:])
    return np.sort(np.concatenate(taken)), np.sort(np.concatenate(rest))


def lodo_split(ds: DomainDataset, target: int, val_frac: float = 0.2, seed: int = 0) -> LodoSplit:
    if not 0 <= target < ds.n_domains:
        raise ValueError(f"target {target} out of range for {ds.n_domains} domains")
    if ds.n_domains < 2:
        raise ValueError("leave-one-domain-out needs at least 2 domains")
    if not 0 < val_frac < 0.5:
        raise ValueError(f"val_frac must lie in (0, 0.5), got {val_frac}")
    sources = [k for k in range(ds.n_domains) if k != target]
    train, val = {}, {}
    for k in sources:
        idx = ds.domain_indices(k)
        val[k], train[k] = _stratified_take(idx, ds.y[idx], val_frac, derive_rng(seed, 3, k))
    return LodoSplit(target, sources, train, val, val_frac)


def meta_split(split: LodoSplit, labels: np.ndarray, frac_tr: float = 0.5, seed: int = 0, epoch: int = 0) -> MetaSplit:
    """Disjoint, class-stratified meta-train/meta-test halves of every source
    domain's training indices; ``epoch`` derives a fresh partition."""
    if not 0 < frac_tr < 1:
        raise ValueError(f"frac_tr must lie in (0, 1), got {frac_tr}")
    tr, te = {}, {}
    for k in split.sources:
        idx = split.train[k]
        lab = labels[idx]
        _, counts = np.unique(lab, return_counts=True)
        if counts.min() < 2:
            raise ValueError(f"source domain {k} has a class with fewer than 2 examples")
        tr[k], te[k] = _stratified_take(idx, lab, frac_tr, derive_rng(seed, 4, epoch, k), min_each=1)
    return MetaSplit(tr, te)


def batch_iter(
    indices: np.ndarray,
    batch: int = 32,
    seed: int = 0,
    domains: np.ndarray | None = None,
    n_batches: int | None = None,
) -> Iterator[np.ndarray]:
    """Endless (or ``n_batches``-long) stream of index batches.

    With ``domains`` given, each batch draws near-equal counts from every
    domain present; each domain's pool is reshuffled under a derived seed each
    time it is exhausted. Without it, batches walk reshuffled passes over all
    indices. A batch larger than the data yields the whole (shuffled) set.
    """
    indices = np.asarray(indices)
    if batch < 1:
        raise ValueError("batch must be >= 1")
    if domains is None:
        streams = {0: indices}
        order = [0]
    else:
        domains = np.asarray(domains)
        order = sorted(np.unique(domains).tolist())
        if batch < 2 or len(order) < 2:
            raise ValueError("domain-stratified batches need batch >= 2 and >= 2 domains")
        streams = {d: indices[domains == d] for d in order}

    passes = {d: 0 for d in order}
    queues = {d: np.zeros(0, dtype=indices.dtype) for d in order}

    def pull(d, n):
        out = []
        while n > 0:
            if len(queues[d]) == 0:
                pool = streams[d]
                queues[d] = pool[derive_rng(seed, 5, d, passes[d]).permutation(len(pool))]
                passes[d] += 1
            got = queues[d][:n]
            queues[d] = queues[d][n:]
            out.append(got)
            n -= len(got)
        return np.concatenate(out)

    step = 0
    while n_batches is None or step < n_batches:
        if domains is None:
            b = pull(0, min(batch, len(indices)))
        else:
            base, extra = divmod(batch, len(order))
            parts = []
            for j, d in enumerate(order):
                want = base + (1 if (j - step) % len(order) < extra else 0)
                parts.append(pull(d, min(want, len(streams[d]))))
            b = np.concatenate(parts)
        yield b
        step += 1


# ---------------------------------------------------------------------- disk


def save_image_dir(ds: DomainDataset, root) -> None:
    root = Path(root)
    for i, (img, c, k) in enumerate(zip(ds.images, ds.y, ds.h)):
        d = root / ds.domain_names[k] / ds.class_names[c]
        d.mkdir(parents=True, exist_ok=True)
        save_tensor(d / f"{i:06d}.alfa", img)


def load_image_dir(root) -> DomainDataset:
    """Read ``root/<domain>/<class>/<file>.alfa``; names map to indices in
    sorted order."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"{root}: no such directory")
    domains = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not domains:
        raise ValueError(f"{root}: no domain directories")
    classes = None
    images, ys, hs = [], [], []
    for k, dname in enumerate(domains):
        present = sorted(p.name for p in (root / dname).iterdir() if p.is_dir())
        if classes is None:
            classes = present
        elif present != classes:
            raise ValueError(f"domain {dname!r} has classes {present}, expected {classes}")
        for c, cname in enumerate(classes):
            for f in sorted((root / dname / cname).glob("*.alfa")):
                images.append(load_tensor(f))
                ys.append(c)
                hs.append(k)
    if not images:
        raise ValueError(f"{root}: no .alfa files found")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ValueError(f"{root}: mixed image shapes {sorted(shapes)}")
    return DomainDataset(
        images=np.stack(images),
        y=np.array(ys),
        h=np.array(hs),
        n_classes=len(classes),
        n_domains=len(domains),
        domain_names=domains,
        class_names=classes,
    )
