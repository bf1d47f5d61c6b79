"""Hold-out metrics, PCA embedding export, CSV interchange and the
aggregation of per-target results into mean / population-std summaries."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .model import EXTRACTORS, ModelParams, concat_features, encode, predict_proba

METRICS_FIELDS = ("target", "seed", "mask", "phase2", "accuracy", "auroc", "recall")
LOSS_FIELDS = ("step", "l_ssl", "l_i", "l_s", "l_ab", "l_ag", "l_bg", "l_c", "total")
EMBED_FIELDS = ("x", "y", "class", "domain", "extractor")
SUMMARY_TARGETS = ("mean", "std_pop")


def fmt(x) -> str:
    """Numbers with 6 significant digits; everything else via str."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.6g}"
    return str(x)


# ------------------------------------------------------------------- metrics


def _pair(preds, labels):
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"preds and labels differ in shape: {preds.shape} vs {labels.shape}")
    if len(labels) == 0:
        raise ValueError("metrics need at least one example")
    return preds, labels


def accuracy(preds, labels) -> float:
    preds, labels = _pair(preds, labels)
    return float(np.mean(preds == labels) * 100.0)


def macro_recall(preds, labels, n_classes: int | None = None) -> float:
    """Per-class recall averaged over the classes present in ``labels``."""
    preds, labels = _pair(preds, labels)
    classes = np.unique(labels)
    if n_classes is not None and classes.max() >= n_classes:
        raise ValueError(f"label {classes.max()} out of range for {n_classes} classes")
    recalls = [np.mean(preds[labels == c] == c) for c in classes]
    return float(np.mean(recalls) * 100.0)


def binary_auroc(scores, positive) -> float:
    """Mann-Whitney U / (n_pos * n_neg) with midranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both positives and negatives")
    ranks = rankdata(scores)
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auroc_macro(scores, labels) -> float:
    """One-vs-rest AUROC per class, averaged over classes that have both
    positives and negatives."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or len(scores) != len(labels):
        raise ValueError(f"scores must be (n, n_classes) with n = {len(labels)}, got {scores.shape}")
    per_class = []
    for c in range(scores.shape[1]):
        pos = labels == c
        if 0 < pos.sum() < len(labels):
            per_class.append(binary_auroc(scores[:, c], pos))
    if not per_class:
        raise ValueError("no class has both positive and negative examples")
    return float(np.mean(per_class) * 100.0)


def normalized_cross_cov(z_a, z_b) -> float:
    """||Cov(z_a, z_b)||_F / (||sigma_a|| ||sigma_b||); lies in [0, 1]."""
    z_a = np.asarray(z_a, dtype=np.float64)
    z_b = np.asarray(z_b, dtype=np.float64)
    if len(z_a) != len(z_b) or len(z_a) < 2:
        raise ValueError("need two equally long feature sets of at least 2 rows")
    a = z_a - z_a.mean(axis=0)
    b = z_b - z_b.mean(axis=0)
    cov = a.T @ b / (len(a) - 1)
    denom = np.linalg.norm(a.std(axis=0, ddof=1)) * np.linalg.norm(b.std(axis=0, ddof=1))
    if denom == 0:
        raise ValueError("a feature set has zero variance")
    return float(np.linalg.norm(cov) / denom)


# ----------------------------------------------------------------------- PCA


def pca_project(features, out_dim: int = 2, max_components: int = 50) -> np.ndarray:
    """Mean-centred projection onto the leading principal directions.

    Directions come from the covariance eigendecomposition, truncated to
    ``min(max_components, d)`` before keeping ``out_dim``. Each direction is
    signed so that its largest-magnitude loading is positive.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {x.shape}")
    n, d = x.shape
    if n < 3 or d < 2:
        raise ValueError(f"need n >= 3 and d >= 2, got {x.shape}")
    centred = x - x.mean(axis=0)
    if not np.any(np.abs(centred) > 1e-12 * max(1.0, np.abs(x).max())):
        raise ValueError("features have rank 0 (all rows identical)")
    evals, evecs = np.linalg.eigh(centred.T @ centred / (n - 1))
    order = np.argsort(evals)[::-1][: min(max_components, d)]
    basis = evecs[:, order[:out_dim]]
    lead = basis[np.argmax(np.abs(basis), axis=0), np.arange(basis.shape[1])]
    basis = basis * np.where(lead < 0, -1.0, 1.0)
    return centred @ basis


@dataclass
class EmbeddingDump:
    coords: np.ndarray  # (n, 2)
    y: np.ndarray
    h: np.ndarray
    extractor: str

    def __post_init__(self):
        if not len(self.coords) == len(self.y) == len(self.h):
            raise ValueError("coordinates, classes and domains must have equal length")


def embedding_dump(params: ModelParams, images, y, h, extractor: str = "all") -> EmbeddingDump:
    """2-D PCA of one extractor's features, or of the normalised
    concatenation for ``extractor='all'``."""
    view = params.detached()
    feats = encode(view, images)
    if extractor == "all":
        z = concat_features(view, feats).data
    elif extractor in EXTRACTORS:
        z = getattr(feats, extractor)
        if z is None:
            raise ValueError(f"extractor {extractor!r} is inactive in this model")
        z = z.data
    else:
        raise ValueError(f"unknown extractor {extractor!r}")
    return EmbeddingDump(pca_project(z), np.asarray(y), np.asarray(h), extractor)


# ------------------------------------------------------------------- results


@dataclass
class MetricsRow:
    target: str
    seed: int
    mask: str
    phase2: bool
    accuracy: float
    auroc: float
    recall: float

    def __post_init__(self):
        for name in ("accuracy", "auroc", "recall"):
            v = getattr(self, name)
            if not (0.0 <= v <= 100.0 or np.isnan(v)):
                raise ValueError(f"{name} must lie in [0, 100], got {v}")


def evaluate(params: ModelParams, images, labels, target: str, seed: int, mask: str, phase2: bool) -> MetricsRow:
    probs = predict_proba(params.detached(), images)
    preds = probs.argmax(axis=1)
    return MetricsRow(
        target=target,
        seed=seed,
        mask=mask,
        phase2=phase2,
        accuracy=accuracy(preds, labels),
        auroc=auroc_macro(probs, labels),
        recall=macro_recall(preds, labels, params.n_classes),
    )


def _pop(values) -> tuple:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std())


def summarize(rows: list) -> tuple:
    """(mean row, population-std row) over the given rows, per metric."""
    if not rows:
        raise ValueError("nothing to summarize")
    out = []
    for stat in (0, 1):
        vals = {m: _pop([getattr(r, m) for r in rows])[stat] for m in ("accuracy", "auroc", "recall")}
        seeds = sorted({r.seed for r in rows})
        out.append(
            MetricsRow(
                target=SUMMARY_TARGETS[stat],
                seed=seeds[0] if len(seeds) == 1 else -1,
                mask=rows[0].mask if len({r.mask for r in rows}) == 1 else "mixed",
                phase2=rows[0].phase2,
                **vals,
            )
        )
    return out[0], out[1]


def per_target_means(rows: list) -> dict:
    """(mask, phase2) -> {target: MetricsRow averaged over seeds}."""
    groups: dict = {}
    for r in rows:
        if r.target in SUMMARY_TARGETS:
            continue
        groups.setdefault((r.mask, r.phase2), {}).setdefault(r.target, []).append(r)
    out = {}
    for key, by_target in groups.items():
        out[key] = {}
        for t, rs in by_target.items():
            mean_row, _ = summarize(rs)
            mean_row.target = t
            out[key][t] = mean_row
    return out


def report_rows(rows: list) -> list:
    """Per (mask, phase2): one seed-averaged row per target, then the mean and
    population std across those target rows."""
    out = []
    for (mask, phase2), by_target in per_target_means(rows).items():
        targets = [by_target[t] for t in sorted(by_target)]
        out.extend(targets)
        out.extend(summarize(targets))
    return out


def ablation_table(rows: list) -> tuple:
    """Wide accuracy table: one row per mask, one column per target, then the
    average and population std across targets. Returns (header, rows)."""
    means = per_target_means(rows)
    targets = sorted({t for by_target in means.values() for t in by_target})
    header = ["mask", "phase2", *targets, "average", "std_pop"]
    table = []
    for (mask, phase2), by_target in means.items():
        accs = [by_target[t].accuracy for t in targets if t in by_target]
        mean, std = _pop(accs)
        table.append([mask, phase2, *[by_target[t].accuracy if t in by_target else float("nan") for t in targets], mean, std])
    return header, table


# ----------------------------------------------------------------------- CSV


def write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def write_metrics(path, rows: list) -> None:
    write_csv(path, METRICS_FIELDS, [[getattr(r, k) for k in METRICS_FIELDS] for r in rows])


def read_metrics(path) -> list:
    rows = []
    with open(path, newline="") as f:
        for rec in csv.DictReader(f):
            missing = set(METRICS_FIELDS) - set(rec)
            if missing:
                raise ValueError(f"{path}: missing columns {sorted(missing)}")
            rows.append(
                MetricsRow(
                    target=rec["target"],
                    seed=int(rec["seed"]),
                    mask=rec["mask"],
                    phase2=rec["phase2"] == "1",
                    accuracy=float(rec["accuracy"]),
                    auroc=float(rec["auroc"]),
                    recall=float(rec["recall"]),
                )
            )
    return rows


def write_losses(path, reports: list) -> None:
    write_csv(path, LOSS_FIELDS, [[i + 1, *r.row()] for i, r in enumerate(reports)])


def write_embeddings(path, dumps: list) -> None:
    rows = []
    for d in dumps:
        for (x, y), c, k in zip(d.coords, d.y, d.h):
            rows.append([float(x), float(y), int(c), int(k), d.extractor])
    write_csv(path, EMBED_FIELDS, rows)

