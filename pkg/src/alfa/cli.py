"""Command-line entry point: ``alfa <command> --out DIR [--config FILE] [--key value ...]``.

Commands: synth, train, lodo, ablate, embed, report. Settings come from a
plain-text ``key=value`` file and are overridden by flags. Exit status is 0 on
success, 2 on a configuration error and 1 on a runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import evaluation as E
from .augment import AugmentSpec
from .datasets import DomainDataset, load_image_dir, lodo_split, save_image_dir, synth_generate
from .losses import LossWeights
from .model import EXTRACTORS, load_checkpoint, save_checkpoint
from .train import ABLATION_MASKS, TrainConfig, erm_baseline_run, mask_label, train_run

log = logging.getLogger("alfa")

DEFAULTS = {
    "data": "",
    "n_per_domain": "400",
    "thetas": "0,0.01,0.05,0.5",
    "n_classes": "2",
    "image_size": "16",
    "data_seed": "0",
    "iterations": "3000",
    "batch": "32",
    "lr": "5e-5",
    "inner_lr": "",
    "mask": "111",
    "phase2": "1",
    "interleave": "1",
    "seed": "0",
    "seeds": "",
    "target": "",
    "val_frac": "0.2",
    "val_every": "50",
    "hidden": "128,64",
    "embed_dim": "32",
    "a": "1,1,1,1,1,1,1",
    "margin": "1.5",
    "mining_margin": "0.7",
    "tau": "2",
    "zeta": "0.9",
    "printed_cov_sign": "0",
    "hed_theta": "0.05",
    "baseline": "alfa",
    "checkpoint": "",
    "extractors": "alpha,beta,gamma,all",
}
COMMANDS = ("synth", "train", "lodo", "ablate", "embed", "report")


class ConfigError(ValueError):
    pass


# -------------------------------------------------------------------- config


def read_config_file(path) -> dict:
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from exc
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in DEFAULTS:
            raise ConfigError(f"{path}:{n}: unknown key {key!r}")
        out[key] = value
    return out


def _ints(s: str) -> tuple:
    return tuple(int(v) for v in s.split(",") if v.strip())


def _floats(s: str) -> tuple:
    return tuple(float(v) for v in s.split(",") if v.strip())


def _flag(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def resolve(settings: dict):
    """Typed ``(TrainConfig, extras)`` from string settings."""
    try:
        mask = tuple(c == "1" for c in settings["mask"])
        if len(settings["mask"]) != 3 or set(settings["mask"]) - {"0", "1"}:
            raise ValueError(f"mask must be three 0/1 digits, got {settings['mask']!r}")
        weights = LossWeights(
            a=_floats(settings["a"]),
            margin=float(settings["margin"]),
            mining_margin=float(settings["mining_margin"]),
            tau=float(settings["tau"]),
            zeta=float(settings["zeta"]),
            printed_cov_sign=_flag(settings["printed_cov_sign"]),
        )
        config = TrainConfig(
            iterations=int(settings["iterations"]),
            batch=int(settings["batch"]),
            lr=float(settings["lr"]),
            inner_lr=float(settings["inner_lr"]) if settings["inner_lr"] else None,
            mask=mask,
            weights=weights,
            augment=AugmentSpec(hed_theta=float(settings["hed_theta"])),
            seed=int(settings["seed"]),
            phase2=_flag(settings["phase2"]),
            interleave=_flag(settings["interleave"]),
            val_every=int(settings["val_every"]),
            hidden=_ints(settings["hidden"]),
            embed_dim=int(settings["embed_dim"]),
        )
        extras = {
            "data": settings["data"],
            "n_per_domain": int(settings["n_per_domain"]),
            "thetas": _floats(settings["thetas"]),
            "n_classes": int(settings["n_classes"]),
            "image_size": int(settings["image_size"]),
            "data_seed": int(settings["data_seed"]),
            "seeds": _ints(settings["seeds"]) or (config.seed,),
            "target": settings["target"],
            "val_frac": float(settings["val_frac"]),
            "baseline": settings["baseline"],
            "checkpoint": settings["checkpoint"],
            "extractors": [e for e in settings["extractors"].split(",") if e],
        }
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if extras["baseline"] not in ("alfa", "erm"):
        raise ConfigError(f"baseline must be 'alfa' or 'erm', got {extras['baseline']!r}")
    bad = set(extras["extractors"]) - {*EXTRACTORS, "all"}
    if bad:
        raise ConfigError(f"unknown extractors {sorted(bad)}")
    return config, extras


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="alfa", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", help="key=value settings file")
        if name == "report":
            p.add_argument("--runs", nargs="+", required=True, help="directories holding metrics.csv")
        for key in DEFAULTS:
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None)
    return parser


# ----------------------------------------------------------------- workflows


def load_dataset(extras: dict) -> DomainDataset:
    if extras["data"]:
        return load_image_dir(extras["data"])
    try:
        return synth_generate(
            extras["n_per_domain"],
            thetas=extras["thetas"],
            n_classes=extras["n_classes"],
            image_size=extras["image_size"],
            seed=extras["data_seed"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def target_indices(ds: DomainDataset, target: str) -> list:
    if target == "":
        return list(range(ds.n_domains))
    if target in ds.domain_names:
        return [ds.domain_names.index(target)]
    try:
        k = int(target)
    except ValueError:
        raise ConfigError(f"unknown target domain {target!r}; choose from {ds.domain_names}") from None
    if not 0 <= k < ds.n_domains:
        raise ConfigError(f"target index {k} out of range for {ds.n_domains} domains")
    return [k]


def write_config(path: Path, settings: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{k}={settings[k]}\n" for k in DEFAULTS))


def run_one(ds: DomainDataset, target: int, config: TrainConfig, extras: dict, out: Path) -> E.MetricsRow:
    """Train on the sources, evaluate on ``target`` and fill a run directory."""
    split = lodo_split(ds, target, extras["val_frac"], config.seed)
    erm = extras["baseline"] == "erm"
    log.info("run target=%s seed=%d mask=%s%s", ds.domain_names[target], config.seed, mask_label(config.mask), " (erm)" if erm else "")
    result = erm_baseline_run(ds, split, config) if erm else train_run(ds, split, config)
    out.mkdir(parents=True, exist_ok=True)
    E.write_losses(out / "losses.csv", result.losses)
    E.write_csv(out / "val.csv", ("step", "accuracy"), result.val_history)
    save_checkpoint(result.params, out / "checkpoint")
    idx = ds.domain_indices(target)
    row = E.evaluate(
        result.params,
        ds.images[idx],
        ds.y[idx],
        target=ds.domain_names[target],
        seed=config.seed,
        mask="erm" if erm else mask_label(config.mask),
        phase2=config.phase2 and not erm,
    )
    E.write_metrics(out / "metrics.csv", [row])
    return row


def cmd_synth(ds, config, extras, settings, out: Path) -> None:
    save_image_dir(ds, out / "data")
    write_config(out / "config.txt", settings)


def cmd_train(ds, config, extras, settings, out: Path) -> None:
    targets = target_indices(ds, extras["target"] or "0")
    write_config(out / "config.txt", settings)
    run_one(ds, targets[0], config, extras, out)


def _seed_runs(ds, config, extras, targets, out: Path) -> list:
    rows = []
    for seed in extras["seeds"]:
        for k in targets:
            cfg = replace(config, seed=seed)
            rows.append(run_one(ds, k, cfg, extras, out / ds.domain_names[k] / f"seed_{seed}"))
    return rows


def cmd_lodo(ds, config, extras, settings, out: Path) -> None:
    write_config(out / "config.txt", settings)
    rows = _seed_runs(ds, config, extras, target_indices(ds, extras["target"]), out)
    # a single (mask, phase2) group: the last two report rows are its mean and std
    E.write_metrics(out / "metrics.csv", rows + E.report_rows(rows)[-2:])


def cmd_ablate(ds, config, extras, settings, out: Path) -> None:
    write_config(out / "config.txt", settings)
    targets = target_indices(ds, extras["target"])
    rows = []
    for mask in ABLATION_MASKS:
        cfg = replace(config, mask=mask)
        rows += _seed_runs(ds, cfg, extras, targets, out / mask_label(mask).replace("-", "_"))
    E.write_metrics(out / "metrics.csv", rows)
    header, table = E.ablation_table(rows)
    E.write_csv(out / "table.csv", header, table)


def cmd_embed(ds, config, extras, settings, out: Path) -> None:
    if not extras["checkpoint"]:
        raise ConfigError("embed needs --checkpoint DIR")
    params = load_checkpoint(extras["checkpoint"])
    dumps = []
    for name in extras["extractors"]:
        if name != "all" and not params.mask[EXTRACTORS.index(name)]:
            log.warning("extractor %s is inactive in this checkpoint; skipped", name)
            continue
        dumps.append(E.embedding_dump(params, ds.images, ds.y, ds.h, name))
    write_config(out / "config.txt", settings)
    E.write_embeddings(out / "embeddings.csv", dumps)


def cmd_report(runs, out: Path) -> None:
    rows = []
    for d in runs:
        path = Path(d) / "metrics.csv"
        if not path.is_file():
            raise FileNotFoundError(f"{path}: no such file")
        rows += [r for r in E.read_metrics(path) if r.target not in E.SUMMARY_TARGETS]
    if not rows:
        raise ValueError("no metrics rows found")
    E.write_metrics(out / "summary.csv", E.report_rows(rows))
    header, table = E.ablation_table(rows)
    E.write_csv(out / "table.csv", header, table)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 and usage on unknown flags
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    out = Path(args.out)
    try:
        settings = dict(DEFAULTS)
        if args.config:
            settings.update(read_config_file(args.config))
        settings.update({k: getattr(args, k) for k in DEFAULTS if getattr(args, k) is not None})
        config, extras = resolve(settings)
        if args.command == "report":
            cmd_report(args.runs, out)
            return 0
        ds = load_dataset(extras)
        handler = {"synth": cmd_synth, "train": cmd_train, "lodo": cmd_lodo, "ablate": cmd_ablate, "embed": cmd_embed}
        handler[args.command](ds, config, extras, settings, out)
    except ConfigError as exc:
        print(f"alfa {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"alfa {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0
