"""Command-line entry point: ``decur <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import explain as ex
from .objective import DimSplit
from .optim import NonFiniteGradientError
from .synthdata import (DatasetFormatError, PairedDataset, SyntheticSpec, default_mixing, generate,
                        load_dataset, planted_block_mixing, save_dataset)
from .trainer import (CheckpointError, ConfigMismatchError, NonFiniteLossError, PRESETS, TrainConfig,
                      branches_from_checkpoint, flatten, load_checkpoint, train, unflatten)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
ABLATE_PERCENTS = (25.0, 50.0, 62.5, 75.0, 87.5, 100.0)
COMPARE_METHODS = ("decur", "bt_cross", "bt_single_m1", "bt_single_m2")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ------------------------------------------------------------ config flags

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


# paths are owned by each command's own --dataset / --out flags
PATH_KEYS = ("dataset", "output_dir")


def _config_keys() -> list[str]:
    return sorted(flatten(TrainConfig().to_dict()))


def add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training config (dotted keys; values parsed as JSON when possible)")
    g.add_argument("--preset", choices=sorted(PRESETS), default="default",
                   help="named base config applied before --config and flags (default: default)")
    g.add_argument("--config", help="JSON file with training config (nested or flat dotted keys)")
    defaults = flatten(TrainConfig().to_dict())
    for key in _config_keys():
        if key in PATH_KEYS:
            continue
        names = ["--" + key.replace("_", "-")]
        if "_" in key:
            names.append("--" + key)
        g.add_argument(*names, dest="cfg:" + key, type=_parse_value, default=None, metavar="V",
                       help=f"default {json.dumps(defaults[key])}")


def resolve_config(args, **fixed) -> TrainConfig:
    flat: dict = flatten(PRESETS[getattr(args, "preset", None) or "default"])
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as e:
            raise DatasetFormatError(f"config file {args.config} is not valid JSON: {e}") from None
        flat.update(flatten(unflatten(loaded) if any("." in k for k in loaded) else loaded))
    for k, v in vars(args).items():
        if k.startswith("cfg:") and v is not None:
            flat[k[4:]] = v
    flat.update({k: v for k, v in fixed.items() if v is not None})
    known = set(_config_keys())
    unknown = set(flat) - known
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    try:
        return TrainConfig.from_dict(unflatten({**flatten(TrainConfig().to_dict()), **flat}))
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid config: {e}") from None


def write_resolved(out_dir: Path, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------ commands

def cmd_gen_data(args) -> int:
    spec = SyntheticSpec(d_shared=args.d_shared, d_u1=args.d_u1, d_u2=args.d_u2, d_x1=args.d_x1,
                         d_x2=args.d_x2, map_depth=args.map_depth, noise_std=args.noise_std, seed=args.seed)
    mixing = None
    if args.planted_block:
        g1 = planted_block_mixing(spec, 1, np.random.default_rng([spec.seed, 3]), args.planted_block)
        mixing = (g1, default_mixing(spec)[1])
    ds = generate(spec, args.n, mixing)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    write_resolved(out.parent, {"command": "gen-data", "n": args.n, "planted_block": args.planted_block,
                                "spec": vars(spec), "output": out.name})
    print(f"wrote {len(ds)} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args, dataset=args.dataset, output_dir=args.out)
    if not cfg.dataset:
        raise UsageError("train needs --dataset (or dataset in the config)")
    if not cfg.output_dir:
        raise UsageError("train needs --out (or output_dir in the config)")
    resume = load_checkpoint(args.resume) if args.resume else None
    ckpt, log = train(cfg, resume=resume, stop_after_epoch=args.stop_after_epoch)
    last = log.rows[-1]
    print(f"trained {cfg.method} for {ckpt.epoch} epochs; final total loss {last['total']:.6g}")
    return EXIT_OK


def _load_pair(args):
    ckpt = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.dataset)
    branches = branches_from_checkpoint(ckpt)
    for b, X in zip(branches, ds.views()):
        if b.encoder.in_dim != X.shape[1]:
            raise ConfigMismatchError(f"checkpoint expects {b.encoder.in_dim} input dims, dataset has {X.shape[1]}")
    return ckpt, ds, branches


def _eval_out(args, ckpt, command: str) -> Path:
    out = Path(args.out)
    write_resolved(out.parent, {"command": command, "checkpoint": str(args.checkpoint),
                                "dataset": str(args.dataset), "train_config": ckpt.config,
                                **{k: v for k, v in vars(args).items() if k not in ("func", "checkpoint", "dataset")}})
    return out


def cmd_probe(args) -> int:
    ckpt, ds, branches = _load_pair(args)
    out = _eval_out(args, ckpt, "probe")
    pcfg = ev.ProbeConfig(epochs=args.epochs, lr=args.lr, seed=args.seed)
    modes = ev.MODES if args.mode == "all" else (args.mode,)
    rows = []
    for mode in modes:
        r = ev.linear_probe(branches, ds, mode, pcfg)
        rows.append(r.as_row())
        print(f"{mode}: accuracy {r.accuracy:.4f} ({r.n_test} held-out samples)")
    ev.append_results(out, rows, ckpt.config, label=args.label)
    return EXIT_OK


def cmd_recover(args) -> int:
    ckpt, ds, branches = _load_pair(args)
    out = _eval_out(args, ckpt, "recover")
    split = TrainConfig.from_dict(ckpt.config).split
    rep = ev.latent_recovery(branches, ds, split)
    for (block, group), v in rep.r2.items():
        print(f"{block:>10} -> {group:<3} R2 {v: .4f}")
    ev.append_results(out, rep.rows(), ckpt.config, label=args.label)
    return EXIT_OK


def cmd_explain(args) -> int:
    ckpt, ds, branches = _load_pair(args)
    out = Path(args.out_dir)
    write_resolved(out, {"command": "explain", "checkpoint": str(args.checkpoint), "dataset": str(args.dataset),
                         "train_config": ckpt.config, "bins": args.bins, "steps": args.steps,
                         "samples": args.samples, "normalize": args.normalize})
    split = TrainConfig.from_dict(ckpt.config).split
    X1, X2 = ds.views()
    z1, z2 = ev.embeddings(branches[0], X1), ev.embeddings(branches[1], X2)
    hist = ex.alignment_histogram(z1, z2, bins=args.bins)
    ex.write_histogram_csv(hist, out / "alignment_histogram.csv")
    ex.export_embeddings(z1, z2, split, out / "embeddings.csv")
    sub = np.arange(min(args.samples, len(ds)))
    targets = ("common", "unique") if split.Ku else ("common",)
    att = {}
    for m, (b, X) in enumerate(zip(branches, (X1, X2)), start=1):
        chain = ex.branch_chain(b)
        for t in targets:
            a, _, _ = ex.integrated_gradients_batch(chain, X[sub], t, split, args.steps)
            att[(m, t)] = a
            imp = np.abs(a).mean(axis=0)
            ex.write_importance_csv(imp / imp.sum() if imp.sum() else imp, out / f"importance_m{m}_{t}.csv", t)
    if split.Ku:
        stat = ex.saliency_overlap(att[(1, "common")], att[(2, "common")], att[(1, "unique")], att[(2, "unique")],
                                   normalize=args.normalize)
        ex.write_overlap_csv(stat, out / "overlap.csv")
        print(f"overlap: mean common {stat.common.mean():.4f}, mean unique {stat.unique.mean():.4f}")
    print(f"alignment: mean L common {hist.losses[split.common].mean():.4f}"
          + (f", unique {hist.losses[split.unique].mean():.4f}" if split.Ku else ""))
    return EXIT_OK


def _run_one(job: dict) -> dict:
    """Train one configuration and probe it (runs in a worker process)."""
    _limit_threads()
    cfg = TrainConfig.from_dict(job["config"])
    ds = load_dataset(cfg.dataset)
    ckpt, _ = train(cfg, ds)
    branches = branches_from_checkpoint(ckpt)
    pcfg = ev.ProbeConfig(epochs=job["probe_epochs"], seed=cfg.seed)
    acc = {mode: ev.linear_probe(branches, ds, mode, pcfg).accuracy for mode in job["modes"]}
    rows = [{"kind": "probe", "mode": m, "accuracy": a} for m, a in acc.items()]
    ev.append_results(Path(cfg.output_dir) / "results.csv", rows, ckpt.config, label=job["label"])
    return {"label": job["label"], **acc}


def _run_jobs(jobs: list[dict], n_workers: int) -> list[dict]:
    if n_workers <= 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(_run_one, jobs))  # map keeps submission order


def _write_table(path: Path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got {text!r}") from None


def cmd_compare(args) -> int:
    base = resolve_config(args, dataset=args.dataset)
    out = Path(args.out_dir)
    methods = args.methods.split(",")
    jobs = []
    for seed in _seeds(args.seeds):
        for method in methods:
            d = base.to_dict()
            d.update(method=method, seed=seed, output_dir=str(out / f"{method}_seed{seed}"))
            try:
                TrainConfig.from_dict(d)
            except ValueError as e:
                raise UsageError(str(e)) from None
            jobs.append({"config": d, "label": f"{method}/seed{seed}", "probe_epochs": args.probe_epochs,
                         "modes": list(ev.MODES)})
    write_resolved(out, {"command": "compare", "base_config": base.to_dict(), "methods": methods,
                         "seeds": _seeds(args.seeds), "probe_epochs": args.probe_epochs})
    results = _run_jobs(jobs, args.jobs)
    rows = []
    for job, r in zip(jobs, results):
        rows.append({"method": job["config"]["method"], "seed": job["config"]["seed"], **r})
    _write_table(out / "compare.csv", rows, ["method", "seed", *ev.MODES])
    print(f"{'method':<22}{'seed':>5}" + "".join(f"{m:>12}" for m in ev.MODES))
    for r in rows:
        print(f"{r['method']:<22}{r['seed']:>5}" + "".join(f"{r[m]:>12.4f}" for m in ev.MODES))
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = resolve_config(args, dataset=args.dataset, method="decur")
    out = Path(args.out_dir)
    jobs = []
    for pct in ABLATE_PERCENTS:
        d = base.to_dict()
        d.update(kc_ratio=pct / 100, output_dir=str(out / f"kc{pct:g}"))
        jobs.append({"config": d, "label": f"kc{pct:g}", "probe_epochs": args.probe_epochs,
                     "modes": ["multimodal"]})
    write_resolved(out, {"command": "ablate", "base_config": base.to_dict(), "percents": list(ABLATE_PERCENTS),
                         "probe_epochs": args.probe_epochs})
    results = _run_jobs(jobs, args.jobs)
    rows = []
    for pct, job, r in zip(ABLATE_PERCENTS, jobs, results):
        split = DimSplit.from_ratio(base.embed_dim, pct / 100)
        rows.append({"kc_percent": pct, "kc": split.Kc, "ku": split.Ku, "multimodal": r["multimodal"]})
    _write_table(out / "ablate.csv", rows, ["kc_percent", "kc", "ku", "multimodal"])
    for r in rows:
        print(f"Kc {r['kc_percent']:>5g}% ({r['kc']:>3}/{base.embed_dim}): accuracy {r['multimodal']:.4f}")
    return EXIT_OK


# ------------------------------------------------------------ parser

def build_parser() -> Parser:
    p = Parser(prog="decur", description="Decoupled common/unique multimodal self-supervised learning.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic paired dataset (DCUR file)")
    spec = SyntheticSpec()
    g.add_argument("--out", required=True, help="output .dcur path")
    g.add_argument("--n", type=int, default=8192, help="number of samples (default 8192)")
    for name in ("d_shared", "d_u1", "d_u2", "d_x1", "d_x2", "map_depth", "seed"):
        g.add_argument("--" + name.replace("_", "-"), dest=name, type=int, default=getattr(spec, name),
                       help=f"default {getattr(spec, name)}")
    g.add_argument("--noise-std", type=float, default=spec.noise_std, help=f"default {spec.noise_std}")
    g.add_argument("--planted-block", type=int, default=0,
                   help="if > 0, modality 1's unique latent only reaches input coords [0, block)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="pretrain a pair of encoders")
    t.add_argument("--dataset", help="DCUR dataset path")
    t.add_argument("--out", help="run directory (checkpoint, metrics, resolved config)")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--stop-after-epoch", type=int, default=None, help="stop early after this epoch")
    add_config_flags(t)
    t.set_defaults(func=cmd_train)

    for name, fn, helptext in (("probe", cmd_probe, "linear probe on frozen encoder features"),
                               ("recover", cmd_recover, "ridge R2 from embedding blocks to true latents")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--checkpoint", required=True, help="DCKP checkpoint from train")
        e.add_argument("--dataset", required=True, help="DCUR dataset with labels and latents")
        e.add_argument("--out", required=True, help="results CSV (appended)")
        e.add_argument("--label", default="", help="free-text label stored with each row")
        if name == "probe":
            e.add_argument("--mode", default="all", choices=(*ev.MODES, "all"), help="feature set (default all)")
            e.add_argument("--epochs", type=int, default=ev.ProbeConfig.epochs, help="probe SGD epochs")
            e.add_argument("--lr", type=float, default=ev.ProbeConfig.lr, help="probe learning rate")
            e.add_argument("--seed", type=int, default=0, help="probe shuffling seed")
        e.set_defaults(func=fn)

    x = sub.add_parser("explain", help="alignment histogram, IG saliency, overlap stats, embedding export")
    x.add_argument("--checkpoint", required=True, help="DCKP checkpoint from train")
    x.add_argument("--dataset", required=True, help="DCUR dataset")
    x.add_argument("--out-dir", required=True, help="directory for the CSV outputs")
    x.add_argument("--bins", type=int, default=20, help="alignment histogram bins on [0, 1]")
    x.add_argument("--steps", type=int, default=ex.DEFAULT_IG_STEPS, help="IG integration steps")
    x.add_argument("--samples", type=int, default=256, help="samples used for attribution statistics")
    x.add_argument("--normalize", choices=("dataset", "sample"), default="dataset",
                   help="overlap score normalization")
    x.set_defaults(func=cmd_explain)

    c = sub.add_parser("compare", help="train and probe several methods side by side")
    c.add_argument("--dataset", required=True, help="DCUR dataset")
    c.add_argument("--out-dir", required=True, help="one run directory per method and seed, plus compare.csv")
    c.add_argument("--methods", default=",".join(COMPARE_METHODS), help="comma-separated methods")
    c.add_argument("--seeds", default="0", help="comma-separated seeds")
    c.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    c.add_argument("--probe-epochs", type=int, default=ev.ProbeConfig.epochs, help="probe SGD epochs")
    add_config_flags(c)
    c.set_defaults(func=cmd_compare)

    a = sub.add_parser("ablate", help="sweep the common-dimension percentage")
    a.add_argument("--dataset", required=True, help="DCUR dataset")
    a.add_argument("--out-dir", required=True, help="one run directory per percentage, plus ablate.csv")
    a.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    a.add_argument("--probe-epochs", type=int, default=ev.ProbeConfig.epochs, help="probe SGD epochs")
    add_config_flags(a)
    a.set_defaults(func=cmd_ablate)
    return p


_limits = []


def _limit_threads() -> None:
    n = os.environ.get("DECUR_THREADS")
    if n and not _limits:
        from threadpoolctl import threadpool_limits
        _limits.append(threadpool_limits(limits=int(n)))


def run(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _limit_threads()
        return args.func(args)
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteLossError, NonFiniteGradientError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetFormatError, CheckpointError, ConfigMismatchError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
