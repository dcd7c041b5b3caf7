"""Pretraining loop for the decoupled objective and its baselines/ablations."""
from __future__ import annotations

import csv
import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from . import autodiff as ad
from .nn import Branch, BranchConfig
from .objective import TERMS, DimSplit, LossWeights, decur_loss
from .optim import Optimizer, OptimConfig
from .synthdata import AugmentPolicy, PairedDataset, augment_batch, load_dataset

CKPT_MAGIC = b"DCKP"
CKPT_VERSION = 1
LOSS_COLUMNS = ("l_common", "l_unique", "l_m1", "l_m2", "total")

# method -> (loss terms, force Kc = K, branches that train)
METHODS: dict[str, tuple[tuple[str, ...], bool, tuple[int, ...]]] = {
    "decur": (TERMS, False, (1, 2)),
    "decur_no_intra": (("common", "unique"), False, (1, 2)),
    "decur_no_decoupling": (("common", "m1", "m2"), True, (1, 2)),
    "bt_cross": (("common",), True, (1, 2)),
    "bt_single_m1": (("m1",), False, (1,)),
    "bt_single_m2": (("m2",), False, (2,)),
}


class TrainingError(RuntimeError):
    pass


class NonFiniteLossError(TrainingError):
    def __init__(self, step: int, breakdown: dict[str, float]):
        self.step = step
        self.breakdown = breakdown
        super().__init__(f"non-finite loss at step {step}: {breakdown}")


class ConfigMismatchError(TrainingError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


def default_aug() -> AugmentPolicy:
    return AugmentPolicy(noise_std=0.2, mask_fraction=0.1, scale_range=(0.8, 1.2), flip_sign_prob=0.0)


@dataclass
class TrainConfig:
    method: str = "decur"
    dataset: str | None = None
    embed_dim: int = 128
    kc_ratio: float = 0.75
    epochs: int = 100
    batch_size: int = 128
    encoder_widths: list[int] = field(default_factory=lambda: [256, 256, 128])
    projector_hidden: int | None = None
    use_projector: bool = True
    optim: OptimConfig = field(default_factory=OptimConfig)
    lr_batch_scaling: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    aug1: AugmentPolicy = field(default_factory=default_aug)
    aug2: AugmentPolicy = field(default_factory=default_aug)
    seed: int = 0
    output_dir: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {sorted(METHODS)}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 < self.kc_ratio <= 1:
            raise ValueError("kc_ratio must be in (0, 1]")
        self.split  # validates Kc

    @property
    def split(self) -> DimSplit:
        if METHODS[self.method][1]:
            return DimSplit(self.embed_dim, self.embed_dim)
        return DimSplit.from_ratio(self.embed_dim, self.kc_ratio)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        if isinstance(d.get("optim"), dict):
            d["optim"] = OptimConfig(**d["optim"])
        if isinstance(d.get("weights"), dict):
            d["weights"] = LossWeights(**d["weights"])
        for key in ("aug1", "aug2"):
            if isinstance(d.get(key), dict):
                aug = dict(d[key])
                if "scale_range" in aug:
                    aug["scale_range"] = tuple(aug["scale_range"])
                d[key] = AugmentPolicy(**aug)
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls.from_dict(json.loads(text))


# Named starting points; "standard" is the benchmark config the acceptance suite trains.
PRESETS: dict[str, dict[str, Any]] = {
    "default": {},
    "standard": {
        "embed_dim": 64,
        "kc_ratio": 0.75,
        "epochs": 100,
        "batch_size": 128,
        "optim": {"lars_eta": 0.01},
        # off-diagonal weight raised so lambda * K stays order one at K = 64
        "weights": {"lambda_c": 0.02, "lambda_u": 0.02, "lambda_m1": 0.02, "lambda_m2": 0.02},
        # light noise, heavier masking: masking is what separates unique from common content
        "aug1": {"noise_std": 0.1, "mask_fraction": 0.25, "scale_range": [0.8, 1.2], "flip_sign_prob": 0.0},
        "aug2": {"noise_std": 0.1, "mask_fraction": 0.25, "scale_range": [0.8, 1.2], "flip_sign_prob": 0.0},
    },
}


def preset_config(name: str = "standard", **overrides: Any) -> TrainConfig:
    """TrainConfig from a named preset, with top-level or dotted-key overrides."""
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    flat = flatten(TrainConfig().to_dict())
    flat.update(flatten(PRESETS[name]))
    flat.update(flatten(unflatten(overrides)))
    return TrainConfig.from_dict(unflatten(flat))


def flatten(d: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(flatten(v, f"{prefix}{k}."))
        else:
            out[prefix + k] = v
    return out


def unflatten(flat: dict[str, Any]) -> dict:
    out: dict = {}
    for key, v in flat.items():
        parts = key.split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = v
    return out


# ------------------------------------------------------------------ records

@dataclass
class MetricsLog:
    rows: list[dict[str, float]] = field(default_factory=list)

    COLUMNS = ("epoch", "lr") + LOSS_COLUMNS

    def append(self, row: dict[str, float]):
        if self.rows and row["epoch"] <= self.rows[-1]["epoch"]:
            raise ValueError("metrics rows must be increasing in epoch")
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def write_csv(self, path) -> None:
        """Deterministic columns only; wall time goes to :meth:`write_timing_csv`."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([int(r["epoch"])] + [repr(float(r[c])) for c in self.COLUMNS[1:]])

    def write_timing_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("epoch", "wall_time"))
            for r in self.rows:
                w.writerow([int(r["epoch"]), f"{r.get('wall_time', float('nan')):.3f}"])

    @classmethod
    def read_csv(cls, path) -> "MetricsLog":
        with open(path, newline="") as fh:
            rows = [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in csv.DictReader(fh)]
        return cls(rows)


@dataclass
class Checkpoint:
    config: dict[str, Any]
    params: dict[str, np.ndarray]
    optim: dict[str, np.ndarray]
    epoch: int
    step: int
    rng: dict[str, int]
    metrics: list[dict[str, float]] = field(default_factory=list)
    version: int = CKPT_VERSION

    def equals(self, other: "Checkpoint") -> bool:
        def same(a: dict, b: dict) -> bool:
            return a.keys() == b.keys() and all(
                a[k].shape == b[k].shape and a[k].tobytes() == b[k].tobytes() for k in a)

        return (self.version == other.version and self.config == other.config
                and self.epoch == other.epoch and self.step == other.step and self.rng == other.rng
                and self.metrics == other.metrics
                and same(self.params, other.params) and same(self.optim, other.optim))

    def branch_state(self, modality: int) -> dict[str, np.ndarray]:
        prefix = f"m{modality}."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    meta = json.dumps({"config": ckpt.config, "epoch": ckpt.epoch, "step": ckpt.step,
                       "rng": ckpt.rng, "metrics": ckpt.metrics}, sort_keys=True).encode()
    records = [("model." + k, v) for k, v in ckpt.params.items()]
    records += [("optim." + k, v) for k, v in ckpt.optim.items()]
    out = [CKPT_MAGIC, struct.pack("<II", ckpt.version, len(meta)), meta, struct.pack("<I", len(records))]
    for name, arr in records:
        nb = name.encode()
        arr = np.asarray(arr, dtype="<f8")
        out.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path, config: TrainConfig | None = None, in_dims: tuple[int, int] | None = None) -> Checkpoint:
    """Read a checkpoint. With ``config`` (and ``in_dims``) the parameter
    shapes are checked against freshly built branches."""
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointTruncatedError(f"{path}: truncated at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a DCKP checkpoint")
    version, meta_len = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    try:
        meta = json.loads(take(meta_len))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: corrupt metadata ({e})") from None
    (n_records,) = struct.unpack("<I", take(4))
    params, optim = {}, {}
    for _ in range(n_records):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
        group, _, key = name.partition(".")
        (params if group == "model" else optim)[key] = arr
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    ckpt = Checkpoint(config=meta["config"], params=params, optim=optim, epoch=meta["epoch"],
                      step=meta["step"], rng=meta["rng"], metrics=meta["metrics"], version=version)
    if config is not None:
        dims = in_dims or _in_dims_from(ckpt)
        b1, b2 = build_branches(config, *dims)
        expected = {f"m1.{k}": v.shape for k, v in b1.state_dict().items()}
        expected.update({f"m2.{k}": v.shape for k, v in b2.state_dict().items()})
        got = {k: v.shape for k, v in params.items()}
        if expected != got:
            diff = sorted(k for k in set(expected) | set(got) if expected.get(k) != got.get(k))
            raise ConfigMismatchError(f"{path}: parameter shapes differ from config at {diff[:5]}")
    return ckpt


def _in_dims_from(ckpt: Checkpoint) -> tuple[int, int]:
    return (ckpt.params["m1.encoder.0.weight"].shape[1], ckpt.params["m2.encoder.0.weight"].shape[1])


# ------------------------------------------------------------------ training

def run_identity(cfg: TrainConfig) -> dict[str, Any]:
    """Config as stored in checkpoints: everything that affects the computation.
    The output directory is left out so a run is byte-identical wherever it is written."""
    d = json.loads(cfg.to_json())
    d["output_dir"] = None
    return d


def branch_config(cfg: TrainConfig, in_dim: int) -> BranchConfig:
    return BranchConfig(in_dim=in_dim, encoder_widths=list(cfg.encoder_widths),
                        projector_hidden=cfg.projector_hidden, embed_dim=cfg.embed_dim,
                        use_projector=cfg.use_projector)


def build_branches(cfg: TrainConfig, d_x1: int, d_x2: int) -> tuple[Branch, Branch]:
    b1 = Branch(branch_config(cfg, d_x1), np.random.default_rng([cfg.seed, 11]))
    b2 = Branch(branch_config(cfg, d_x2), np.random.default_rng([cfg.seed, 12]))
    return b1, b2


def branches_from_checkpoint(ckpt: Checkpoint) -> tuple[Branch, Branch]:
    """Rebuild both branches (eval mode) from any method's checkpoint."""
    cfg = TrainConfig.from_dict(ckpt.config)
    b1, b2 = build_branches(cfg, *_in_dims_from(ckpt))
    b1.load_state_dict(ckpt.branch_state(1))
    b2.load_state_dict(ckpt.branch_state(2))
    return b1.eval(), b2.eval()


def _trainable(method: str, b1: Branch, b2: Branch):
    named = []
    for m, b in ((1, b1), (2, b2)):
        if m in METHODS[method][2]:
            named += [(f"m{m}.{n}", p) for n, p in b.named_parameters()]
    return named


def _effective_optim(cfg: TrainConfig, total_steps: int) -> OptimConfig:
    scale = cfg.batch_size / 256 if cfg.lr_batch_scaling else 1.0
    o = cfg.optim
    return OptimConfig(kind=o.kind, base_lr_weights=o.base_lr_weights * scale,
                       base_lr_bias_bn=o.base_lr_bias_bn * scale, momentum=o.momentum,
                       weight_decay=o.weight_decay, total_steps=total_steps, lars_eta=o.lars_eta)


def steps_per_epoch(n: int, batch_size: int) -> int:
    # last partial batch is dropped
    return n // batch_size


def step_loss(cfg: TrainConfig, b1: Branch, b2: Branch, x1: np.ndarray, x2: np.ndarray,
              rng: np.random.Generator):
    """Augment a batch (always four views, fixed draw order) and evaluate the method's loss."""
    terms, _, _ = METHODS[cfg.method]
    x1a = augment_batch(x1, cfg.aug1, rng)
    x1b = augment_batch(x1, cfg.aug1, rng)
    x2a = augment_batch(x2, cfg.aug2, rng)
    x2b = augment_batch(x2, cfg.aug2, rng)
    needs = {"common": (0, 2), "unique": (0, 2), "m1": (0, 1), "m2": (2, 3)}
    used = {i for t in terms for i in needs[t]}
    inputs = ((b1, x1a), (b1, x1b), (b2, x2a), (b2, x2b))
    z = [branch(ad.Tensor(x)) if i in used else None for i, (branch, x) in enumerate(inputs)]
    return decur_loss(*z, split=cfg.split, weights=cfg.weights, terms=terms)


def train(cfg: TrainConfig, dataset: PairedDataset | None = None,
          resume: Checkpoint | None = None, stop_after_epoch: int | None = None) -> tuple[Checkpoint, MetricsLog]:
    """Run pretraining; returns the final checkpoint and per-epoch metrics.

    ``dataset`` overrides ``cfg.dataset``. ``resume`` continues from a
    checkpoint of the same config; ``stop_after_epoch`` ends early (used to
    produce resumable intermediate checkpoints).
    """
    if dataset is None:
        if not cfg.dataset:
            raise ConfigMismatchError("no dataset given and cfg.dataset is empty")
        dataset = load_dataset(cfg.dataset)
    X1, X2 = dataset.views()
    n = len(X1)
    spe = steps_per_epoch(n, cfg.batch_size)
    if spe < 1:
        raise ConfigMismatchError(f"dataset of {n} samples is smaller than batch_size {cfg.batch_size}")
    total = cfg.epochs * spe
    ocfg = _effective_optim(cfg, total)
    b1, b2 = build_branches(cfg, X1.shape[1], X2.shape[1])
    named = _trainable(cfg.method, b1, b2)
    opt = Optimizer([p for _, p in named], ocfg)
    resolved = run_identity(cfg)
    log = MetricsLog()
    start_epoch = 0

    if resume is not None:
        if resume.config != resolved:
            raise ConfigMismatchError("checkpoint was produced by a different config")
        try:
            b1.load_state_dict(resume.branch_state(1))
            b2.load_state_dict(resume.branch_state(2))
        except (KeyError, ValueError) as e:
            raise ConfigMismatchError(f"checkpoint does not fit the dataset/config: {e}") from None
        for (name, _), buf in zip(named, opt.state.buffers):
            buf[...] = resume.optim[name + ".momentum"]
        opt.state.step = resume.step
        start_epoch = resume.epoch
        log = MetricsLog([dict(r) for r in resume.metrics])

    b1.train()
    b2.train()
    last_epoch = cfg.epochs if stop_after_epoch is None else min(cfg.epochs, stop_after_epoch)
    for epoch in range(start_epoch, last_epoch):
        t0 = time.perf_counter()
        perm = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        sums = dict.fromkeys(LOSS_COLUMNS, 0.0)
        lr0 = opt.lr_at(opt.state.step)
        for s in range(spe):
            idx = perm[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            rng = np.random.default_rng([cfg.seed, epoch, s + 1])
            loss = step_loss(cfg, b1, b2, X1[idx], X2[idx], rng)
            vals = loss.as_dict()
            if not all(math.isfinite(v) for v in vals.values()):
                raise NonFiniteLossError(opt.state.step, vals)
            ad.backward(loss.total_tensor, opt.params)
            opt.step()
            for k in LOSS_COLUMNS:
                sums[k] += vals[k]
        row = {"epoch": epoch + 1, "lr": lr0}
        row.update({k: sums[k] / spe for k in LOSS_COLUMNS})
        log.append(row)
        log.rows[-1]["wall_time"] = time.perf_counter() - t0

    params = {f"m1.{k}": v for k, v in b1.state_dict().items()}
    params.update({f"m2.{k}": v for k, v in b2.state_dict().items()})
    optim_state = {name + ".momentum": buf.copy() for (name, _), buf in zip(named, opt.state.buffers)}
    ckpt = Checkpoint(config=resolved, params=params, optim=optim_state, epoch=last_epoch,
                      step=opt.state.step, rng={"seed": cfg.seed, "epoch": last_epoch},
                      metrics=[{k: r[k] for k in MetricsLog.COLUMNS} for r in log.rows])
    if cfg.output_dir:
        write_run(cfg, ckpt, log)
    return ckpt, log


def write_run(cfg: TrainConfig, ckpt: Checkpoint, log: MetricsLog) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(cfg.to_json() + "\n")
    save_checkpoint(ckpt, out / "checkpoint.dckp")
    log.write_csv(out / "metrics.csv")
    log.write_timing_csv(out / "timing.csv")
    return out

