"""Frozen-encoder linear probes and ground-truth latent recovery."""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .nn import Branch
from .objective import DimSplit
from .synthdata import PairedDataset

RIDGE_LAMBDA = 1e-3
MODES = ("multimodal", "m1_only", "m2_only")
BLOCKS = ("m1_common", "m1_unique", "m2_common", "m2_unique")
GROUPS = ("z_s", "u1", "u2")


class DegenerateSplitError(ValueError):
    pass


def test_mask(n: int, fraction: int = 5) -> np.ndarray:
    """Fixed 80/20 split: index i is held out when a multiplicative hash of i
    lands in the first fifth of its range."""
    h = (np.arange(n, dtype=np.uint64) * np.uint64(2654435761)) % np.uint64(2**32)
    return (h % np.uint64(fraction)) == 0


test_mask.__test__ = False  # not a pytest test


def _batched(fn, X: np.ndarray, batch: int = 2048) -> np.ndarray:
    return np.vstack([fn(ad.Tensor(X[i:i + batch])).data for i in range(0, len(X), batch)])


def encoder_features(branch: Branch, X: np.ndarray) -> np.ndarray:
    branch.eval()
    return _batched(branch.encode, np.asarray(X, dtype=np.float64))


def embeddings(branch: Branch, X: np.ndarray) -> np.ndarray:
    """Normalized post-projector embeddings (eval mode, running statistics)."""
    branch.eval()
    return _batched(branch.embed, np.asarray(X, dtype=np.float64))


# ------------------------------------------------------------------ probe

@dataclass
class ProbeConfig:
    epochs: int = 100
    lr: float = 0.5
    momentum: float = 0.9
    batch_size: int = 256
    milestones: tuple[int, ...] = (60, 80)
    decay: float = 0.1
    seed: int = 0


@dataclass
class ProbeResult:
    accuracy: float
    per_class: dict[int, float]
    confusion: np.ndarray
    n_train: int
    n_test: int
    mode: str = "multimodal"
    feature_dim: int = 0

    def as_row(self) -> dict:
        return {"kind": "probe", "mode": self.mode, "accuracy": self.accuracy,
                "n_train": self.n_train, "n_test": self.n_test, "feature_dim": self.feature_dim}


def probe_features(branches: tuple[Branch, Branch], ds: PairedDataset, mode: str) -> np.ndarray:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    b1, b2 = branches
    X1, X2 = ds.views()
    if mode == "m1_only":
        return encoder_features(b1, X1)
    if mode == "m2_only":
        return encoder_features(b2, X2)
    return np.hstack([encoder_features(b1, X1), encoder_features(b2, X2)])


def train_softmax(F: np.ndarray, y: np.ndarray, n_classes: int, cfg: ProbeConfig) -> tuple[np.ndarray, np.ndarray]:
    """Multinomial logistic regression by momentum SGD with step decay."""
    rng = np.random.default_rng(cfg.seed)
    n, d = F.shape
    W = np.zeros((d, n_classes))
    b = np.zeros(n_classes)
    vW, vb = np.zeros_like(W), np.zeros_like(b)
    onehot = np.eye(n_classes)[y]
    for epoch in range(cfg.epochs):
        lr = cfg.lr * cfg.decay ** sum(epoch >= m for m in cfg.milestones)
        perm = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            logits = F[idx] @ W + b
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            g = (p - onehot[idx]) / len(idx)
            vW = cfg.momentum * vW + F[idx].T @ g
            vb = cfg.momentum * vb + g.sum(axis=0)
            W -= lr * vW
            b -= lr * vb
    return W, b


def fit_probe(F: np.ndarray, labels: np.ndarray, cfg: ProbeConfig | None = None, mode: str = "multimodal") -> ProbeResult:
    cfg = cfg or ProbeConfig()
    labels = np.asarray(labels).astype(int)
    test = test_mask(len(F))
    y_tr, y_te = labels[~test], labels[test]
    if len(np.unique(y_tr)) < 2 or len(np.unique(y_te)) < 2:
        raise DegenerateSplitError("probe needs at least two classes in both train and test split")
    n_classes = int(labels.max()) + 1
    # features standardized with train-split statistics
    mu = F[~test].mean(axis=0)
    sd = F[~test].std(axis=0) + 1e-8
    Z = (F - mu) / sd
    W, b = train_softmax(Z[~test], y_tr, n_classes, cfg)
    pred = np.argmax(Z[test] @ W + b, axis=1)
    conf = np.zeros((n_classes, n_classes), dtype=int)
    np.add.at(conf, (y_te, pred), 1)
    per_class = {c: float(conf[c, c] / conf[c].sum()) for c in range(n_classes) if conf[c].sum()}
    return ProbeResult(accuracy=float(np.trace(conf) / conf.sum()), per_class=per_class, confusion=conf,
                       n_train=int((~test).sum()), n_test=int(test.sum()), mode=mode, feature_dim=F.shape[1])


def linear_probe(branches: tuple[Branch, Branch], ds: PairedDataset, mode: str = "multimodal",
                 cfg: ProbeConfig | None = None, labels: np.ndarray | None = None) -> ProbeResult:
    """Train a softmax layer on frozen encoder features and report held-out accuracy."""
    before = [b.state_dict() for b in branches]
    F = probe_features(branches, ds, mode)
    result = fit_probe(F, ds.labels if labels is None else labels, cfg, mode)
    after = [b.state_dict() for b in branches]
    for s0, s1 in zip(before, after):
        assert all(np.array_equal(s0[k], s1[k]) for k in s0), "probe modified encoder parameters"
    return result


# ------------------------------------------------------------ recovery

def ridge_fit(A: np.ndarray, Y: np.ndarray, lam: float = RIDGE_LAMBDA) -> tuple[np.ndarray, np.ndarray]:
    """Ridge regression with an unpenalized intercept (via centering)."""
    a_mu, y_mu = A.mean(axis=0), Y.mean(axis=0)
    Ac, Yc = A - a_mu, Y - y_mu
    G = Ac.T @ Ac + lam * np.eye(A.shape[1])
    W = np.linalg.solve(G, Ac.T @ Yc)
    return W, y_mu - a_mu @ W


def r2_score(Y: np.ndarray, Y_hat: np.ndarray) -> float:
    """Pooled coefficient of determination over all target columns."""
    ss_res = ((Y - Y_hat) ** 2).sum()
    ss_tot = ((Y - Y.mean(axis=0)) ** 2).sum()
    return float(1.0 - ss_res / ss_tot)


def ridge_r2(A: np.ndarray, Y: np.ndarray, test: np.ndarray, lam: float = RIDGE_LAMBDA) -> float:
    W, c = ridge_fit(A[~test], Y[~test], lam)
    return r2_score(Y[test], A[test] @ W + c)


@dataclass
class RecoveryReport:
    r2: dict[tuple[str, str], float] = field(default_factory=dict)
    n_train: int = 0
    n_test: int = 0

    def __getitem__(self, key: tuple[str, str]) -> float:
        return self.r2[key]

    def rows(self) -> list[dict]:
        return [{"kind": "recovery", "block": b, "group": g, "r2": v} for (b, g), v in self.r2.items()]


def recovery_from_embeddings(z1: np.ndarray, z2: np.ndarray, ds: PairedDataset, split: DimSplit,
                             lam: float = RIDGE_LAMBDA) -> RecoveryReport:
    test = test_mask(len(ds))
    blocks = {"m1_common": z1[:, split.common], "m1_unique": z1[:, split.unique],
              "m2_common": z2[:, split.common], "m2_unique": z2[:, split.unique]}
    report = RecoveryReport(n_train=int((~test).sum()), n_test=int(test.sum()))
    for bname, A in blocks.items():
        if A.shape[1] == 0:
            continue
        for g in GROUPS:
            report.r2[(bname, g)] = ridge_r2(A.astype(np.float64), getattr(ds, g).astype(np.float64), test, lam)
    return report


def latent_recovery(branches: tuple[Branch, Branch], ds: PairedDataset, split: DimSplit,
                    lam: float = RIDGE_LAMBDA) -> RecoveryReport:
    """Ridge R^2 from each embedding block to each ground-truth latent group."""
    b1, b2 = branches
    X1, X2 = ds.views()
    return recovery_from_embeddings(embeddings(b1, X1), embeddings(b2, X2), ds, split, lam)


# ------------------------------------------------------------- results file

def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:12]


RESULT_COLUMNS = ("config_hash", "kind", "mode", "block", "group", "accuracy", "r2",
                  "n_train", "n_test", "feature_dim", "label")


def append_results(path, rows: list[dict], config: dict, label: str = "") -> None:
    """Append result rows to a CSV file, writing the header for a new file."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    h = config_hash(config)
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        if new:
            w.writeheader()
        for r in rows:
            w.writerow({"config_hash": h, "label": label, **r})
