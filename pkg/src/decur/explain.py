"""Alignment histograms, Integrated Gradients, saliency statistics, embedding export.

Attribution targets follow the usual recipe for decoupled embeddings: the
scalar output is the mean of the (normalized) common dims, or of the unique
dims, of one modality's embedding.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .evaluation import embeddings
from .nn import Branch
from .objective import DimSplit

OVERLAP_EPS = 1e-12
DEFAULT_IG_STEPS = 128

Model = Callable[[Tensor], Tensor]


class AttributionError(FloatingPointError):
    pass


# ------------------------------------------------------------ alignment

@dataclass
class AlignmentHistogram:
    edges: np.ndarray
    counts: np.ndarray
    losses: np.ndarray  # raw per-dimension (1 - C_ii)^2, unclipped

    def mean_loss(self, dims: slice | None = None) -> float:
        return float(self.losses[dims if dims is not None else slice(None)].mean())


def alignment_losses(z1: np.ndarray, z2: np.ndarray) -> np.ndarray:
    z1, z2 = np.asarray(z1, dtype=np.float64), np.asarray(z2, dtype=np.float64)
    if z1.shape != z2.shape or z1.ndim != 2:
        raise ad.ShapeError("alignment_histogram", z1.shape, z2.shape)
    if z1.shape[0] < 2:
        raise ValueError("alignment_histogram needs at least 2 samples")
    a = ad.batch_standardize(Tensor(z1)).data
    b = ad.batch_standardize(Tensor(z2)).data
    diag = np.einsum("ij,ij->j", a, b) / len(a)
    return (1.0 - diag) ** 2


def alignment_histogram(z1: np.ndarray, z2: np.ndarray, bins: int = 20) -> AlignmentHistogram:
    """Histogram over [0, 1] of per-dimension cross-modal alignment losses.

    A loss near 0 means the dimension is aligned across modalities; near 1
    means it is decorrelated. Values above 1 are clipped for binning only.
    """
    losses = alignment_losses(z1, z2)
    counts, edges = np.histogram(np.clip(losses, 0.0, 1.0), bins=bins, range=(0.0, 1.0))
    return AlignmentHistogram(edges=edges, counts=counts, losses=losses)


def write_histogram_csv(hist: AlignmentHistogram, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("bin_left", "bin_right", "count"))
        for lo, hi, c in zip(hist.edges[:-1], hist.edges[1:], hist.counts):
            w.writerow((repr(float(lo)), repr(float(hi)), int(c)))


# ------------------------------------------------------ integrated gradients

@dataclass
class AttributionMap:
    values: np.ndarray
    target: str
    steps: int
    delta_f: float  # F(x) - F(baseline)
    residual: float  # |sum(values) - delta_f|


def branch_chain(branch: Branch) -> Model:
    """Eval-mode normalized embedding function of one branch."""
    branch.eval()
    return branch.embed


def _require_eval(model: Model) -> None:
    owner = getattr(model, "__self__", model)
    if isinstance(owner, Branch) and owner.training:
        raise ValueError("attribution needs the model in eval mode")


def target_output(z: Tensor, target: str, split: DimSplit) -> Tensor:
    """Per-row mean of the common or unique block, as an N x 1 tensor."""
    if target not in ("common", "unique"):
        raise ValueError("target must be 'common' or 'unique'")
    block = split.common if target == "common" else split.unique
    if block.stop <= block.start:
        raise ValueError(f"no {target} dimensions in split {split}")
    return ad.mean_axis(ad.slice(z, cols=block), axis=1)


def _scalar_fn(model: Model, target: str, split: DimSplit):
    def F(X: np.ndarray) -> np.ndarray:
        return target_output(model(Tensor(X)), target, split).data.reshape(-1)
    return F


def _path_grad(model: Model, P: np.ndarray, target: str, split: DimSplit) -> np.ndarray:
    xs = Tensor(P, requires_grad=True)
    ad.backward(ad.sum(target_output(model(xs), target, split)))
    return xs.grad


def _first_failing_row(model: Model, P: np.ndarray, target: str, split: DimSplit) -> int:
    for i in range(len(P)):
        try:
            if not np.all(np.isfinite(_path_grad(model, P[i:i + 1], target, split))):
                return i
        except ad.NumericDomainError:
            return i
    return 0


def integrated_gradients_batch(model: Model, X: np.ndarray, target: str, split: DimSplit,
                               steps: int = DEFAULT_IG_STEPS, baseline: np.ndarray | None = None,
                               chunk: int = 16384) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Right-Riemann Integrated Gradients for each row of ``X``.

    Returns ``(attributions, delta_f, residual)``. ``model`` must act on rows
    independently (eval mode).
    """
    if steps < 8:
        raise ValueError("use at least 8 integration steps")
    _require_eval(model)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    S, d = X.shape
    base = np.zeros(d) if baseline is None else np.asarray(baseline, dtype=np.float64).reshape(d)
    alphas = np.arange(1, steps + 1) / steps
    diff = X - base
    # rows ordered sample-major: sample s, step k -> s * steps + k
    path = (base[None, None, :] + alphas[None, :, None] * diff[:, None, :]).reshape(S * steps, d)
    grads = np.empty_like(path)
    per = max(1, chunk // steps) * steps
    for start in range(0, len(path), per):
        try:
            g = _path_grad(model, path[start:start + per], target, split)
            bad = None if np.all(np.isfinite(g)) else int(np.argwhere(~np.isfinite(g))[0][0])
        except ad.NumericDomainError:
            bad = _first_failing_row(model, path[start:start + per], target, split)
        if bad is not None:
            bad += start
            raise AttributionError(f"non-finite gradient at sample {bad // steps}, path step {bad % steps + 1}")
        grads[start:start + per] = g
    avg = grads.reshape(S, steps, d).mean(axis=1)
    att = diff * avg
    F = _scalar_fn(model, target, split)
    delta = F(X) - F(base[None, :])[0]
    residual = np.abs(att.sum(axis=1) - delta)
    return att, delta, residual


def integrated_gradients(model: Model, x: np.ndarray, target: str, split: DimSplit,
                         steps: int = DEFAULT_IG_STEPS, baseline: np.ndarray | None = None) -> AttributionMap:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    att, delta, res = integrated_gradients_batch(model, x[None, :], target, split, steps, baseline)
    return AttributionMap(values=att[0], target=target, steps=steps, delta_f=float(delta[0]), residual=float(res[0]))


# ---------------------------------------------------------- saliency stats

def minmax(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    lo, hi = v.min(), v.max()
    return np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)


def resample(v: np.ndarray, length: int) -> np.ndarray:
    """Linear interpolation of ``v`` onto ``length`` evenly spaced points."""
    if len(v) == length:
        return v
    return np.interp(np.linspace(0, 1, length), np.linspace(0, 1, len(v)), v)


def overlap_score(a: np.ndarray, b: np.ndarray) -> float:
    """Sum of products of two min-max normalized maps (after resampling the
    longer one to the shorter length)."""
    n = min(len(a), len(b))
    return float(np.dot(resample(minmax(a), n), resample(minmax(b), n)))


@dataclass
class OverlapStat:
    common: np.ndarray  # per-sample scores
    unique: np.ndarray
    raw_common: np.ndarray
    raw_unique: np.ndarray
    normalize: str = "dataset"

    def histograms(self, bins: int = 10) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        hc, edges = np.histogram(self.common, bins=bins, range=(0.0, 1.0))
        hu, _ = np.histogram(self.unique, bins=bins, range=(0.0, 1.0))
        return edges, hc, hu


def saliency_overlap(att1_c, att2_c, att1_u, att2_u, normalize: str = "dataset") -> OverlapStat:
    """Per-sample overlap of the two modalities' common (and unique) maps.

    ``normalize="dataset"``: log(s + eps), then min-max across samples.
    ``normalize="sample"``: s divided by the compared length (no log), which
    is already in [0, 1] per sample.
    """
    maps = [np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (att1_c, att2_c, att1_u, att2_u)]
    if any(len(m) == 0 for m in maps) or len({len(m) for m in maps}) != 1:
        raise ValueError("saliency_overlap needs the same non-zero number of samples in every map set")
    raw_c = np.array([overlap_score(a, b) for a, b in zip(maps[0], maps[1])])
    raw_u = np.array([overlap_score(a, b) for a, b in zip(maps[2], maps[3])])
    if normalize == "dataset":
        sc, su = minmax(np.log(raw_c + OVERLAP_EPS)), minmax(np.log(raw_u + OVERLAP_EPS))
    elif normalize == "sample":
        n = min(maps[0].shape[1], maps[1].shape[1])
        m = min(maps[2].shape[1], maps[3].shape[1])
        sc, su = raw_c / n, raw_u / m
    else:
        raise ValueError("normalize must be 'dataset' or 'sample'")
    return OverlapStat(common=sc, unique=su, raw_common=raw_c, raw_unique=raw_u, normalize=normalize)


def spectral_saliency(model: Model, X: np.ndarray, target: str, split: DimSplit,
                      steps: int = DEFAULT_IG_STEPS, baseline: np.ndarray | None = None) -> np.ndarray:
    """Mean |attribution| per input coordinate over ``X``, normalized to sum 1."""
    att, _, _ = integrated_gradients_batch(model, X, target, split, steps, baseline)
    imp = np.abs(att).mean(axis=0)
    total = imp.sum()
    return np.full_like(imp, 1.0 / len(imp)) if total == 0 else imp / total


def write_importance_csv(importance: np.ndarray, path, target: str = "") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("feature_index", "importance", "target"))
        for i, v in enumerate(importance):
            w.writerow((i, repr(float(v)), target))


def write_overlap_csv(stat: OverlapStat, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("sample", "common_score", "unique_score", "common_raw", "unique_raw"))
        for i, row in enumerate(zip(stat.common, stat.unique, stat.raw_common, stat.raw_unique)):
            w.writerow((i, *(repr(float(v)) for v in row)))


# ------------------------------------------------------------- export

def export_embeddings(z1: np.ndarray, z2: np.ndarray, split: DimSplit, path) -> None:
    """Write the transposed embeddings (one row per dimension, both modalities)."""
    z1, z2 = np.asarray(z1), np.asarray(z2)
    if z1.shape != z2.shape or z1.shape[1] != split.K:
        raise ad.ShapeError("export_embeddings", z1.shape, z2.shape)
    n = z1.shape[0]
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["modality", "dim", "role"] + [f"s{i}" for i in range(n)])
        for m, z in (("m1", z1), ("m2", z2)):
            for k in range(split.K):
                role = "common" if k < split.Kc else "unique"
                w.writerow([m, k, role] + [f"{v:.9g}" for v in z[:, k].astype(np.float32)])


def read_embeddings_csv(path) -> tuple[list[tuple[str, int, str]], np.ndarray]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        meta, vals = [], []
        for row in r:
            meta.append((row[0], int(row[1]), row[2]))
            vals.append([float(v) for v in row[3:]])
    return meta, np.array(vals)


def export_model_embeddings(branches: tuple[Branch, Branch], X1: np.ndarray, X2: np.ndarray,
                            split: DimSplit, path) -> None:
    export_embeddings(embeddings(branches[0], X1), embeddings(branches[1], X2), split, path)
