"""Cross-correlation losses: common/unique cross-modal terms, intra-modal terms."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_LAMBDA = 0.0051
TERMS = ("common", "unique", "m1", "m2")


class ContractError(ValueError):
    """Inputs violate an operation's preconditions."""


@dataclass(frozen=True)
class DimSplit:
    K: int
    Kc: int

    def __post_init__(self):
        if self.K < 1 or not 1 <= self.Kc <= self.K:
            raise ValueError(f"need 1 <= Kc <= K, got K={self.K}, Kc={self.Kc}")

    @property
    def Ku(self) -> int:
        return self.K - self.Kc

    @property
    def common(self) -> slice:
        return slice(0, self.Kc)

    @property
    def unique(self) -> slice:
        return slice(self.Kc, self.K)

    @classmethod
    def from_ratio(cls, K: int, ratio: float) -> "DimSplit":
        return cls(K, max(1, min(K, int(round(ratio * K)))))


@dataclass(frozen=True)
class LossWeights:
    lambda_c: float = DEFAULT_LAMBDA
    lambda_u: float = DEFAULT_LAMBDA
    lambda_m1: float = DEFAULT_LAMBDA
    lambda_m2: float = DEFAULT_LAMBDA

    def __post_init__(self):
        for name in ("lambda_c", "lambda_u", "lambda_m1", "lambda_m2"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class LossBreakdown:
    """Values of the four loss terms; ``total_tensor`` carries the graph."""

    total_tensor: Tensor
    l_common: float = 0.0
    l_unique: float = 0.0
    l_m1: float = 0.0
    l_m2: float = 0.0
    parts: dict[str, tuple[float, float]] = field(default_factory=dict)  # term -> (on, off)

    @property
    def total(self) -> float:
        return self.total_tensor.item()

    def as_dict(self) -> dict[str, float]:
        return {"l_common": self.l_common, "l_unique": self.l_unique,
                "l_m1": self.l_m1, "l_m2": self.l_m2, "total": self.total}


def _check_standardized(z: np.ndarray, tol: float = 1e-6):
    worst = np.abs(z.mean(axis=0)).max()
    if worst >= tol:
        raise ContractError(f"cross_correlation expects batch-standardized inputs (max |column mean| = {worst:.3g})")


def cross_correlation(za: Tensor, zb: Tensor) -> Tensor:
    """``za.T @ zb / N`` for batch-standardized ``za``, ``zb``."""
    za, zb = ad.as_tensor(za), ad.as_tensor(zb)
    if za.shape != zb.shape or za.data.ndim != 2:
        raise ad.ShapeError("cross_correlation", za.shape, zb.shape)
    n = za.shape[0]
    if n < 2:
        raise ContractError("cross_correlation needs at least 2 samples")
    _check_standardized(za.data)
    _check_standardized(zb.data)
    return ad.scalar_mul(ad.matmul(ad.transpose(za), zb), 1.0 / n)


def _square_check(C: Tensor, op: str):
    if C.data.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ad.ShapeError(op, C.shape)


def _on_off(C: Tensor, target: float) -> tuple[Tensor, Tensor]:
    diag = ad.diagonal(C)
    on = ad.sum(ad.square(ad.add_scalar(diag, -target) if target else diag))
    off = ad.sub(ad.sum(ad.square(C)), ad.sum(ad.square(diag)))
    return on, off


def loss_invariance(C: Tensor, lam: float = DEFAULT_LAMBDA) -> Tensor:
    """sum_i (1 - C_ii)^2 + lam * sum_{i != j} C_ij^2"""
    _square_check(C, "loss_invariance")
    on, off = _on_off(C, 1.0)
    return ad.add(on, ad.scalar_mul(off, lam))


def loss_decorrelation(C: Tensor, lam: float = DEFAULT_LAMBDA) -> Tensor:
    """sum_i C_ii^2 + lam * sum_{i != j} C_ij^2"""
    _square_check(C, "loss_decorrelation")
    on, off = _on_off(C, 0.0)
    return ad.add(on, ad.scalar_mul(off, lam))


def _term(C: Tensor, lam: float, target: float) -> tuple[Tensor, float, float]:
    on, off = _on_off(C, target)
    return ad.add(on, ad.scalar_mul(off, lam)), on.item(), off.item()


def cross_block_term(cm: Tensor, split: DimSplit, weights: LossWeights, name: str):
    """Common (invariance) or unique (decorrelation) loss on a diagonal block of
    the cross-modal matrix. Returns ``(loss, on, off)`` or None for an empty block."""
    if name == "unique" and split.Ku == 0:
        return None
    blk = split.common if name == "common" else split.unique
    C = ad.slice(cm, blk, blk)
    if name == "common":
        return _term(C, weights.lambda_c, 1.0)
    return _term(C, weights.lambda_u, 0.0)


def decur_loss(z1a, z1b, z2a, z2b, split: DimSplit, weights: LossWeights = LossWeights(),
               terms=TERMS) -> LossBreakdown:
    """Decoupled multimodal objective on two views per modality.

    The cross-modal matrix uses the first view of each modality only. Terms not
    listed in ``terms`` are neither computed nor added and report 0. Modality
    views that no requested term needs may be passed as ``None``.
    """
    terms = tuple(terms)
    unknown = set(terms) - set(TERMS)
    if unknown:
        raise ValueError(f"unknown loss terms {sorted(unknown)}")
    views = [ad.as_tensor(z) if z is not None else None for z in (z1a, z1b, z2a, z2b)]
    shapes = {z.shape for z in views if z is not None}
    if len(shapes) != 1:
        raise ad.ShapeError("decur_loss", *sorted(shapes))
    (shape,) = shapes
    if len(shape) != 2 or shape[1] != split.K:
        raise ad.ShapeError("decur_loss (embedding dim vs split.K)", shape, (None, split.K))

    need = {"m1": (0, 1), "m2": (2, 3), "common": (0, 2), "unique": (0, 2)}
    cache: dict[int, Tensor] = {}

    def std(i):
        if views[i] is None:
            raise ValueError("a view required by the requested loss terms is missing")
        if i not in cache:
            cache[i] = ad.batch_standardize(views[i])
        return cache[i]

    out = LossBreakdown(total_tensor=Tensor(0.0))
    pieces: list[Tensor] = []
    cm = None
    for name in terms:
        a, b = need[name]
        if name in ("common", "unique"):
            if cm is None:
                cm = cross_correlation(std(a), std(b))
            block = cross_block_term(cm, split, weights, name)
            if block is None:
                out.parts[name] = (0.0, 0.0)
                continue
            t, on, off = block
        else:
            C = cross_correlation(std(a), std(b))
            lam = weights.lambda_m1 if name == "m1" else weights.lambda_m2
            t, on, off = _term(C, lam, 1.0)
        pieces.append(t)
        out.parts[name] = (on, off)
        setattr(out, f"l_{name}", t.item())
    if pieces:
        total = pieces[0]
        for p in pieces[1:]:
            total = ad.add(total, p)
        out.total_tensor = total
    return out


def barlow_twins_loss(za, zb, lam: float = DEFAULT_LAMBDA) -> Tensor:
    """Invariance loss on the full cross-correlation of two standardized batches."""
    za, zb = ad.as_tensor(za), ad.as_tensor(zb)
    if za.shape != zb.shape:
        raise ad.ShapeError("barlow_twins_loss", za.shape, zb.shape)
    return loss_invariance(cross_correlation(ad.batch_standardize(za), ad.batch_standardize(zb)), lam)
