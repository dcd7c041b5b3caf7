"""MLP encoders and projectors assembled from autodiff ops."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


class BatchTooSmallError(ValueError):
    pass


class Module:
    training = True

    def children(self) -> list[tuple[str, "Module"]]:
        return []

    def own_parameters(self) -> list[tuple[str, Parameter]]:
        return []

    def own_buffers(self) -> list[tuple[str, np.ndarray]]:
        return []

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Parameter]]:
        out = [(prefix + n, p) for n, p in self.own_parameters()]
        for name, child in self.children():
            out += child.named_parameters(f"{prefix}{name}.")
        return out

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> list[tuple[str, np.ndarray]]:
        out = [(prefix + n, b) for n, b in self.own_buffers()]
        for name, child in self.children():
            out += child.named_buffers(f"{prefix}{name}.")
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {n: p.data.copy() for n, p in self.named_parameters()}
        state.update({n: b.copy() for n, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        targets = {n: p.data for n, p in self.named_parameters()}
        targets.update(dict(self.named_buffers()))
        missing = set(targets) - set(state)
        if missing:
            raise KeyError(f"missing entries: {sorted(missing)}")
        for name, arr in targets.items():
            src = np.asarray(state[name], dtype=np.float64)
            if src.shape != arr.shape:
                raise ValueError(f"{name}: shape {src.shape} does not match {arr.shape}")
            arr[...] = src

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_out, fan_in))


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        if in_dim < 1 or out_dim < 1:
            raise ValueError(f"Linear widths must be positive, got {in_dim}->{out_dim}")
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = Parameter(glorot_uniform(rng, in_dim, out_dim), "weight")
        self.bias = Parameter(np.zeros((1, out_dim)), "bias", excluded=True) if bias else None

    def own_parameters(self):
        ps = [("weight", self.weight)]
        if self.bias is not None:
            ps.append(("bias", self.bias))
        return ps

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ad.ShapeError("linear", x.shape, self.weight.shape)
        return ad.linear(x, self.weight, self.bias)


class BatchNorm(Module):
    """Batch normalization over the batch axis, optionally with affine terms.

    Running variance uses the biased (denominator N) estimate.
    """

    def __init__(self, dim: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS, affine: bool = True):
        if dim < 1:
            raise ValueError("BatchNorm dim must be positive")
        if not 0 < momentum < 1 or eps <= 0:
            raise ValueError("BatchNorm needs momentum in (0,1) and eps > 0")
        self.dim, self.momentum, self.eps, self.affine = dim, momentum, eps, affine
        self.gamma = Parameter(np.ones((1, dim)), "gamma", excluded=True) if affine else None
        self.beta = Parameter(np.zeros((1, dim)), "beta", excluded=True) if affine else None
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)

    def own_parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)] if self.affine else []

    def own_buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def update_stats(self, x: np.ndarray, moments=None) -> None:
        mu, var = moments if moments is not None else ad.batch_moments(x)
        m = self.momentum
        self.running_mean *= 1 - m
        self.running_mean += m * mu.reshape(-1)
        self.running_var *= 1 - m
        self.running_var += m * var.reshape(-1)

    def forward(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        if self.training:
            if n < 2:
                raise BatchTooSmallError(f"batch of {n} sample(s) in train mode; batch norm needs >= 2")
            moments = ad.batch_moments(x.data)
            self.update_stats(x.data, moments)
            y = ad.batch_standardize(x, self.eps, moments)
        else:
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            y = ad.affine_rows(x, Tensor(inv.reshape(1, -1)), Tensor((-self.running_mean * inv).reshape(1, -1)))
        if self.affine:
            y = ad.affine_rows(y, self.gamma, self.beta)
        return y


class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return ad.relu(x)


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def children(self):
        return [(str(i), layer) for i, layer in enumerate(self.layers)]

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


class Encoder(Sequential):
    """(Linear, BN, ReLU) blocks; the last width is the feature dim."""

    def __init__(self, in_dim: int, widths, rng: np.random.Generator):
        widths = list(widths)
        if not widths or any(w < 1 for w in widths) or in_dim < 1:
            raise ValueError(f"encoder widths must be positive, got in={in_dim}, widths={widths}")
        layers: list[Module] = []
        prev = in_dim
        for w in widths:
            layers += [Linear(prev, w, rng), BatchNorm(w), ReLU()]
            prev = w
        super().__init__(*layers)
        self.in_dim, self.out_dim = in_dim, prev


class Projector(Sequential):
    """Two (Linear, BN, ReLU) blocks followed by a final Linear to dim K."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, rng: np.random.Generator):
        if min(in_dim, hidden, out_dim) < 1:
            raise ValueError("projector widths must be positive")
        super().__init__(
            Linear(in_dim, hidden, rng), BatchNorm(hidden), ReLU(),
            Linear(hidden, hidden, rng), BatchNorm(hidden), ReLU(),
            Linear(hidden, out_dim, rng),
        )
        self.in_dim, self.out_dim = in_dim, out_dim


@dataclass
class BranchConfig:
    in_dim: int
    encoder_widths: list[int] = field(default_factory=lambda: [256, 256, 128])
    projector_hidden: int | None = None  # defaults to embed_dim
    embed_dim: int = 128
    use_projector: bool = True


class Branch(Module):
    """Encoder plus projector for one modality.

    ``embed_norm`` tracks running statistics of the embeddings so that eval-mode
    callers (attribution, export) can see the same normalized embeddings the
    loss sees during training.
    """

    def __init__(self, cfg: BranchConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.encoder = Encoder(cfg.in_dim, cfg.encoder_widths, rng)
        if cfg.use_projector:
            hidden = cfg.projector_hidden or cfg.embed_dim
            self.projector: Module | None = Projector(self.encoder.out_dim, hidden, cfg.embed_dim, rng)
        else:
            if self.encoder.out_dim != cfg.embed_dim:
                raise ValueError("without a projector embed_dim must equal the encoder output width")
            self.projector = None
        self.embed_norm = BatchNorm(cfg.embed_dim, affine=False)

    def children(self):
        kids = [("encoder", self.encoder)]
        if self.projector is not None:
            kids.append(("projector", self.projector))
        kids.append(("embed_norm", self.embed_norm))
        return kids

    @property
    def feature_dim(self) -> int:
        return self.encoder.out_dim

    def encode(self, x: Tensor) -> Tensor:
        return encode(self.encoder, x)

    def forward(self, x: Tensor) -> Tensor:
        """Raw (unnormalized) embeddings; in train mode also updates embed stats."""
        z = self.encode(x)
        if self.projector is not None:
            z = project(self.projector, z)
        if self.training:
            self.embed_norm.update_stats(z.data)
        return z

    def embed(self, x: Tensor) -> Tensor:
        """Embeddings standardized with running statistics (eval) or batch statistics (train)."""
        z = self.forward(x)
        if self.training:
            return ad.batch_standardize(z, self.embed_norm.eps)
        was = self.embed_norm.training
        self.embed_norm.training = False
        try:
            return self.embed_norm(z)
        finally:
            self.embed_norm.training = was


def _check_batch(model: Module, x: Tensor, in_dim: int):
    if x.data.ndim != 2 or x.shape[1] != in_dim:
        raise ad.ShapeError("encode", x.shape, (None, in_dim))
    if model.training and x.shape[0] < 2:
        raise BatchTooSmallError(f"batch of {x.shape[0]} sample(s) in train mode; batch norm needs >= 2")


def encode(model: Encoder, x) -> Tensor:
    x = ad.as_tensor(x)
    _check_batch(model, x, model.in_dim)
    return model(x)


def project(model: Projector, f) -> Tensor:
    f = ad.as_tensor(f)
    _check_batch(model, f, model.in_dim)
    return model(f)


def init_params(cfg: BranchConfig, seed: int) -> Branch:
    """Build a branch with Glorot-uniform weights, zero biases, unit BN gains."""
    return Branch(cfg, np.random.default_rng(seed))
