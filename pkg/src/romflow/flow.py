"""Flow-based density model built from general coupling layers.

Each general coupling layer is a per-coordinate scale-and-bias map followed
by an affine coupling: one block of coordinates passes through unchanged and
parameterizes, through a two-hidden-layer tanh network, the scale and shift
applied to the other block. Consecutive layers swap the roles of the blocks.

Two evaluation paths exist. The numpy functions in this module
(:func:`forward`, :func:`inverse`, :func:`log_density`, :func:`sample`) are
used for inference; :func:`log_density_tape` records the same computation on
the autodiff tape for training and input gradients.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad

FORMAT_NAME = "romflow.flow"
FORMAT_VERSION = 1
PARAM_NAMES = ("a", "b", "W1", "b1", "W2", "b2", "Wout", "bout")
LOG_2PI = math.log(2.0 * math.pi)


class FlowError(ValueError):
    """Numerical failure inside a coupling layer."""

    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message if layer is None else f"layer {layer}: {message}")
        self.layer = layer


class PartitionKind(str, enum.Enum):
    FIRST_HALF = "first_half"
    ODD_EVEN = "odd_even"
    PERMUTATION = "permutation"


@dataclass(frozen=True)
class PartitionScheme:
    """Split of the coordinates into a passive and an active block.

    ``passive`` is the block left unchanged by even-numbered layers; odd
    layers swap the roles.
    """

    kind: PartitionKind
    n: int
    passive: tuple[int, ...]
    active: tuple[int, ...]
    permutation: tuple[int, ...] | None = None

    @property
    def m(self) -> int:
        return len(self.passive)

    @classmethod
    def first_half(cls, n: int) -> "PartitionScheme":
        m = n // 2
        return cls(PartitionKind.FIRST_HALF, n, tuple(range(m)), tuple(range(m, n)))

    @classmethod
    def odd_even(cls, n: int) -> "PartitionScheme":
        # 1-based odd coordinates (0, 2, 4, ...) against even ones; for odd n
        # the smaller block is passive so that m = n // 2
        odd = tuple(range(0, n, 2))
        even = tuple(range(1, n, 2))
        if len(odd) > len(even):
            odd, even = even, odd
        return cls(PartitionKind.ODD_EVEN, n, odd, even)

    @classmethod
    def from_permutation(cls, perm: Sequence[int], m: int | None = None) -> "PartitionScheme":
        perm = tuple(int(p) for p in perm)
        n = len(perm)
        if sorted(perm) != list(range(n)):
            raise ValueError(f"not a permutation of 0..{n - 1}: {perm}")
        m = n // 2 if m is None else m
        if not 1 <= m < n:
            raise ValueError(f"passive block size must be in [1, {n - 1}], got {m}")
        return cls(PartitionKind.PERMUTATION, n, perm[:m], perm[m:], perm)

    @classmethod
    def make(cls, kind: str | PartitionKind, n: int, permutation=None) -> "PartitionScheme":
        kind = PartitionKind(kind)
        if kind is PartitionKind.FIRST_HALF:
            return cls.first_half(n)
        if kind is PartitionKind.ODD_EVEN:
            return cls.odd_even(n)
        if permutation is None:
            raise ValueError("permutation partition needs an index list")
        return cls.from_permutation(permutation)

    def blocks(self, layer_index: int) -> tuple[np.ndarray, np.ndarray]:
        """(passive, active) index arrays for the given layer."""
        p, a = np.array(self.passive, dtype=np.intp), np.array(self.active, dtype=np.intp)
        return (p, a) if layer_index % 2 == 0 else (a, p)

    def to_dict(self) -> dict:
        d = {"kind": self.kind.value, "n": self.n}
        if self.permutation is not None:
            d["permutation"] = list(self.permutation)
            d["m"] = self.m
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PartitionScheme":
        kind = PartitionKind(d["kind"])
        if kind is PartitionKind.PERMUTATION:
            return cls.from_permutation(d["permutation"], d.get("m"))
        return cls.make(kind, int(d["n"]))


@dataclass
class CouplingLayer:
    """Scale-bias followed by an affine coupling.

    ``params`` holds a, b (n,), W1 (p, H1), b1 (H1,), W2 (H1, H2), b2 (H2,),
    Wout (H2, k) and bout (k,), where p and q are the passive and active
    block sizes and k = 2q (log-scale and shift) or q with ``fixed_scale``.
    """

    passive: np.ndarray
    active: np.ndarray
    params: dict[str, np.ndarray]
    fixed_scale: bool = False

    @property
    def n(self) -> int:
        return self.params["a"].shape[0]


@dataclass
class FlowModel:
    layers: list[CouplingLayer]
    partition: PartitionScheme
    s_max: float = 2.0
    hidden: tuple[int, int] = (512, 256)
    fixed_scale: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.partition.n

    @property
    def depth(self) -> int:
        return len(self.layers)

    def parameters(self) -> list[np.ndarray]:
        """All trainable arrays in a fixed order (references, not copies)."""
        return [layer.params[k] for layer in self.layers for k in PARAM_NAMES]

    def parameter_names(self) -> list[str]:
        return [f"layer{i}.{k}" for i in range(len(self.layers)) for k in PARAM_NAMES]

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        i = 0
        for p in self.parameters():
            p[...] = flat[i:i + p.size].reshape(p.shape)
            i += p.size
        if i != flat.size:
            raise ValueError(f"expected {i} parameters, got {flat.size}")

    def copy(self) -> "FlowModel":
        layers = [CouplingLayer(l.passive.copy(), l.active.copy(),
                                {k: v.copy() for k, v in l.params.items()}, l.fixed_scale)
                  for l in self.layers]
        return FlowModel(layers, self.partition, self.s_max, self.hidden,
                         self.fixed_scale, dict(self.meta))


def build_model(n: int, L: int, H1: int = 512, H2: int = 256,
                partition: PartitionScheme | str = "first_half",
                init_data: np.ndarray | None = None,
                rng: np.random.Generator | None = None,
                s_max: float = 2.0, fixed_scale: bool = False,
                output_init_std: float = 0.0) -> FlowModel:
    """Create a flow of ``L`` general coupling layers.

    Hidden weights are drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)); the
    output layer is zero (``output_init_std`` > 0 draws it from a normal
    instead), so a fresh model is the identity up to its scale-bias layers.
    With ``init_data`` the scale-bias of every layer whitens the data as it
    arrives at that layer.
    """
    if n < 2:
        raise ValueError(f"dimension must be at least 2, got {n}")
    if L < 1 or H1 < 1 or H2 < 1:
        raise ValueError(f"depth and hidden widths must be positive, got L={L}, H=({H1}, {H2})")
    if s_max <= 0:
        raise ValueError("s_max must be positive")
    rng = np.random.default_rng() if rng is None else rng
    if not isinstance(partition, PartitionScheme):
        partition = PartitionScheme.make(partition, n)
    if partition.n != n:
        raise ValueError(f"partition is for dimension {partition.n}, model has {n}")

    layers = []
    for i in range(L):
        passive, active = partition.blocks(i)
        p, q = len(passive), len(active)
        k = q if fixed_scale else 2 * q
        lim1, lim2 = 1.0 / math.sqrt(p), 1.0 / math.sqrt(H1)
        params = {
            "a": np.ones(n),
            "b": np.zeros(n),
            "W1": rng.uniform(-lim1, lim1, (p, H1)),
            "b1": rng.uniform(-lim1, lim1, H1),
            "W2": rng.uniform(-lim2, lim2, (H1, H2)),
            "b2": rng.uniform(-lim2, lim2, H2),
            "Wout": (rng.normal(0.0, output_init_std, (H2, k)) if output_init_std > 0
                     else np.zeros((H2, k))),
            "bout": np.zeros(k),
        }
        layers.append(CouplingLayer(passive, active, params, fixed_scale))
    model = FlowModel(layers, partition, float(s_max), (H1, H2), fixed_scale)

    if init_data is not None:
        x = np.atleast_2d(np.asarray(init_data, dtype=np.float64))
        if x.shape[1] != n:
            raise ValueError(f"init_data has {x.shape[1]} columns, expected {n}")
        for i, layer in enumerate(model.layers):
            mu, sd = x.mean(axis=0), x.std(axis=0)
            sd = np.where(sd > 0, sd, 1.0)
            layer.params["a"][:] = 1.0 / sd
            layer.params["b"][:] = -mu / sd
            x, _ = _layer_forward(model, i, x)
    return model


# --- numpy evaluation path -------------------------------------------------

def _mlp(layer: CouplingLayer, xp: np.ndarray) -> np.ndarray:
    P = layer.params
    h = np.tanh(xp @ P["W1"] + P["b1"])
    h = np.tanh(h @ P["W2"] + P["b2"])
    return h @ P["Wout"] + P["bout"]


def _scale_shift(model: FlowModel, layer: CouplingLayer, xp: np.ndarray):
    o = _mlp(layer, xp)
    q = len(layer.active)
    if layer.fixed_scale:
        return np.zeros((xp.shape[0], q)), o
    log_s = model.s_max * np.tanh(o[:, :q] / model.s_max)
    return log_s, o[:, q:]


def _layer_forward(model: FlowModel, i: int, y: np.ndarray):
    layer = model.layers[i]
    a, b = layer.params["a"], layer.params["b"]
    x = y * a + b
    xp, xa = x[:, layer.passive], x[:, layer.active]
    log_s, t = _scale_shift(model, layer, xp)
    z = np.empty_like(x)
    z[:, layer.passive] = xp
    z[:, layer.active] = xa * np.exp(log_s) + t
    logdet = log_s.sum(axis=1) + np.sum(np.log(np.abs(a)))
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(logdet))):
        raise FlowError("non-finite value in forward map", layer=i)
    return z, logdet


def _as_batch(y, n: int) -> tuple[np.ndarray, bool]:
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 1
    y = np.atleast_2d(y)
    if y.shape[1] != n:
        raise ValueError(f"input has dimension {y.shape[1]}, model expects {n}")
    if not np.all(np.isfinite(y)):
        raise FlowError("non-finite input")
    return y, single


def forward(model: FlowModel, y) -> tuple[np.ndarray, np.ndarray]:
    """Map data to latent space. Returns ``(z, logdet)``; batches along rows."""
    x, single = _as_batch(y, model.n)
    total = np.zeros(x.shape[0])
    for i in range(model.depth):
        x, ld = _layer_forward(model, i, x)
        total += ld
    return (x[0], total[0]) if single else (x, total)


def inverse(model: FlowModel, z, return_logdet: bool = False):
    """Map latent points back to data space.

    With ``return_logdet`` also returns log|det| of the forward Jacobian at
    the recovered points.
    """
    x, single = _as_batch(z, model.n)
    total = np.zeros(x.shape[0])
    for i in reversed(range(model.depth)):
        layer = model.layers[i]
        a, b = layer.params["a"], layer.params["b"]
        if np.any(a == 0):
            raise FlowError("scale-bias has a zero scale; layer is singular", layer=i)
        xp = x[:, layer.passive]
        log_s, t = _scale_shift(model, layer, xp)
        u = np.empty_like(x)
        u[:, layer.passive] = xp
        u[:, layer.active] = (x[:, layer.active] - t) * np.exp(-log_s)
        x = (u - b) / a
        total += log_s.sum(axis=1) + np.sum(np.log(np.abs(a)))
        if not np.all(np.isfinite(x)):
            raise FlowError("non-finite value in inverse map", layer=i)
    if single:
        x, total = x[0], total[0]
    return (x, total) if return_logdet else x


def std_normal_logpdf(y: np.ndarray) -> np.ndarray:
    y = np.atleast_2d(y)
    return -0.5 * np.sum(y * y, axis=1) - 0.5 * y.shape[1] * LOG_2PI


def log_density(model: FlowModel, y):
    """log p_Y(y) under the standard normal prior."""
    x, single = _as_batch(y, model.n)
    z, ld = forward(model, x)
    lp = std_normal_logpdf(z) + ld
    return lp[0] if single else lp


def sample(model: FlowModel, N: int, rng: np.random.Generator,
           return_log_density: bool = False):
    """Draw ``N`` points by pushing prior samples through the inverse map."""
    if N < 1:
        raise ValueError("N must be positive")
    z = rng.standard_normal((N, model.n))
    y, ld = inverse(model, z, return_logdet=True)
    if return_log_density:
        return y, std_normal_logpdf(z) + ld
    return y


# --- tape path -------------------------------------------------------------

def tape_parameters(model: FlowModel) -> list[dict[str, ad.Tensor]]:
    """Wrap every layer's arrays as leaf tensors requiring gradients."""
    return [{k: ad.Tensor(layer.params[k], requires_grad=True) for k in PARAM_NAMES}
            for layer in model.layers]


def log_density_tape(model: FlowModel, y: ad.Tensor,
                     params: list[dict[str, ad.Tensor]] | None = None) -> ad.Tensor:
    """Per-sample log-density of a (B, n) tensor, recorded on the tape."""
    if params is None:
        params = [{k: ad.Tensor(layer.params[k]) for k in PARAM_NAMES} for layer in model.layers]
    n = model.n
    x = y
    logdet = None
    for layer, P in zip(model.layers, params):
        x = x * P["a"] + P["b"]
        xp = ad.take_cols(x, layer.passive)
        xa = ad.take_cols(x, layer.active)
        h = ad.tanh(xp @ P["W1"] + P["b1"])
        h = ad.tanh(h @ P["W2"] + P["b2"])
        o = h @ P["Wout"] + P["bout"]
        q = len(layer.active)
        if layer.fixed_scale:
            za = xa + o
            ld = ad.sum(ad.log_abs(P["a"]))
        else:
            raw = ad.take_cols(o, np.arange(q))
            t = ad.take_cols(o, np.arange(q, 2 * q))
            log_s = ad.tanh(raw * (1.0 / model.s_max)) * model.s_max
            za = xa * ad.exp(log_s) + t
            ld = ad.sum(log_s, axis=1) + ad.sum(ad.log_abs(P["a"]))
        x = ad.put_cols(xp, layer.passive, n) + ad.put_cols(za, layer.active, n)
        logdet = ld if logdet is None else logdet + ld
    quad = ad.sum(x * x, axis=1) * -0.5
    return quad + logdet - 0.5 * n * LOG_2PI


def grad_y_log_density(model: FlowModel, y) -> np.ndarray:
    """Exact gradient of log p_Y with respect to the input, per row."""
    yb, single = _as_batch(y, model.n)
    Y = ad.Tensor(yb, requires_grad=True)
    lp = log_density_tape(model, Y)
    if not np.all(np.isfinite(lp.value)):
        raise FlowError("non-finite log-density")
    (g,) = ad.grad(ad.sum(lp), [Y])
    return g.value[0] if single else g.value


# --- serialization ---------------------------------------------------------

def to_dict(model: FlowModel) -> dict:
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "dimension": model.n,
        "depth": model.depth,
        "partition": model.partition.to_dict(),
        "s_max": model.s_max,
        "hidden": list(model.hidden),
        "fixed_scale": model.fixed_scale,
        "layers": [{k: layer.params[k].tolist() for k in PARAM_NAMES} for layer in model.layers],
    }


def from_dict(d: dict) -> FlowModel:
    if d.get("format") != FORMAT_NAME:
        raise ValueError(f"not a flow model document (format={d.get('format')!r})")
    if d.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model version {d.get('version')}")
    partition = PartitionScheme.from_dict(d["partition"])
    fixed = bool(d.get("fixed_scale", False))
    layers = []
    for i, ld in enumerate(d["layers"]):
        passive, active = partition.blocks(i)
        params = {k: np.array(ld[k], dtype=np.float64) for k in PARAM_NAMES}
        layers.append(CouplingLayer(passive, active, params, fixed))
    if len(layers) != d["depth"]:
        raise ValueError("depth does not match the number of layers")
    return FlowModel(layers, partition, float(d["s_max"]), tuple(d["hidden"]), fixed)


def save_model(model: FlowModel, path) -> None:
    Path(path).write_text(json.dumps(to_dict(model)))


def load_model(path) -> FlowModel:
    return from_dict(json.loads(Path(path).read_text()))
