"""Differentiable building blocks on float64 torch tensors.

Reverse-mode gradients come from torch autograd; this module fixes the
numerical conventions the models rely on: seeded Glorot-uniform parameter
sets, masked softmax with exact zeros, diagonal-Gaussian KL, GRU cell,
optimizer steps that refuse non-finite gradients, a finite-difference
gradient checker and a binary checkpoint format.
"""

from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

DTYPE = torch.float64

__all__ = [
    "DTYPE",
    "ShapeError",
    "DomainError",
    "EmptySupportError",
    "TrainingDivergenceError",
    "tensor",
    "ParamSet",
    "MLPSpec",
    "GRUCellSpec",
    "init_mlp",
    "mlp_forward",
    "init_gru",
    "gru_cell",
    "masked_softmax",
    "masked_log_softmax",
    "kl_standard_normal",
    "mse",
    "SGD",
    "Adam",
    "Optimizer",
    "optimizer_step",
    "GradCheckReport",
    "gradient_check",
    "save_checkpoint",
    "load_checkpoint",
]


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class EmptySupportError(ValueError):
    pass


class TrainingDivergenceError(RuntimeError):
    pass


def tensor(x, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE).clone()
    t.requires_grad_(requires_grad)
    return t


class ParamSet:
    """Ordered named trainable tensors with deterministic seeded initialization."""

    def __init__(self, seed: int = 0):
        self._params: "OrderedDict[str, torch.Tensor]" = OrderedDict()
        self._rng = np.random.default_rng(seed)

    def add(self, name: str, shape: Sequence[int], init: str = "glorot") -> torch.Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already exists")
        shape = tuple(int(s) for s in shape)
        if init == "zeros":
            values = np.zeros(shape)
        elif init == "glorot":
            fan_out = shape[-1] if shape else 1
            fan_in = shape[-2] if len(shape) >= 2 else fan_out
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            values = self._rng.uniform(-limit, limit, size=shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = torch.tensor(values, dtype=DTYPE, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def values(self) -> list[torch.Tensor]:
        return list(self._params.values())

    def size(self) -> int:
        return sum(p.numel() for p in self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def grads(self) -> dict[str, torch.Tensor]:
        return {
            k: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
            for k, p in self._params.items()
        }

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.detach().numpy().copy() for k, p in self._params.items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        with torch.no_grad():
            for k, p in self._params.items():
                p.copy_(torch.from_numpy(np.asarray(snap[k], dtype=np.float64)))

    def subset(self, prefixes: Iterable[str]) -> list[torch.Tensor]:
        prefixes = tuple(prefixes)
        return [p for k, p in self._params.items() if k.startswith(prefixes)]


# ---------------------------------------------------------------------------
# layers

_ACTIVATIONS: dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "tanh": torch.tanh,
    "relu": torch.relu,
    "sigmoid": torch.sigmoid,
    "identity": lambda x: x,
}


@dataclass(frozen=True)
class MLPSpec:
    """Layer widths including the input width, one activation per layer."""

    widths: tuple[int, ...]
    activations: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "activations", tuple(self.activations))
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least one layer")
        if any(w <= 0 for w in self.widths):
            raise ValueError("layer widths must be positive")
        if len(self.activations) != len(self.widths) - 1:
            raise ValueError("need one activation per layer")
        for a in self.activations:
            if a not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")

    @classmethod
    def make(cls, widths: Sequence[int], hidden: str = "tanh", out: str = "identity") -> "MLPSpec":
        n = len(widths) - 1
        return cls(tuple(widths), tuple([hidden] * (n - 1) + [out]))

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]


def init_mlp(params: ParamSet, name: str, spec: MLPSpec, stack: int | None = None) -> None:
    """Register weights ``{name}.W{k}``/``{name}.b{k}``.

    With ``stack=L`` the layer tensors carry a leading dimension of L
    independent networks evaluated together.
    """
    lead = () if stack is None else (stack,)
    for k in range(len(spec.widths) - 1):
        params.add(f"{name}.W{k}", lead + (spec.widths[k], spec.widths[k + 1]))
        params.add(f"{name}.b{k}", lead + (spec.widths[k + 1],), init="zeros")


def mlp_forward(spec: MLPSpec, params: ParamSet, x: torch.Tensor, name: str = "mlp") -> torch.Tensor:
    """Affine + activation composition over the last axis of ``x``."""
    h = x
    for k, act in enumerate(spec.activations):
        W = params[f"{name}.W{k}"]
        if h.shape[-1] != W.shape[-2]:
            raise ShapeError(
                f"{name} layer {k}: input width {h.shape[-1]} does not match weight rows {W.shape[-2]}"
            )
        h = _ACTIVATIONS[act](h @ W + params[f"{name}.b{k}"])
    return h


def stacked_mlp_forward(spec: MLPSpec, params: ParamSet, x: torch.Tensor, name: str) -> torch.Tensor:
    """Evaluate L stacked scalar-output MLPs on ``x`` (..., in) -> (..., L)."""
    W = params[f"{name}.W0"]
    if x.shape[-1] != W.shape[-2]:
        raise ShapeError(f"{name} layer 0: input width {x.shape[-1]} != {W.shape[-2]}")
    h = _ACTIVATIONS[spec.activations[0]](torch.einsum("...i,lio->...lo", x, W) + params[f"{name}.b0"])
    for k in range(1, len(spec.activations)):
        W = params[f"{name}.W{k}"]
        h = torch.einsum("...li,lio->...lo", h, W) + params[f"{name}.b{k}"]
        h = _ACTIVATIONS[spec.activations[k]](h)
    return h.squeeze(-1)


@dataclass(frozen=True)
class GRUCellSpec:
    input_width: int
    state_width: int

    def __post_init__(self):
        if self.input_width <= 0 or self.state_width <= 0:
            raise ValueError("GRU widths must be positive")


def init_gru(params: ParamSet, name: str, spec: GRUCellSpec) -> None:
    n_in, n_h = spec.input_width, spec.state_width
    for gate in ("r", "z", "c"):
        params.add(f"{name}.W{gate}", (n_in, n_h))
        params.add(f"{name}.U{gate}", (n_h, n_h))
        params.add(f"{name}.b{gate}", (n_h,), init="zeros")


def gru_cell(
    spec: GRUCellSpec, params: ParamSet, state: torch.Tensor, message: torch.Tensor, name: str = "gru"
) -> torch.Tensor:
    """h' = (1 - u) * h + u * tanh(W x + U (r * h) + b)."""
    if state.shape[-1] != spec.state_width:
        raise ShapeError(f"{name}: state width {state.shape[-1]} != {spec.state_width}")
    if message.shape[-1] != spec.input_width:
        raise ShapeError(f"{name}: message width {message.shape[-1]} != {spec.input_width}")
    p = lambda k: params[f"{name}.{k}"]  # noqa: E731
    r = torch.sigmoid(message @ p("Wr") + state @ p("Ur") + p("br"))
    u = torch.sigmoid(message @ p("Wz") + state @ p("Uz") + p("bz"))
    cand = torch.tanh(message @ p("Wc") + (r * state) @ p("Uc") + p("bc"))
    return (1.0 - u) * state + u * cand


# ---------------------------------------------------------------------------
# probabilities and losses


def _check_support(mask: torch.Tensor, dim: int) -> torch.Tensor:
    mask = mask.to(torch.bool)
    if not bool(mask.any(dim=dim).all()):
        raise EmptySupportError("masked softmax with every entry masked out")
    return mask


def masked_log_softmax(logits: torch.Tensor, mask: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """log softmax over unmasked entries; masked entries are -inf."""
    if logits.shape != mask.shape:
        raise ShapeError(f"mask shape {tuple(mask.shape)} != logits shape {tuple(logits.shape)}")
    mask = _check_support(mask, dim)
    neg_inf = torch.tensor(-math.inf, dtype=logits.dtype)
    return torch.log_softmax(torch.where(mask, logits, neg_inf), dim=dim)


def masked_softmax(logits: torch.Tensor, mask: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Softmax restricted to mask == 1; masked entries are exactly 0."""
    return torch.exp(masked_log_softmax(logits, mask, dim))


def kl_standard_normal(mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, diag sigma^2) || N(0, I)) summed over all entries."""
    if mu.shape != sigma.shape:
        raise ShapeError("mu and sigma shapes differ")
    if bool((sigma <= 0).any()):
        raise DomainError("sigma must be strictly positive")
    return 0.5 * (mu.pow(2) + sigma.pow(2) - 1.0 - 2.0 * torch.log(sigma)).sum()


def kl_standard_normal_logsigma(mu: torch.Tensor, log_sigma: torch.Tensor) -> torch.Tensor:
    """Same divergence, per leading row, parameterised by log sigma; sums the last axis."""
    return 0.5 * (mu.pow(2) + torch.exp(2.0 * log_sigma) - 1.0 - 2.0 * log_sigma).sum(-1)


def mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"pred shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    return (pred - target).pow(2).mean()


# ---------------------------------------------------------------------------
# optimisation


@dataclass(frozen=True)
class SGD:
    lr: float = 0.01


@dataclass(frozen=True)
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Optimizer:
    """Update rule bound to a ParamSet; refuses non-finite gradients."""

    def __init__(self, params: ParamSet, rule, names: Iterable[str] | None = None):
        self.params = params
        self.names = list(names) if names is not None else params.names()
        tensors = [params[n] for n in self.names]
        if isinstance(rule, SGD):
            self._opt = torch.optim.SGD(tensors, lr=rule.lr)
        elif isinstance(rule, Adam):
            self._opt = torch.optim.Adam(
                tensors, lr=rule.lr, betas=(rule.beta1, rule.beta2), eps=rule.eps, foreach=False
            )
        else:
            raise TypeError(f"unknown optimizer rule {rule!r}")
        self.rule = rule

    def step(self) -> None:
        for name in self.names:
            g = self.params[name].grad
            if g is not None and not bool(torch.isfinite(g).all()):
                self.params.zero_grad()
                raise TrainingDivergenceError(f"non-finite gradient for parameter {name!r}")
        self._opt.step()
        self.params.zero_grad()


def optimizer_step(params: ParamSet, rule) -> ParamSet:
    """One stateless update (fresh optimizer state); gradients are zeroed afterwards."""
    Optimizer(params, rule).step()
    return params


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    worst: str
    n_checked: int
    n_kinks: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"gradient check {status}: max rel err {self.max_rel_error:.3e} "
            f"(tol {self.tolerance:.0e}, {self.n_checked} coords, {self.n_kinks} kinks skipped, worst {self.worst})"
        )


def gradient_check(
    fn: Callable[[], torch.Tensor],
    params,
    tolerance: float = 1e-4,
    step: float = 1e-5,
    floor: float = 1e-6,
    max_coords: int | None = None,
    seed: int = 0,
    analytic: dict | None = None,
    kink_tol: float | None = 1e-2,
) -> GradCheckReport:
    """Compare autograd gradients of scalar ``fn()`` with central differences.

    ``params`` is a ParamSet or a mapping/sequence of leaf tensors. The
    per-coordinate relative error is |a - n| / max(|a|, |n|, floor).
    ``max_coords`` limits how many coordinates per tensor are probed
    (chosen with ``seed``). ``analytic`` overrides the autograd gradients,
    which is how a corrupted gradient can be fed in as a negative control.

    A mismatching coordinate is treated as straddling a non-differentiable
    point such as a relu hinge, and counted in ``n_kinks`` instead of
    compared, when its one-sided slopes differ by more than ``kink_tol``
    (relative) or when a 100x finer step brings it within tolerance.
    ``kink_tol=None`` compares every coordinate.
    """
    if isinstance(params, ParamSet):
        named = list(params.items())
    elif isinstance(params, dict):
        named = list(params.items())
    else:
        named = [(f"arg{i}", p) for i, p in enumerate(params)]
    tensors = [p for _, p in named]

    if analytic is None:
        for p in tensors:
            p.grad = None
        out = fn()
        grads = torch.autograd.grad(out, tensors, allow_unused=True)
        analytic = {
            name: (g.detach().clone() if g is not None else torch.zeros_like(p))
            for (name, p), g in zip(named, grads)
        }

    rng = np.random.default_rng(seed)
    worst_err, worst_name, count, kinks = 0.0, "", 0, 0
    with torch.no_grad():
        f0 = float(fn()) if kink_tol is not None else 0.0
        for name, p in named:
            flat = p.view(-1)
            idx = np.arange(flat.numel())
            if max_coords is not None and flat.numel() > max_coords:
                idx = np.sort(rng.choice(flat.numel(), size=max_coords, replace=False))
            ga = analytic[name].reshape(-1)
            for i in idx:
                orig = flat[i].item()

                def central(h):
                    flat[i] = orig + h
                    fp = float(fn())
                    flat[i] = orig - h
                    fm = float(fn())
                    flat[i] = orig
                    return fp, fm

                fp, fm = central(step)
                num = (fp - fm) / (2.0 * step)
                a = float(ga[i])
                err = abs(a - num) / max(abs(a), abs(num), floor)
                if err >= tolerance and kink_tol is not None:
                    fwd, bwd = (fp - f0) / step, (f0 - fm) / step
                    if abs(fwd - bwd) > kink_tol * max(abs(fwd), abs(bwd), floor):
                        kinks += 1
                        continue
                    # a hinge inside [x - h, x + h] but not at x disappears at a finer step
                    fp, fm = central(step * 1e-2)
                    num = (fp - fm) / (2e-2 * step)
                    fine = abs(a - num) / max(abs(a), abs(num), floor)
                    if fine < tolerance:
                        kinks += 1
                        continue
                count += 1
                if err > worst_err or not math.isfinite(err):
                    worst_err, worst_name = err, f"{name}[{int(i)}]"
    return GradCheckReport(worst_err, tolerance, worst_name, count, kinks)


# ---------------------------------------------------------------------------
# checkpoints: magic, u32 version, u32 manifest length, JSON manifest, float64 payloads

_MAGIC = b"NDCK"
_VERSION = 1


def save_checkpoint(path, params: ParamSet, meta: dict | None = None) -> None:
    manifest = {
        "params": [{"name": k, "shape": list(p.shape)} for k, p in params.items()],
        "meta": meta or {},
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(blob)))
        fh.write(blob)
        for _, p in params.items():
            fh.write(np.ascontiguousarray(p.detach().numpy(), dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ParamSet, dict]:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a parameter checkpoint")
        version, n = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        manifest = json.loads(fh.read(n).decode("utf-8"))
        params = ParamSet()
        for entry in manifest["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise ValueError(f"{path}: truncated payload for {entry['name']}")
            values = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
            t = torch.tensor(values, dtype=DTYPE, requires_grad=True)
            params._params[entry["name"]] = t
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after payload")
    return params, manifest["meta"]
