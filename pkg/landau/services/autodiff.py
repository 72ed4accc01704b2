"""Dense network engine for the flow and score networks.

Input derivatives (d/dt of the flow, divergence of the score) are carried as
forward-mode duals whose primal and tangent parts are torch tensors; the
parameter gradient is a single reverse pass over one flat leaf tensor, so
gradients flow through the tangent channels as well (forward-over-reverse).
Everything runs in float64 on the CPU.
"""
import json
import logging
import math
import struct
import zlib
from contextlib import nullcontext
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from landau.errors import ArtifactError, NonFiniteGradient, NumericError
from landau.models import Activation, NetworkSpec

logger = logging.getLogger(__name__)

DTYPE = torch.float64

# Weights ~ U(-INIT_GAIN / sqrt(fan_in), INIT_GAIN / sqrt(fan_in)), biases 0
INIT_GAIN = 1.0

CHECKPOINT_MAGIC = b"LNDCKPT\x00"
CHECKPOINT_VERSION = 1

Layout = Tuple[Tuple[str, int, Tuple[int, ...]], ...]


def layout_for(spec: NetworkSpec) -> Layout:
    entries = []
    offset = 0
    for prefix, fan_in, fan_out in spec.layers():
        entries.append((f"{prefix}.weight", offset, (fan_out, fan_in)))
        offset += fan_out * fan_in
        entries.append((f"{prefix}.bias", offset, (fan_out,)))
        offset += fan_out
    return tuple(entries)


@dataclass(frozen=True, eq=False)
class ParameterSet:
    """Flat float64 parameter vector plus its (name, offset, shape) layout."""

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True).ravel()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        expected = 0
        for name, offset, shape in self.layout:
            if offset != expected:
                raise ValueError(f"layout entry {name} is not contiguous (offset {offset}, expected {expected})")
            expected += math.prod(shape)
        if expected != values.size:
            raise ValueError(f"layout covers {expected} values but {values.size} were given")

    @classmethod
    def for_spec(cls, spec: NetworkSpec, values: np.ndarray) -> "ParameterSet":
        return cls(values=values, layout=layout_for(spec))

    def __len__(self) -> int:
        return int(self.values.size)

    def _entry(self, name: str):
        for entry in self.layout:
            if entry[0] == name:
                return entry
        raise KeyError(name)

    def layer(self, name: str) -> np.ndarray:
        _, offset, shape = self._entry(name)
        return self.values[offset:offset + math.prod(shape)].reshape(shape)

    def with_layer(self, name: str, array) -> "ParameterSet":
        _, offset, shape = self._entry(name)
        array = np.asarray(array, dtype=np.float64)
        if array.shape != shape:
            raise ValueError(f"{name} expects shape {shape}, got {array.shape}")
        values = self.values.copy()
        values[offset:offset + array.size] = array.ravel()
        return ParameterSet(values=values, layout=self.layout)

    def with_values(self, values: np.ndarray) -> "ParameterSet":
        return ParameterSet(values=values, layout=self.layout)


def init_params(spec: NetworkSpec, seed: int) -> ParameterSet:
    """Fan-in scaled uniform weights, zero biases, drawn in layout order."""
    rng = np.random.default_rng(seed)
    layout = layout_for(spec)
    values = np.zeros(spec.param_count, dtype=np.float64)
    for name, offset, shape in layout:
        if name.endswith(".weight"):
            bound = INIT_GAIN / math.sqrt(shape[1])
            values[offset:offset + math.prod(shape)] = rng.uniform(-bound, bound, size=math.prod(shape))
    return ParameterSet(values=values, layout=layout)


def affine_network(matrix, offset) -> Tuple[NetworkSpec, ParameterSet]:
    """Identity-activation network computing v -> matrix @ v + offset at every t."""
    m = np.asarray(matrix, dtype=np.float64)
    b = np.asarray(offset, dtype=np.float64)
    d = m.shape[0]
    spec = NetworkSpec(
        input_dim=d + 1, output_dim=d, vel_embed=(d, 1), time_embed=(1, 1), trunk=(d, 1),
        activation=Activation.IDENTITY,
    )
    params = (
        ParameterSet.for_spec(spec, np.zeros(spec.param_count))
        .with_layer("vel.0.weight", np.eye(d))
        .with_layer("trunk.0.weight", np.hstack([np.eye(d), np.zeros((d, 1))]))
        .with_layer("out.weight", m)
        .with_layer("out.bias", b)
    )
    return spec, params


class Tape:
    """Recording context for parameter gradients.

    Holds one leaf tensor over the concatenation of the given parameter sets;
    `params(i)` is the differentiable view of the i-th set. Losses built from
    those views and wrapped with `scalar()` can be passed to `grad()`.
    """

    def __init__(self, *param_sets: ParameterSet):
        if not param_sets:
            raise ValueError("a tape needs at least one parameter set")
        self.param_sets = param_sets
        bounds = np.cumsum([0] + [len(p) for p in param_sets])
        self._bounds = [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]
        flat = np.concatenate([p.values for p in param_sets])
        self.leaf = torch.tensor(flat, dtype=DTYPE, requires_grad=True)

    @property
    def size(self) -> int:
        return int(self.leaf.numel())

    def params(self, index: int = 0) -> torch.Tensor:
        start, stop = self._bounds[index]
        return self.leaf[start:stop]

    def split(self, flat: np.ndarray) -> List[np.ndarray]:
        return [np.asarray(flat[a:b]) for a, b in self._bounds]

    def values(self) -> np.ndarray:
        return self.leaf.detach().numpy().copy()

    def scalar(self, tensor) -> "DifferentiableScalar":
        if not isinstance(tensor, torch.Tensor):
            tensor = torch.tensor(float(tensor), dtype=DTYPE)
        if tensor.dim() != 0:
            raise ValueError(f"expected a 0-dim tensor, got shape {tuple(tensor.shape)}")
        return DifferentiableScalar(tensor=tensor, tape=self)


@dataclass(frozen=True, eq=False)
class DifferentiableScalar:
    tensor: torch.Tensor
    tape: Optional[Tape] = None

    @property
    def value(self) -> float:
        return float(self.tensor.detach())

    @property
    def requires_grad(self) -> bool:
        return self.tape is not None and self.tensor.requires_grad

    def _wrap(self, tensor: torch.Tensor, other: Any = None) -> "DifferentiableScalar":
        tape = self.tape
        if isinstance(other, DifferentiableScalar):
            if tape is None:
                tape = other.tape
            elif other.tape is not None and other.tape is not tape:
                raise ValueError("cannot combine scalars recorded on different tapes")
        return DifferentiableScalar(tensor=tensor, tape=tape)

    @staticmethod
    def _raw(other):
        return other.tensor if isinstance(other, DifferentiableScalar) else other

    def __add__(self, other):
        return self._wrap(self.tensor + self._raw(other), other)

    __radd__ = __add__

    def __sub__(self, other):
        return self._wrap(self.tensor - self._raw(other), other)

    def __mul__(self, other):
        return self._wrap(self.tensor * self._raw(other), other)

    __rmul__ = __mul__

    def __float__(self) -> float:
        return self.value


def grad(loss: DifferentiableScalar) -> np.ndarray:
    """Reverse-mode gradient of a recorded scalar w.r.t. its tape's parameters."""
    if not isinstance(loss, DifferentiableScalar) or loss.tape is None:
        raise ValueError("loss was not produced inside a recording context (Tape)")
    tape = loss.tape
    if not loss.tensor.requires_grad:
        return np.zeros(tape.size, dtype=np.float64)
    (g,) = torch.autograd.grad(loss.tensor, tape.leaf, allow_unused=True)
    if g is None:
        return np.zeros(tape.size, dtype=np.float64)
    return g.detach().numpy().copy()


# --- forward engine ---------------------------------------------------------

class Dual:
    """Primal plus a stack of K tangents (leading axis) for one activation."""

    __slots__ = ("re", "eps")

    def __init__(self, re: torch.Tensor, eps: Optional[torch.Tensor] = None):
        self.re = re
        self.eps = eps

    def affine(self, weight: torch.Tensor, bias: torch.Tensor) -> "Dual":
        eps = None if self.eps is None else F.linear(self.eps, weight)
        return Dual(F.linear(self.re, weight, bias), eps)

    def silu(self) -> "Dual":
        sig = torch.sigmoid(self.re)
        re = self.re * sig
        if self.eps is None:
            return Dual(re)
        return Dual(re, self.eps * (sig * (1.0 + self.re * (1.0 - sig))))

    def activate(self, activation: Activation) -> "Dual":
        if activation is Activation.IDENTITY:
            return self
        return self.silu()

    @staticmethod
    def cat(parts: Sequence["Dual"]) -> "Dual":
        re = torch.cat([p.re for p in parts], dim=-1)
        if all(p.eps is None for p in parts):
            return Dual(re)
        k = next(p.eps.shape[0] for p in parts if p.eps is not None)
        eps = [p.eps if p.eps is not None else p.re.new_zeros((k,) + tuple(p.re.shape)) for p in parts]
        return Dual(re, torch.cat(eps, dim=-1))


def _unpack(spec: NetworkSpec, flat: torch.Tensor) -> Dict[str, List[Tuple[torch.Tensor, torch.Tensor]]]:
    if flat.numel() != spec.param_count:
        raise ValueError(f"spec needs {spec.param_count} parameters, got {flat.numel()}")
    blocks: Dict[str, List[Tuple[torch.Tensor, torch.Tensor]]] = {"vel": [], "time": [], "trunk": [], "out": []}
    offset = 0
    for prefix, fan_in, fan_out in spec.layers():
        weight = flat[offset:offset + fan_out * fan_in].view(fan_out, fan_in)
        offset += fan_out * fan_in
        bias = flat[offset:offset + fan_out]
        offset += fan_out
        blocks[prefix.split(".")[0]].append((weight, bias))
    return blocks


def _run(spec: NetworkSpec, flat: torch.Tensor, v: Dual, t: Dual) -> Dual:
    blocks = _unpack(spec, flat)
    h = v
    for weight, bias in blocks["vel"]:
        h = h.affine(weight, bias).activate(spec.activation)
    g = t
    for weight, bias in blocks["time"]:
        g = g.affine(weight, bias).activate(spec.activation)
    z = Dual.cat([h, g])
    for weight, bias in blocks["trunk"]:
        z = z.affine(weight, bias).activate(spec.activation)
    weight, bias = blocks["out"][0]
    return z.affine(weight, bias)


ParamsLike = Union[ParameterSet, torch.Tensor]


def _flat(params: ParamsLike) -> Tuple[torch.Tensor, bool]:
    if isinstance(params, ParameterSet):
        return torch.tensor(params.values, dtype=DTYPE), False
    if isinstance(params, torch.Tensor):
        return params, True
    raise TypeError(f"unsupported parameter container {type(params).__name__}")


def _check_finite(x, what: str) -> None:
    if isinstance(x, torch.Tensor):
        ok = bool(torch.isfinite(x.detach()).all())
    else:
        ok = bool(np.all(np.isfinite(x)))
    if not ok:
        raise NumericError(f"non-finite network input ({what})")


def _tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)


def _inputs(spec: NetworkSpec, v, t) -> Tuple[torch.Tensor, torch.Tensor, bool]:
    _check_finite(v, "v")
    _check_finite(t, "t")
    v = _tensor(v)
    single = v.dim() == 1
    if single:
        v = v.unsqueeze(0)
    if v.dim() != 2 or v.shape[1] != spec.velocity_dim:
        raise ValueError(f"expected velocities of dimension {spec.velocity_dim}, got shape {tuple(v.shape)}")
    t = _tensor(t)
    if t.dim() == 0:
        t = t.expand(v.shape[0])
    t = t.reshape(v.shape[0], 1)
    return v, t, single


def _finish(x: torch.Tensor, single: bool, recorded: bool):
    if single:
        x = x[0] if x.dim() >= 1 else x
    if recorded:
        return x
    return x.detach().numpy().copy()


def forward(spec: NetworkSpec, params: ParamsLike, v, t):
    """Network output at (v, t). `v` is a d-vector or an (M, d) batch.

    Returns numpy for a ParameterSet and a recorded tensor for a tape view.
    """
    flat, recorded = _flat(params)
    v, t, single = _inputs(spec, v, t)
    with nullcontext() if recorded else torch.no_grad():
        out = _run(spec, flat, Dual(v), Dual(t)).re
    return _finish(out, single, recorded)


def forward_jvp(spec: NetworkSpec, params: ParamsLike, v, t, direction):
    """(output, J_(v,t) . direction) for a direction over the joint input."""
    flat, recorded = _flat(params)
    v, t, single = _inputs(spec, v, t)
    direction = _tensor(direction).reshape(-1)
    if direction.numel() != spec.input_dim:
        raise ValueError(f"direction must have {spec.input_dim} entries")
    m, d = v.shape
    v_dot = direction[:d].expand(1, m, d)
    t_dot = direction[d:].expand(1, m, 1)
    with nullcontext() if recorded else torch.no_grad():
        out = _run(spec, flat, Dual(v, v_dot), Dual(t, t_dot))
    return _finish(out.re, single, recorded), _finish(out.eps[0], single, recorded)


def time_derivative(spec: NetworkSpec, params: ParamsLike, v, t):
    """(output, d output / dt)."""
    direction = np.zeros(spec.input_dim)
    direction[-1] = 1.0
    return forward_jvp(spec, params, v, t, direction)


def output_and_divergence(spec: NetworkSpec, params: ParamsLike, v, t):
    """(output, sum_k d output_k / d v_k) from one pass with d basis tangents."""
    flat, recorded = _flat(params)
    v, t, single = _inputs(spec, v, t)
    m, d = v.shape
    basis = torch.eye(d, dtype=DTYPE)
    v_dot = basis[:, None, :].expand(d, m, d)
    with nullcontext() if recorded else torch.no_grad():
        out = _run(spec, flat, Dual(v, v_dot), Dual(t))
        div = torch.diagonal(out.eps, dim1=0, dim2=2).sum(-1)
    return _finish(out.re, single, recorded), _finish(div, single, recorded)


def divergence_v(spec: NetworkSpec, params: ParamsLike, v, t):
    return output_and_divergence(spec, params, v, t)[1]


# --- optimizer --------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size: int, lr: float = 1e-4) -> "AdamState":
        return cls(m=np.zeros(size), v=np.zeros(size), step=0, lr=lr)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update. Accepts a ParameterSet or a flat array
    and returns the same kind together with the advanced state."""
    values = params.values if isinstance(params, ParameterSet) else np.asarray(params, dtype=np.float64)
    g = np.asarray(grads, dtype=np.float64)
    if g.shape != values.shape or g.shape != state.m.shape:
        raise ValueError(f"shape mismatch: params {values.shape}, grads {g.shape}, state {state.m.shape}")
    bad = np.flatnonzero(~np.isfinite(g))
    if bad.size:
        raise NonFiniteGradient(int(bad[0]), float(g[bad[0]]))

    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1 ** step)
    v_hat = v / (1.0 - state.beta2 ** step)
    new_values = values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)

    new_state = AdamState(m=m, v=v, step=step, lr=state.lr, beta1=state.beta1, beta2=state.beta2, eps=state.eps)
    if isinstance(params, ParameterSet):
        return params.with_values(new_values), new_state
    return new_values, new_state


# --- checkpoints ------------------------------------------------------------
# magic(8) | version u16 | header length u32 | header JSON | count u64 |
# float64 LE x count | CRC32 u32 over everything before it

def encode_checkpoint(spec: NetworkSpec, params: ParameterSet, meta: Optional[Dict[str, Any]] = None) -> bytes:
    if len(params) != spec.param_count:
        raise ValueError(f"spec needs {spec.param_count} parameters, got {len(params)}")
    header = json.dumps({"spec": spec.model_dump(mode="json"), "meta": meta or {}}, sort_keys=True).encode("utf-8")
    body = b"".join([
        CHECKPOINT_MAGIC,
        struct.pack("<HI", CHECKPOINT_VERSION, len(header)),
        header,
        struct.pack("<Q", len(params)),
        params.values.astype("<f8").tobytes(),
    ])
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_checkpoint(blob: bytes, source: str = "<bytes>") -> Tuple[NetworkSpec, ParameterSet, Dict[str, Any]]:
    head = len(CHECKPOINT_MAGIC) + 6
    if len(blob) < head + 12 or blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ArtifactError(f"{source}: not a checkpoint file")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ArtifactError(f"{source}: checksum mismatch")
    version, header_len = struct.unpack("<HI", blob[len(CHECKPOINT_MAGIC):head])
    if version != CHECKPOINT_VERSION:
        raise ArtifactError(f"{source}: unsupported checkpoint version {version}")
    header = json.loads(blob[head:head + header_len].decode("utf-8"))
    spec = NetworkSpec.model_validate(header["spec"])
    pos = head + header_len
    (count,) = struct.unpack("<Q", blob[pos:pos + 8])
    pos += 8
    if count != spec.param_count or len(body) - pos != 8 * count:
        raise ArtifactError(f"{source}: parameter count {count} does not match the stored spec ({spec.param_count})")
    values = np.frombuffer(blob[pos:pos + 8 * count], dtype="<f8").astype(np.float64)
    return spec, ParameterSet.for_spec(spec, values), header.get("meta", {})


def save_checkpoint(path: str, spec: NetworkSpec, params: ParameterSet, meta: Optional[Dict[str, Any]] = None) -> None:
    blob = encode_checkpoint(spec, params, meta)
    try:
        with open(path, "wb") as f:
            f.write(blob)
    except OSError as e:
        raise ArtifactError(f"cannot write checkpoint {path}: {e}") from e


def load_checkpoint(path: str) -> Tuple[NetworkSpec, ParameterSet, Dict[str, Any]]:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise ArtifactError(f"cannot read checkpoint {path}: {e}") from e
    return decode_checkpoint(blob, source=path)
