"""Dueling Q-network in numpy with a hand-written backward pass.

    h1 = lrelu(x W1 + b1)           trunk, 2 hidden layers
    h2 = lrelu(h1 W2 + b2)
    V  = lrelu(h2 Wv1 + bv1) Wv2 + bv2          value stream -> 1
    A  = lrelu(h2 Wa1 + ba1) Wa2 + ba2          advantage stream -> n_actions
    Q  = V + A - mean(A)

Weights are stored ``(fan_in, fan_out)`` and inputs are row batches.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from morphine_rl.mdp import N_ACTIONS, STATE_DIM, Normalizer

PARAM_NAMES = ("W1", "b1", "W2", "b2", "Wv1", "bv1", "Wv2", "bv2", "Wa1", "ba1", "Wa2", "ba2")

CHECKPOINT_MAGIC = b"MRLQCKPT"
CHECKPOINT_VERSION = 1


class DimensionError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    pass


class NumericalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class Architecture:
    n_inputs: int = STATE_DIM
    hidden: int = 64
    stream_hidden: int = 32
    n_actions: int = N_ACTIONS
    slope: float = 0.01

    def shapes(self) -> dict[str, tuple[int, ...]]:
        d, h, s, a = self.n_inputs, self.hidden, self.stream_hidden, self.n_actions
        return {
            "W1": (d, h), "b1": (h,), "W2": (h, h), "b2": (h,),
            "Wv1": (h, s), "bv1": (s,), "Wv2": (s, 1), "bv2": (1,),
            "Wa1": (h, s), "ba1": (s,), "Wa2": (s, a), "ba2": (a,),
        }


@dataclass
class QParams:
    """Network weights plus Adam state.

    All arrays in ``params`` are views into the single vector ``flat`` (in
    ``PARAM_NAMES`` order); ``m``/``v`` are the matching Adam moments.
    """

    arch: Architecture
    params: dict[str, np.ndarray]
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    step: int = 0
    # bumped on every in-place update so stale forward caches are detectable
    version: int = 0
    flat: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        shapes = self.arch.shapes()
        for name in PARAM_NAMES:
            if np.shape(self.params[name]) != shapes[name]:
                raise DimensionError(f"{name}: shape {np.shape(self.params[name])}, expected {shapes[name]}")
        self.flat = np.concatenate([np.asarray(self.params[n], dtype=np.float64).ravel() for n in PARAM_NAMES])
        self.params = unflatten(self.arch, self.flat)
        if self.m is None:
            self.m = np.zeros_like(self.flat)
            self.v = np.zeros_like(self.flat)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def n_params(self) -> int:
        return self.flat.size


def unflatten(arch: Architecture, flat: np.ndarray) -> dict[str, np.ndarray]:
    """Views into ``flat`` shaped per parameter."""
    out, offset = {}, 0
    for name, shape in arch.shapes().items():
        size = int(np.prod(shape))
        out[name] = flat[offset:offset + size].reshape(shape)
        offset += size
    return out


def flatten_grads(grads: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(grads[n], dtype=np.float64).ravel() for n in PARAM_NAMES])


def init_params(arch: Architecture = Architecture(), rng: np.random.Generator | int = 0) -> QParams:
    """Weights and biases uniform in +-1/sqrt(fan_in)."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    params = {}
    for name, shape in arch.shapes().items():
        fan_in = shape[0] if len(shape) == 2 else arch.shapes()["W" + name[1:]][0]
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape)
    return QParams(arch, params)


def zeros_params(arch: Architecture = Architecture()) -> QParams:
    return QParams(arch, {k: np.zeros(s) for k, s in arch.shapes().items()})


@dataclass
class QOutput:
    q_values: np.ndarray
    value: np.ndarray
    advantage: np.ndarray
    cache: dict
    version: int
    params_id: int


def _lrelu(z, slope):
    # valid for 0 <= slope <= 1
    return np.maximum(z, slope * z)


def forward(params: QParams, states: np.ndarray) -> QOutput:
    """Q-values for a batch of (normalized) states, or a single state."""
    x = np.asarray(states, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.arch.n_inputs:
        raise DimensionError(f"expected states of width {params.arch.n_inputs}, got shape {np.shape(states)}")
    p, slope = params.params, params.arch.slope
    z1 = x @ p["W1"] + p["b1"]
    h1 = _lrelu(z1, slope)
    z2 = h1 @ p["W2"] + p["b2"]
    h2 = _lrelu(z2, slope)
    zv = h2 @ p["Wv1"] + p["bv1"]
    hv = _lrelu(zv, slope)
    value = hv @ p["Wv2"] + p["bv2"]  # (B, 1)
    za = h2 @ p["Wa1"] + p["ba1"]
    ha = _lrelu(za, slope)
    adv = ha @ p["Wa2"] + p["ba2"]  # (B, A)
    q = value + adv - adv.sum(axis=1, keepdims=True) * (1.0 / adv.shape[1])
    cache = dict(x=x, z1=z1, h1=h1, z2=z2, h2=h2, zv=zv, hv=hv, za=za, ha=ha)
    if single:
        return QOutput(q[0], value[0], adv[0], cache, params.version, id(params))
    return QOutput(q, value[:, 0], adv, cache, params.version, id(params))


def huber_grad(td: np.ndarray, delta: float | None) -> np.ndarray:
    """d/dtd of the Huber loss; ``delta=None`` gives the plain squared loss."""
    return td if delta is None else np.clip(td, -delta, delta)


def huber_loss(td: np.ndarray, delta: float | None) -> np.ndarray:
    if delta is None:
        return 0.5 * td**2
    a = np.abs(td)
    return np.where(a <= delta, 0.5 * td**2, delta * (a - 0.5 * delta))


def backward(
    params: QParams,
    out: QOutput,
    actions,
    td_errors,
    is_weights=None,
    huber_delta: float | None = 1.0,
) -> dict[str, np.ndarray]:
    """Gradients of ``mean_i w_i * huber(td_i)`` with respect to every parameter.

    ``td_errors`` are prediction minus target, Q(s_i, a_i) - y_i; only the
    taken action's Q-value receives gradient.
    """
    if out.version != params.version or out.params_id != id(params):
        raise StaleCacheError("forward cache does not belong to the current parameters")
    c, p, slope = out.cache, params.params, params.arch.slope
    batch = c["x"].shape[0]
    actions = np.atleast_1d(np.asarray(actions, dtype=np.int64))
    td = np.atleast_1d(np.asarray(td_errors, dtype=np.float64))
    w = np.ones(batch) if is_weights is None else np.atleast_1d(np.asarray(is_weights, dtype=np.float64))
    if not len(actions) == len(td) == len(w) == batch:
        raise DimensionError("actions, td_errors and is_weights must match the forward batch")

    dq = np.zeros((batch, params.arch.n_actions))
    dq[np.arange(batch), actions] = w * huber_grad(td, huber_delta) / batch

    dvalue = dq.sum(axis=1, keepdims=True)
    dadv = dq - dq.mean(axis=1, keepdims=True)

    g = {}
    g["Wv2"] = c["hv"].T @ dvalue
    g["bv2"] = dvalue.sum(axis=0)
    dzv = (dvalue @ p["Wv2"].T) * np.where(c["zv"] > 0, 1.0, slope)
    g["Wv1"] = c["h2"].T @ dzv
    g["bv1"] = dzv.sum(axis=0)

    g["Wa2"] = c["ha"].T @ dadv
    g["ba2"] = dadv.sum(axis=0)
    dza = (dadv @ p["Wa2"].T) * np.where(c["za"] > 0, 1.0, slope)
    g["Wa1"] = c["h2"].T @ dza
    g["ba1"] = dza.sum(axis=0)

    dh2 = dzv @ p["Wv1"].T + dza @ p["Wa1"].T
    dz2 = dh2 * np.where(c["z2"] > 0, 1.0, slope)
    g["W2"] = c["h1"].T @ dz2
    g["b2"] = dz2.sum(axis=0)
    dz1 = (dz2 @ p["W2"].T) * np.where(c["z1"] > 0, 1.0, slope)
    g["W1"] = c["x"].T @ dz1
    g["b1"] = dz1.sum(axis=0)
    return g


def weighted_loss(
    params: QParams, states, actions, targets, is_weights=None, huber_delta: float | None = 1.0
) -> float:
    out = forward(params, np.atleast_2d(states))
    actions = np.atleast_1d(actions)
    td = out.q_values[np.arange(len(actions)), actions] - np.atleast_1d(targets)
    w = np.ones(len(td)) if is_weights is None else np.asarray(is_weights)
    return float(np.mean(w * huber_loss(td, huber_delta)))


def adam_update(
    params: QParams,
    grads: dict[str, np.ndarray] | np.ndarray,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> QParams:
    """One bias-corrected Adam step, applied in place."""
    g = grads if isinstance(grads, np.ndarray) else flatten_grads(grads)
    if g.shape != params.flat.shape:
        raise DimensionError(f"gradient vector has {g.size} entries, network has {params.flat.size}")
    if not np.all(np.isfinite(g)):
        bad = [n for n, a in unflatten(params.arch, g).items() if not np.all(np.isfinite(a))]
        raise NumericalError(f"non-finite gradient in {', '.join(bad)} at Adam step {params.step + 1}")
    params.step += 1
    t = params.step
    params.m *= beta1
    params.m += (1.0 - beta1) * g
    params.v *= beta2
    params.v += (1.0 - beta2) * g * g
    m_hat = params.m / (1.0 - beta1**t)
    v_hat = params.v / (1.0 - beta2**t)
    params.flat -= lr * m_hat / (np.sqrt(v_hat) + eps)
    params.version += 1
    return params


def copy_params(src: QParams) -> QParams:
    """Bitwise copy of the weights with a fresh (zero) optimizer state."""
    return QParams(src.arch, {k: v.copy() for k, v in src.params.items()})


def params_equal(a: QParams, b: QParams) -> bool:
    return a.arch == b.arch and np.array_equal(a.flat, b.flat)


# -- checkpoint file ------------------------------------------------------
#
#   8 bytes   magic "MRLQCKPT"
#   u32 LE    format version
#   u32 LE    header length n
#   n bytes   UTF-8 JSON header: architecture, [name, shape] list in storage
#             order, normalizer mean/std, free-form metadata
#   ...       each parameter array as float64 little-endian, C order, in
#             header order


def save_checkpoint(path: str | Path, params: QParams, normalizer: Normalizer | None = None, meta: dict | None = None) -> None:
    header = {
        "architecture": {
            "n_inputs": params.arch.n_inputs, "hidden": params.arch.hidden,
            "stream_hidden": params.arch.stream_hidden, "n_actions": params.arch.n_actions,
            "slope": params.arch.slope,
        },
        "arrays": [[name, list(params.params[name].shape)] for name in PARAM_NAMES],
        "normalizer": normalizer.to_dict() if normalizer is not None else None,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for name in PARAM_NAMES:
            fh.write(np.ascontiguousarray(params.params[name], dtype="<f8").tobytes())


@dataclass
class Checkpoint:
    params: QParams
    normalizer: Normalizer | None
    meta: dict


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, n = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + n])
    arch = Architecture(**header["architecture"])
    offset = 16 + n
    params = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape))
        params[name] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * count
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes")
    norm = header["normalizer"]
    return Checkpoint(QParams(arch, params), Normalizer.from_dict(norm) if norm else None, header["meta"])
