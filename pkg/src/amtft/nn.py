"""Policy/value networks with hand-written reverse-mode gradients.

Two architectures are supported: a tabular softmax actor-critic (one row of
logits and one value per state) and the convolutional actor-critic used for
Coins. Convolutions over these tiny boards are lowered to dense matrices
built from the shared kernel, which makes forward and backward a pair of
matmuls per layer; kernel gradients are folded back with ``bincount``.

All gradients follow the *ascent* convention: ``backward`` returns
d(objective)/d(params) for an objective given by upstream gradients on the
logits and value outputs.
"""

from __future__ import annotations

import math
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class NumericalError(FloatingPointError):
    pass


@dataclass
class ParameterVector:
    """Flat parameter block plus the per-tensor shape manifest."""

    data: np.ndarray
    manifest: list[tuple[str, tuple[int, ...]]]
    version: int = 0

    def __post_init__(self):
        total = sum(int(np.prod(s)) for _, s in self.manifest)
        if total != self.data.size:
            raise ValueError(f"manifest describes {total} values, got {self.data.size}")

    def views(self) -> dict[str, np.ndarray]:
        out, off = {}, 0
        for name, shape in self.manifest:
            size = int(np.prod(shape))
            out[name] = self.data[off:off + size].reshape(shape)
            off += size
        return out

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.data.copy(), list(self.manifest), self.version)

    def like(self, data: np.ndarray) -> "ParameterVector":
        return ParameterVector(np.asarray(data, self.data.dtype), list(self.manifest), self.version)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# --------------------------------------------------------------------------
# tabular


@dataclass(frozen=True)
class TabularSpec:
    n_states: int
    n_actions: int
    kind: str = "tabular"


class TabularActorCritic:
    """Per-state logits and values; observations are state indices."""

    def __init__(self, spec: TabularSpec):
        self.spec = spec
        self.manifest = [("logits", (spec.n_states, spec.n_actions)), ("value", (spec.n_states,))]

    def init_params(self, rng: np.random.Generator | None = None, dtype=np.float32) -> ParameterVector:
        size = self.spec.n_states * (self.spec.n_actions + 1)
        return ParameterVector(np.zeros(size, dtype), self.manifest)

    def init_buffers(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, params: ParameterVector, obs, train: bool = False, buffers=None, update_stats: bool = True):
        obs = np.asarray(obs, np.int64)
        if obs.ndim != 1 or (obs.size and (obs.min() < 0 or obs.max() >= self.spec.n_states)):
            raise ValueError(f"tabular observation must be state indices in 0..{self.spec.n_states - 1}")
        v = params.views()
        return v["logits"][obs], v["value"][obs], obs

    def compile(self, params: ParameterVector, buffers=None):
        v = params.views()
        logits, value = v["logits"].copy(), v["value"].copy()

        def run(obs):
            obs = np.asarray(obs, np.int64)
            if obs.ndim != 1 or (obs.size and (obs.min() < 0 or obs.max() >= self.spec.n_states)):
                raise ValueError(f"tabular observation must be state indices in 0..{self.spec.n_states - 1}")
            return logits[obs], value[obs]

        return run

    def backward(self, params: ParameterVector, cache, dlogits, dvalue) -> np.ndarray:
        obs = cache
        g = np.zeros_like(params.data)
        gv = params.like(g).views()
        np.add.at(gv["logits"], obs, dlogits)
        np.add.at(gv["value"], obs, dvalue)
        return g


# --------------------------------------------------------------------------
# convolutional


@dataclass(frozen=True)
class ConvSpec:
    """Conv actor-critic for a k x k board: ``ceil(log2 k) + 1`` layers of
    3x3 conv (+ batch norm) + ReLU, stride 1 then 2, channels doubling."""

    k: int = 5
    in_channels: int = 4
    base_channels: int = 13
    n_actions: int = 4
    batch_norm: bool = True
    kind: str = "conv"

    @property
    def n_layers(self) -> int:
        return math.ceil(math.log2(self.k)) + 1

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * 2 ** i for i in range(self.n_layers))

    @property
    def sizes(self) -> tuple[int, ...]:
        out = [self.k]
        for i in range(1, self.n_layers):
            out.append((out[-1] - 1) // 2 + 1)
        return tuple(out)


def _conv_indices(cin, hin, cout, hout, stride):
    """Dense-matrix coordinates of every kernel tap for a padded 3x3 conv."""
    rows, cols, kidx = [], [], []
    for co in range(cout):
        for i in range(hout):
            for j in range(hout):
                col = (co * hout + i) * hout + j
                for ci in range(cin):
                    for di in range(3):
                        for dj in range(3):
                            hi, wi = i * stride - 1 + di, j * stride - 1 + dj
                            if 0 <= hi < hin and 0 <= wi < hin:
                                rows.append((ci * hin + hi) * hin + wi)
                                cols.append(col)
                                kidx.append(((co * cin + ci) * 3 + di) * 3 + dj)
    return np.array(rows), np.array(cols), np.array(kidx)


class ConvActorCritic:
    def __init__(self, spec: ConvSpec):
        self.spec = spec
        self.layers = []
        manifest = []
        cin, hin = spec.in_channels, spec.k
        for i, (cout, hout) in enumerate(zip(spec.channels, spec.sizes)):
            stride = 1 if i == 0 else 2
            rows, cols, kidx = _conv_indices(cin, hin, cout, hout, stride)
            self.layers.append(dict(cin=cin, hin=hin, cout=cout, hout=hout, rows=rows, cols=cols, kidx=kidx,
                                    shape=(cin * hin * hin, cout * hout * hout)))
            manifest.append((f"conv{i}.w", (cout, cin, 3, 3)))
            if spec.batch_norm:
                manifest.append((f"bn{i}.gamma", (cout,)))
                manifest.append((f"bn{i}.beta", (cout,)))
            else:
                manifest.append((f"conv{i}.b", (cout,)))
            cin, hin = cout, hout
        self.features = cin * hin * hin
        manifest += [
            ("pi.w", (self.features, spec.n_actions)),
            ("pi.b", (spec.n_actions,)),
            ("v.w", (self.features, 1)),
            ("v.b", (1,)),
        ]
        self.manifest = manifest

    def init_params(self, rng: np.random.Generator, dtype=np.float32) -> ParameterVector:
        pv = ParameterVector(np.zeros(sum(int(np.prod(s)) for _, s in self.manifest), dtype), self.manifest)
        v = pv.views()
        for name, shape in self.manifest:
            if name.endswith(".gamma"):
                v[name][...] = 1.0
            elif name.endswith(".w"):
                fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
                bound = 1.0 / math.sqrt(fan_in)
                v[name][...] = rng.uniform(-bound, bound, size=shape)
        return pv

    def init_buffers(self) -> dict[str, np.ndarray]:
        if not self.spec.batch_norm:
            return {}
        out = {}
        for i, c in enumerate(self.spec.channels):
            out[f"bn{i}.mean"] = np.zeros(c, np.float32)
            out[f"bn{i}.var"] = np.ones(c, np.float32)
        return out

    def _dense(self, layer, kernel):
        w = np.zeros(layer["shape"], kernel.dtype)
        w[layer["rows"], layer["cols"]] = kernel.ravel()[layer["kidx"]]
        return w

    def forward(self, params: ParameterVector, obs, train: bool = False, buffers=None, update_stats: bool = True):
        """``obs`` is (n, in_channels, k, k). In training mode batch norm uses
        batch statistics (and updates ``buffers`` if given); otherwise it uses
        the running statistics in ``buffers``."""
        spec = self.spec
        obs = np.asarray(obs)
        if obs.ndim != 4 or obs.shape[1:] != (spec.in_channels, spec.k, spec.k):
            raise ValueError(f"expected observation shape (n, {spec.in_channels}, {spec.k}, {spec.k}), got {obs.shape}")
        v = params.views()
        dtype = params.data.dtype
        x = obs.reshape(len(obs), -1).astype(dtype, copy=False)
        cache = []
        for i, layer in enumerate(self.layers):
            w = self._dense(layer, v[f"conv{i}.w"])
            z = x @ w
            c, hw = layer["cout"], layer["hout"] ** 2
            entry = dict(x=x, w=w)
            if spec.batch_norm:
                z3 = z.reshape(len(z), c, hw)
                if train:
                    mu = z3.mean(axis=(0, 2))
                    var = z3.var(axis=(0, 2))
                    if buffers is not None and update_stats:
                        m = len(z) * hw
                        unbiased = var * m / max(m - 1, 1)
                        buffers[f"bn{i}.mean"] = ((1 - BN_MOMENTUM) * buffers[f"bn{i}.mean"] + BN_MOMENTUM * mu).astype(np.float32)
                        buffers[f"bn{i}.var"] = ((1 - BN_MOMENTUM) * buffers[f"bn{i}.var"] + BN_MOMENTUM * unbiased).astype(np.float32)
                else:
                    mu = buffers[f"bn{i}.mean"].astype(dtype)
                    var = buffers[f"bn{i}.var"].astype(dtype)
                invstd = 1.0 / np.sqrt(var + BN_EPS)
                zhat = (z3 - mu[None, :, None]) * invstd[None, :, None]
                y = zhat * v[f"bn{i}.gamma"][None, :, None] + v[f"bn{i}.beta"][None, :, None]
                y = y.reshape(len(z), -1)
                entry.update(zhat=zhat, invstd=invstd, train=train)
            else:
                y = z + np.repeat(v[f"conv{i}.b"], hw)[None, :]
            x = np.maximum(y, 0)
            entry["mask"] = y > 0
            if not np.all(np.isfinite(x)):
                raise NumericalError(f"non-finite activation after layer {i} (conv{i})")
            cache.append(entry)
        logits = x @ v["pi.w"] + v["pi.b"]
        value = (x @ v["v.w"])[:, 0] + v["v.b"][0]
        if not (np.all(np.isfinite(logits)) and np.all(np.isfinite(value))):
            raise NumericalError("non-finite activation in policy/value heads")
        return logits, value, (cache, x)

    def compile(self, params: ParameterVector, buffers=None):
        """Inference-only closure with dense weights built once and batch
        norm (running statistics) folded into them."""
        spec, v = self.spec, params.views()
        dtype = params.data.dtype
        plan = []
        for i, layer in enumerate(self.layers):
            w = self._dense(layer, v[f"conv{i}.w"])
            hw = layer["hout"] ** 2
            if spec.batch_norm:
                scale = v[f"bn{i}.gamma"] / np.sqrt(buffers[f"bn{i}.var"].astype(dtype) + BN_EPS)
                shift = v[f"bn{i}.beta"] - buffers[f"bn{i}.mean"].astype(dtype) * scale
                w = w * np.repeat(scale, hw)[None, :]
                b = np.repeat(shift, hw)
            else:
                b = np.repeat(v[f"conv{i}.b"], hw)
            plan.append((w.astype(dtype), b.astype(dtype)))
        heads = (v["pi.w"].copy(), v["pi.b"].copy(), v["v.w"][:, 0].copy(), float(v["v.b"][0]))
        shape = (spec.in_channels, spec.k, spec.k)

        def run(obs):
            obs = np.asarray(obs)
            if obs.ndim != 4 or obs.shape[1:] != shape:
                raise ValueError(f"expected observation shape (n, {shape[0]}, {spec.k}, {spec.k}), got {obs.shape}")
            x = obs.reshape(len(obs), -1).astype(dtype, copy=False)
            for w, b in plan:
                x = np.maximum(x @ w + b, 0)
            pw, pb, vw, vb = heads
            logits, value = x @ pw + pb, x @ vw + vb
            if not (np.all(np.isfinite(logits)) and np.all(np.isfinite(value))):
                raise NumericalError("non-finite activation in policy/value heads")
            return logits, value

        return run

    def backward(self, params: ParameterVector, cache, dlogits, dvalue) -> np.ndarray:
        layers_cache, h = cache
        v = params.views()
        g = np.zeros_like(params.data)
        gv = params.like(g).views()
        dtype = params.data.dtype
        dlogits = np.asarray(dlogits, dtype)
        dvalue = np.asarray(dvalue, dtype)
        gv["pi.w"][...] = h.T @ dlogits
        gv["pi.b"][...] = dlogits.sum(0)
        gv["v.w"][...] = (h.T @ dvalue)[:, None]
        gv["v.b"][...] = dvalue.sum()
        dx = dlogits @ v["pi.w"].T + np.outer(dvalue, v["v.w"][:, 0])
        for i in reversed(range(len(self.layers))):
            layer, entry = self.layers[i], layers_cache[i]
            dy = dx * entry["mask"]
            c, hw = layer["cout"], layer["hout"] ** 2
            if self.spec.batch_norm:
                dy3 = dy.reshape(len(dy), c, hw)
                zhat = entry["zhat"]
                gv[f"bn{i}.gamma"][...] = (dy3 * zhat).sum(axis=(0, 2))
                gv[f"bn{i}.beta"][...] = dy3.sum(axis=(0, 2))
                dzhat = dy3 * v[f"bn{i}.gamma"][None, :, None]
                invstd = entry["invstd"][None, :, None]
                if entry["train"]:
                    m = dy3.shape[0] * hw
                    s1 = dzhat.sum(axis=(0, 2), keepdims=True)
                    s2 = (dzhat * zhat).sum(axis=(0, 2), keepdims=True)
                    dz = invstd * (dzhat - s1 / m - zhat * s2 / m)
                else:
                    dz = dzhat * invstd
                dz = dz.reshape(len(dy), -1)
            else:
                gv[f"conv{i}.b"][...] = dy.reshape(len(dy), c, hw).sum(axis=(0, 2))
                dz = dy
            dw_dense = entry["x"].T @ dz
            taps = dw_dense[layer["rows"], layer["cols"]]
            gv[f"conv{i}.w"][...] = np.bincount(
                layer["kidx"], weights=taps, minlength=gv[f"conv{i}.w"].size
            ).reshape(gv[f"conv{i}.w"].shape)
            if i:
                dx = dz @ entry["w"].T
        return g


def build_model(spec):
    if isinstance(spec, TabularSpec):
        return TabularActorCritic(spec)
    if isinstance(spec, ConvSpec):
        return ConvActorCritic(spec)
    raise TypeError(f"unknown model spec {spec!r}")


def spec_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind")
    return TabularSpec(**d) if kind == "tabular" else ConvSpec(**d)


# --------------------------------------------------------------------------
# spec-level helpers


def forward(params: ParameterVector, spec, observation, buffers=None):
    """Action distribution and value for a batch of observations (eval mode)."""
    model = build_model(spec)
    if buffers is None:
        buffers = model.init_buffers()
    logits, value, _ = model.forward(params, observation, train=False, buffers=buffers)
    return softmax(logits), value


def backward(params: ParameterVector, spec, observations, actions, value_weights, policy_weights,
             buffers=None, train: bool = False) -> ParameterVector:
    """Gradient of sum_t(value_weights[t] * V(s_t) + policy_weights[t] * log pi(a_t | s_t))."""
    model = build_model(spec)
    if buffers is None:
        buffers = model.init_buffers()
    if len(actions) == 0:
        raise ValueError("backward needs a nonempty batch")
    logits, _, cache = model.forward(params, observations, train=train, buffers=dict(buffers), update_stats=False)
    dlogits = policy_weights[:, None] * (np.eye(logits.shape[1])[actions] - softmax(logits))
    return params.like(model.backward(params, cache, dlogits, np.asarray(value_weights)))


# --------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    algorithm: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.algorithm not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.algorithm!r}")


def optimizer_step(opt: OptimizerState, params: ParameterVector, grad) -> tuple[ParameterVector, OptimizerState]:
    """Gradient *ascent* step; returns new params and optimizer state."""
    g = np.asarray(getattr(grad, "data", grad), np.float64)
    if g.shape != params.data.shape:
        raise ValueError(f"gradient shape {g.shape} != params shape {params.data.shape}")
    theta = params.data.astype(np.float64)
    if opt.algorithm == "sgd":
        new = theta + opt.lr * g
        nopt = OptimizerState(**{**asdict(opt), "step": opt.step + 1})
    else:
        m = np.zeros_like(g) if opt.m is None else opt.m
        v = np.zeros_like(g) if opt.v is None else opt.v
        t = opt.step + 1
        m = opt.beta1 * m + (1 - opt.beta1) * g
        v = opt.beta2 * v + (1 - opt.beta2) * g * g
        mhat = m / (1 - opt.beta1 ** t)
        vhat = v / (1 - opt.beta2 ** t)
        new = theta + opt.lr * mhat / (np.sqrt(vhat) + opt.eps)
        nopt = OptimizerState(opt.algorithm, opt.lr, opt.beta1, opt.beta2, opt.eps, t, m, v)
    out = ParameterVector(new.astype(params.data.dtype), list(params.manifest), params.version + 1)
    return out, nopt


# --------------------------------------------------------------------------
# checkpoints

MAGIC = b"AMTFT-CKPT\x00"
FORMAT_VERSION = 1


def save_checkpoint(path, params: ParameterVector, spec, buffers: dict | None = None, meta: dict | None = None) -> None:
    """Header (JSON, length-prefixed) followed by little-endian float32 params
    and then any buffers, in manifest order."""
    buffers = buffers or {}
    header = {
        "format": FORMAT_VERSION,
        "spec": asdict(spec),
        "manifest": [[n, list(s)] for n, s in params.manifest],
        "version": params.version,
        "buffers": [[n, list(np.shape(b))] for n, b in sorted(buffers.items())],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = [params.data.astype("<f4").tobytes()]
    payload += [np.asarray(buffers[n], "<f4").tobytes() for n in sorted(buffers)]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in payload:
            fh.write(p)


def load_checkpoint(path):
    """Returns ``(params, spec, buffers, meta)``."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path} is not an amtft checkpoint")
    off = len(MAGIC)
    (n,) = struct.unpack_from("<I", raw, off)
    off += 4
    header = json.loads(raw[off:off + n].decode("utf-8"))
    off += n
    if header["format"] != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {header['format']}")
    manifest = [(name, tuple(shape)) for name, shape in header["manifest"]]
    size = sum(int(np.prod(s)) for _, s in manifest)
    data = np.frombuffer(raw, "<f4", size, off).astype(np.float32)
    off += 4 * size
    buffers = {}
    for name, shape in header["buffers"]:
        cnt = int(np.prod(shape))
        buffers[name] = np.frombuffer(raw, "<f4", cnt, off).reshape(shape).astype(np.float32)
        off += 4 * cnt
    params = ParameterVector(data, manifest, header["version"])
    return params, spec_from_dict(header["spec"]), buffers, header["meta"]
