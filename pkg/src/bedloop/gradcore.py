"""Dense numerical core: fixed-architecture MLPs with hand-written reverse-mode
gradients, an adaptive-moment optimizer with optional learning-rate annealing,
a finite-difference verification harness, and a bitwise-exact checkpoint format.

All arithmetic is float64. Parameter collections travel as flat
``{name: ndarray}`` dicts so the optimizer, checkpointing and the
finite-difference harness stay independent of network structure.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

logger = logging.getLogger(__name__)

LN_EPS = 1e-5  # layer-norm variance floor

ACTIVATIONS = ("relu", "softplus", "identity")


class DimensionError(ValueError):
    """Shape mismatch between a layer and its input or recorded activations."""


class NonFiniteGradientError(RuntimeError):
    """Raised when a gradient contains NaN/inf; the step must not be applied."""


def act_forward(tag: str, z: np.ndarray) -> np.ndarray:
    if tag == "relu":
        return np.maximum(z, 0.0)
    if tag == "softplus":
        return np.logaddexp(0.0, z)
    if tag == "identity":
        return z
    raise ValueError(f"unknown activation {tag!r}")


def act_deriv(tag: str, z: np.ndarray) -> np.ndarray:
    if tag == "relu":
        return (z > 0.0).astype(np.float64)
    if tag == "softplus":
        # d/dz log(1+e^z) = sigmoid(z)
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    if tag == "identity":
        return np.ones_like(z)
    raise ValueError(f"unknown activation {tag!r}")


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"
    norm_gain: Optional[np.ndarray] = None  # (out,) -> layer norm enabled
    norm_bias: Optional[np.ndarray] = None

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def has_norm(self) -> bool:
        return self.norm_gain is not None


@dataclass
class MlpParams:
    layers: list[Layer]

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim


def mlp_init(
    widths: list[int],
    activations: list[str],
    rng: np.random.Generator,
    layer_norm: bool = False,
) -> MlpParams:
    """Build an MLP with uniform +-1/sqrt(fan_in) weights from the seeded rng.

    ``widths`` is [in, h1, ..., out]; ``activations`` has one tag per layer.
    ``layer_norm`` inserts per-row normalization with learned gain/bias after
    every affine map except the last layer.
    """
    if len(activations) != len(widths) - 1:
        raise ValueError("need one activation per layer")
    layers = []
    for i, (nin, nout) in enumerate(zip(widths[:-1], widths[1:])):
        bound = 1.0 / np.sqrt(nin)
        w = rng.uniform(-bound, bound, size=(nout, nin))
        b = rng.uniform(-bound, bound, size=nout)
        norm = layer_norm and i < len(widths) - 2
        layers.append(
            Layer(
                weight=w,
                bias=b,
                activation=activations[i],
                norm_gain=np.ones(nout) if norm else None,
                norm_bias=np.zeros(nout) if norm else None,
            )
        )
    return MlpParams(layers)


def _norm_forward(z: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    mean = z.mean(axis=-1, keepdims=True)
    var = z.var(axis=-1, keepdims=True)
    scale = np.sqrt(var + LN_EPS)
    zn = (z - mean) / scale
    return gain * zn + bias, zn, scale


def mlp_forward(params: MlpParams, x: np.ndarray) -> list[np.ndarray]:
    """Run the network; returns [input, pre_1, post_1, ..., pre_k, post_k].

    The last entry is the network output. Pre-activations are stored before
    layer normalization so the backward pass can rebuild the norm exactly.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != params.in_dim:
        raise DimensionError(
            f"layer 0 expects width {params.in_dim}, input has width {x.shape[1]}"
        )
    acts = [x]
    cur = x
    for i, layer in enumerate(params.layers):
        if cur.shape[1] != layer.in_dim:
            raise DimensionError(
                f"layer {i} expects width {layer.in_dim}, got {cur.shape[1]}"
            )
        z = cur @ layer.weight.T + layer.bias
        pre = z
        if layer.has_norm:
            pre, _, _ = _norm_forward(z, layer.norm_gain, layer.norm_bias)
        cur = act_forward(layer.activation, pre)
        acts.append(z)
        acts.append(cur)
    return acts


def mlp_output(params: MlpParams, x: np.ndarray) -> np.ndarray:
    return mlp_forward(params, x)[-1]


def mlp_backward(
    params: MlpParams, acts: list[np.ndarray], out_grad: np.ndarray
) -> tuple[MlpParams, np.ndarray]:
    """Exact reverse-mode gradients of <output, out_grad>.

    Returns (param_grads shaped like params, input gradient). ``acts`` must
    come from mlp_forward on the same params.
    """
    n_layers = len(params.layers)
    if len(acts) != 2 * n_layers + 1:
        raise DimensionError(
            f"activation record has {len(acts)} entries, expected {2 * n_layers + 1}"
        )
    g = np.asarray(out_grad, dtype=np.float64)
    if g.shape != acts[-1].shape:
        raise DimensionError(
            f"out_grad shape {g.shape} does not match output {acts[-1].shape}"
        )
    grad_layers: list[Layer] = [None] * n_layers  # type: ignore[list-item]
    for i in range(n_layers - 1, -1, -1):
        layer = params.layers[i]
        x_in = acts[2 * i]
        z = acts[2 * i + 1]
        if layer.has_norm:
            pre, zn, scale = _norm_forward(z, layer.norm_gain, layer.norm_bias)
            dpre = g * act_deriv(layer.activation, pre)
            dgain = (dpre * zn).sum(axis=0)
            dnbias = dpre.sum(axis=0)
            dzn = dpre * layer.norm_gain
            dz = (
                dzn
                - dzn.mean(axis=-1, keepdims=True)
                - zn * (dzn * zn).mean(axis=-1, keepdims=True)
            ) / scale
        else:
            dgain = dnbias = None
            dz = g * act_deriv(layer.activation, z)
        grad_layers[i] = Layer(
            weight=dz.T @ x_in,
            bias=dz.sum(axis=0),
            activation=layer.activation,
            norm_gain=dgain,
            norm_bias=dnbias,
        )
        g = dz @ layer.weight
    return MlpParams(grad_layers), g


def mlp_to_dict(params: MlpParams, prefix: str = "") -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for i, layer in enumerate(params.layers):
        out[f"{prefix}{i}.weight"] = layer.weight
        out[f"{prefix}{i}.bias"] = layer.bias
        if layer.has_norm:
            out[f"{prefix}{i}.norm_gain"] = layer.norm_gain
            out[f"{prefix}{i}.norm_bias"] = layer.norm_bias
    return out


def mlp_from_dict(
    template: MlpParams, tensors: dict[str, np.ndarray], prefix: str = ""
) -> MlpParams:
    layers = []
    for i, layer in enumerate(template.layers):
        w = tensors[f"{prefix}{i}.weight"]
        b = tensors[f"{prefix}{i}.bias"]
        if w.shape != layer.weight.shape or b.shape != layer.bias.shape:
            raise DimensionError(f"layer {i} checkpoint shape mismatch")
        layers.append(
            Layer(
                weight=np.array(w, dtype=np.float64),
                bias=np.array(b, dtype=np.float64),
                activation=layer.activation,
                norm_gain=np.array(tensors[f"{prefix}{i}.norm_gain"]) if layer.has_norm else None,
                norm_bias=np.array(tensors[f"{prefix}{i}.norm_bias"]) if layer.has_norm else None,
            )
        )
    return MlpParams(layers)


# ---------------------------------------------------------------------------
# parameter-dict helpers


def zeros_like_params(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


def add_scaled(
    acc: dict[str, np.ndarray], other: dict[str, np.ndarray], scale: float = 1.0
) -> dict[str, np.ndarray]:
    """In-place acc += scale * other for every shared key."""
    for k, v in other.items():
        if v is None:
            continue
        acc[k] += scale * v
    return acc


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_factor: Optional[float] = None
    decay_period: Optional[int] = None


def adam_init(
    params: dict[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    decay_factor: Optional[float] = None,
    decay_period: Optional[int] = None,
) -> AdamState:
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if not (0 < beta1 < 1 and 0 < beta2 < 1):
        raise ValueError("betas must lie in (0, 1)")
    return AdamState(
        step=0,
        m=zeros_like_params(params),
        v=zeros_like_params(params),
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
        decay_factor=decay_factor,
        decay_period=decay_period,
    )


def adam_effective_lr(state: AdamState) -> float:
    if state.decay_factor is None or state.decay_period is None:
        return state.lr
    return state.lr * state.decay_factor ** (state.step // state.decay_period)


def adam_step(
    state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]
) -> tuple[AdamState, dict[str, np.ndarray]]:
    """One bias-corrected adaptive-moment descent step (caller negates grads to ascend).

    Raises NonFiniteGradientError before touching any state when a gradient is
    not finite, so a training loop can log and skip the step.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in {name!r}")
    lr = adam_effective_lr(state)
    all_zero = all(not np.any(g) for g in grads.values())
    b1, b2 = state.beta1, state.beta2
    t = state.step + 1
    new_m, new_v, new_p = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        new_m[name] = m
        new_v[name] = v
        if all_zero:
            # exact-zero gradient must leave parameters untouched
            new_p[name] = p
        else:
            mhat = m / (1.0 - b1**t)
            vhat = v / (1.0 - b2**t)
            new_p[name] = p - lr * mhat / (np.sqrt(vhat) + state.eps)
    return replace(state, step=t, m=new_m, v=new_v), new_p


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_check(
    loss_fn: Callable[[dict[str, np.ndarray]], float],
    grad_fn: Callable[[dict[str, np.ndarray]], dict[str, np.ndarray]],
    params: dict[str, np.ndarray],
    h: float = 1e-5,
) -> float:
    """Max over coordinates of |g_analytic - g_fd| / max(1e-12, |g_fd|).

    ``loss_fn`` must be deterministic (fixed RNG stream); this is verified by
    evaluating it twice.
    """
    v1 = float(loss_fn(params))
    v2 = float(loss_fn(params))
    if v1 != v2:
        raise RuntimeError("loss is non-deterministic: two evaluations differ")
    analytic = grad_fn(params)
    worst = 0.0
    for name, p in params.items():
        ga = np.asarray(analytic[name], dtype=np.float64)
        flat = p.reshape(-1)
        ga_flat = ga.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            up = loss_fn(params)
            flat[idx] = orig - h
            dn = loss_fn(params)
            flat[idx] = orig
            gfd = (up - dn) / (2.0 * h)
            err = abs(ga_flat[idx] - gfd) / max(1e-12, abs(gfd))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoint format: JSON manifest + raw little-endian float64 blob


def save_tensors(
    stem: str | Path, tensors: dict[str, np.ndarray], metadata: Optional[dict] = None
) -> tuple[Path, Path]:
    """Write ``stem.json`` (manifest) and ``stem.bin`` (raw <f8 blob)."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    manifest = {"format": "bedloop-tensors-v1", "metadata": metadata or {}, "tensors": []}
    blob = bytearray()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        manifest["tensors"].append(
            {"name": name, "shape": list(arr.shape), "offset": len(blob)}
        )
        blob.extend(arr.tobytes())
    json_path = stem.with_suffix(".json")
    bin_path = stem.with_suffix(".bin")
    json_path.write_text(json.dumps(manifest, indent=2))
    bin_path.write_bytes(bytes(blob))
    return json_path, bin_path


def load_tensors(stem: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    stem = Path(stem)
    manifest = json.loads(stem.with_suffix(".json").read_text())
    if manifest.get("format") != "bedloop-tensors-v1":
        raise ValueError(f"unrecognized checkpoint format in {stem}.json")
    blob = stem.with_suffix(".bin").read_bytes()
    tensors = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        offset = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        tensors[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return tensors, manifest.get("metadata", {})
