"""Permutation-invariant design policy: each (design, outcome) pair is embedded
by an encoder, pair embeddings are sum-pooled into a fixed-width history
representation, and a decoder maps the pooled vector to the next raw design.

Model-specific variants: the binary-choice encoder sees the raw design only
and mixes two output heads by the outcome; the basket model embeds design and
outcome separately (with layer norm) before encoding; the default encoder
takes the raw design concatenated with the outcome.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import gradcore as gc
from .models.base import History, Model


@dataclass
class PolicyArch:
    raw_design_dim: int
    pool_width: int
    encoder_widths: tuple[int, ...]
    decoder_widths: tuple[int, ...]
    encoder_activation: str = "relu"
    decoder_activation: str = "relu"
    outcome_in_input: bool = True
    gated_heads: bool = False
    embed_inputs: bool = False
    embed_width: int = 0
    layer_norm: bool = False
    encoder_out_norm_act: bool = False  # normalized+activated encoder output

    @property
    def encoder_in(self) -> int:
        if self.embed_inputs:
            return 2 * self.embed_width
        return self.raw_design_dim + (1 if self.outcome_in_input else 0)


def default_arch(model: Model, scale: str = "paper") -> PolicyArch:
    """Published architecture per model; ``scale='desk'`` shrinks widths."""
    desk = scale == "desk"
    if model.name == "location":
        return PolicyArch(
            raw_design_dim=model.raw_design_dim,
            pool_width=8 if desk else 16,
            encoder_widths=(32, 32) if desk else (64, 256),
            decoder_widths=(32, 8) if desk else (128, 16),
        )
    if model.name == "discounting":
        return PolicyArch(
            raw_design_dim=2,
            pool_width=8 if desk else 16,
            encoder_widths=(64, 64) if desk else (256, 256),
            decoder_widths=(64, 64) if desk else (256, 256),
            encoder_activation="softplus",
            decoder_activation="softplus",
            outcome_in_input=False,
            gated_heads=True,
        )
    if model.name == "ces":
        return PolicyArch(
            raw_design_dim=6,
            pool_width=16 if desk else 32,
            encoder_widths=(64,) if desk else (128,),
            decoder_widths=(64,) if desk else (128,),
            embed_inputs=True,
            embed_width=16 if desk else 32,
            layer_norm=True,
            encoder_out_norm_act=True,
        )
    if model.name == "toy":
        return PolicyArch(
            raw_design_dim=1,
            pool_width=8,
            encoder_widths=(16,),
            decoder_widths=(16,),
        )
    raise ValueError(f"no default architecture for model {model.name!r}")


@dataclass
class PairCache:
    u: np.ndarray
    y: np.ndarray
    trunk_acts: list
    embed_d_acts: Optional[list] = None
    embed_y_acts: Optional[list] = None
    head_on_acts: Optional[list] = None
    head_off_acts: Optional[list] = None


class PolicyNetwork:
    """Owns the sub-networks; parameters are exposed as a flat name->array dict."""

    def __init__(self, model: Model, arch: PolicyArch, rng: np.random.Generator):
        self.model = model
        self.arch = arch
        self.train_steps = 0
        self.refined_at: Optional[int] = None
        self.version = 0
        a = arch
        act = a.encoder_activation
        if a.embed_inputs:
            self.embed_design = gc.mlp_init(
                [a.raw_design_dim, a.embed_width], [act], rng, layer_norm=False
            )
            self.embed_outcome = gc.mlp_init(
                [1, a.embed_width], [act], rng, layer_norm=False
            )
            # embedding layers normalize before the nonlinearity
            for mlp in (self.embed_design, self.embed_outcome):
                if a.layer_norm:
                    lay = mlp.layers[0]
                    lay.norm_gain = np.ones(lay.out_dim)
                    lay.norm_bias = np.zeros(lay.out_dim)
        else:
            self.embed_design = None
            self.embed_outcome = None
        trunk_out = a.encoder_widths[-1] if a.gated_heads else a.pool_width
        trunk_widths = [a.encoder_in, *a.encoder_widths] if a.gated_heads else [
            a.encoder_in, *a.encoder_widths, a.pool_width
        ]
        trunk_acts = [act] * (len(trunk_widths) - 1)
        if not a.gated_heads and not a.encoder_out_norm_act:
            trunk_acts[-1] = "identity"
        self.encoder = gc.mlp_init(trunk_widths, trunk_acts, rng, layer_norm=a.layer_norm)
        if a.encoder_out_norm_act and a.layer_norm and not a.gated_heads:
            last = self.encoder.layers[-1]
            last.norm_gain = np.ones(last.out_dim)
            last.norm_bias = np.zeros(last.out_dim)
        if a.gated_heads:
            self.head_on = gc.mlp_init([trunk_out, a.pool_width], ["identity"], rng)
            self.head_off = gc.mlp_init([trunk_out, a.pool_width], ["identity"], rng)
        else:
            self.head_on = None
            self.head_off = None
        dec_widths = [a.pool_width, *a.decoder_widths, a.raw_design_dim]
        dec_acts = [a.decoder_activation] * (len(dec_widths) - 2) + ["identity"]
        self.decoder = gc.mlp_init(dec_widths, dec_acts, rng, layer_norm=False)

    # --- parameter plumbing -------------------------------------------------
    def _parts(self):
        parts = [("encoder.", self.encoder), ("decoder.", self.decoder)]
        if self.embed_design is not None:
            parts += [("embed_design.", self.embed_design), ("embed_outcome.", self.embed_outcome)]
        if self.head_on is not None:
            parts += [("head_on.", self.head_on), ("head_off.", self.head_off)]
        return parts

    def to_dict(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for prefix, mlp in self._parts():
            out.update(gc.mlp_to_dict(mlp, prefix))
        return out

    def load_dict(self, tensors: dict[str, np.ndarray]) -> None:
        for prefix, mlp in self._parts():
            updated = gc.mlp_from_dict(mlp, tensors, prefix)
            mlp.layers = updated.layers
        self.version += 1

    def clone(self) -> "PolicyNetwork":
        twin = object.__new__(PolicyNetwork)
        twin.model = self.model
        twin.arch = self.arch
        twin.train_steps = self.train_steps
        twin.refined_at = self.refined_at
        twin.version = 0
        for prefix, mlp in self._parts():
            name = prefix.rstrip(".")
            setattr(twin, name, gc.mlp_from_dict(mlp, gc.mlp_to_dict(mlp, prefix), prefix))
        if self.embed_design is None:
            twin.embed_design = twin.embed_outcome = None
        if self.head_on is None:
            twin.head_on = twin.head_off = None
        return twin

    # --- per-pair encoder ----------------------------------------------------
    def pair_forward(self, u: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, PairCache]:
        """Embed one (raw design, outcome) pair per row; returns (N, pool)."""
        u = np.atleast_2d(np.asarray(u, dtype=np.float64))
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        cache = PairCache(u=u, y=y, trunk_acts=[])
        if self.arch.embed_inputs:
            cache.embed_d_acts = gc.mlp_forward(self.embed_design, u)
            cache.embed_y_acts = gc.mlp_forward(self.embed_outcome, y[:, None])
            enc_in = np.concatenate(
                [cache.embed_d_acts[-1], cache.embed_y_acts[-1]], axis=1
            )
        elif self.arch.outcome_in_input:
            enc_in = np.concatenate([u, y[:, None]], axis=1)
        else:
            enc_in = u
        cache.trunk_acts = gc.mlp_forward(self.encoder, enc_in)
        z = cache.trunk_acts[-1]
        if self.arch.gated_heads:
            cache.head_on_acts = gc.mlp_forward(self.head_on, z)
            cache.head_off_acts = gc.mlp_forward(self.head_off, z)
            gate = y[:, None]
            r = gate * cache.head_on_acts[-1] + (1.0 - gate) * cache.head_off_acts[-1]
        else:
            r = z
        return r, cache

    def pair_backward(
        self, cache: PairCache, grad: np.ndarray
    ) -> tuple[dict[str, np.ndarray], np.ndarray, np.ndarray]:
        """Backprop a pooled-representation gradient; returns (grads, du, dy)."""
        grads: dict[str, np.ndarray] = {}
        dy = np.zeros_like(cache.y)
        if self.arch.gated_heads:
            gate = cache.y[:, None]
            on_out = cache.head_on_acts[-1]
            off_out = cache.head_off_acts[-1]
            dy += (grad * (on_out - off_out)).sum(axis=1)
            g_on, dz_on = gc.mlp_backward(self.head_on, cache.head_on_acts, grad * gate)
            g_off, dz_off = gc.mlp_backward(
                self.head_off, cache.head_off_acts, grad * (1.0 - gate)
            )
            grads.update(gc.mlp_to_dict(g_on, "head_on."))
            grads.update(gc.mlp_to_dict(g_off, "head_off."))
            dz = dz_on + dz_off
        else:
            dz = grad
        g_enc, d_in = gc.mlp_backward(self.encoder, cache.trunk_acts, dz)
        grads.update(gc.mlp_to_dict(g_enc, "encoder."))
        if self.arch.embed_inputs:
            w = self.arch.embed_width
            g_ed, du = gc.mlp_backward(self.embed_design, cache.embed_d_acts, d_in[:, :w])
            g_ey, dyv = gc.mlp_backward(self.embed_outcome, cache.embed_y_acts, d_in[:, w:])
            grads.update(gc.mlp_to_dict(g_ed, "embed_design."))
            grads.update(gc.mlp_to_dict(g_ey, "embed_outcome."))
            dy += dyv[:, 0]
        elif self.arch.outcome_in_input:
            du = d_in[:, : self.arch.raw_design_dim]
            dy += d_in[:, self.arch.raw_design_dim]
        else:
            du = d_in
        return grads, du, dy

    # --- decoder --------------------------------------------------------------
    def decode(self, pooled: np.ndarray) -> tuple[np.ndarray, list]:
        acts = gc.mlp_forward(self.decoder, pooled)
        return acts[-1], acts

    def decode_backward(self, acts: list, grad: np.ndarray):
        g_dec, d_pool = gc.mlp_backward(self.decoder, acts, grad)
        return gc.mlp_to_dict(g_dec, "decoder."), d_pool

    def zero_pool(self, n: int) -> np.ndarray:
        return np.zeros((n, self.arch.pool_width))


def init_policy(
    model: Model, rng: np.random.Generator, arch: Optional[PolicyArch] = None
) -> PolicyNetwork:
    return PolicyNetwork(model, arch or default_arch(model), rng)


# ---------------------------------------------------------------------------
# single-history operations


def _history_raw_pairs(policy: PolicyNetwork, history: History):
    model = policy.model
    if len(history) == 0:
        return np.zeros((0, policy.arch.raw_design_dim)), np.zeros(0)
    designs = history.design_matrix(model.design_dim)
    if designs.shape[1] != model.design_dim:
        raise gc.DimensionError(
            f"history designs have width {designs.shape[1]}, model wants {model.design_dim}"
        )
    return model.unconstrain_design(designs), history.outcome_vector()


def encode_history(policy: PolicyNetwork, history: History) -> np.ndarray:
    """Sum-pooled representation; the empty history pools to the zero vector."""
    pooled = policy.zero_pool(1)[0]
    raws, ys = _history_raw_pairs(policy, history)
    for i in range(len(history)):
        r, _ = policy.pair_forward(raws[i : i + 1], ys[i : i + 1])
        pooled = pooled + r[0]
    return pooled


def next_design(policy: PolicyNetwork, history: History) -> np.ndarray:
    """Raw design for the next step; caller applies the model's constraint map."""
    pooled = encode_history(policy, history)
    raw, _ = policy.decode(pooled[None, :])
    return raw[0]


@dataclass
class PolicyForwardRecord:
    history_len: int
    pair_caches: list
    decode_acts: list
    raw: np.ndarray
    version: int


def policy_forward(policy: PolicyNetwork, history: History) -> PolicyForwardRecord:
    raws, ys = _history_raw_pairs(policy, history)
    pooled = policy.zero_pool(1)
    caches = []
    for i in range(len(history)):
        r, cache = policy.pair_forward(raws[i : i + 1], ys[i : i + 1])
        pooled = pooled + r
        caches.append(cache)
    raw, dec_acts = policy.decode(pooled)
    return PolicyForwardRecord(
        history_len=len(history),
        pair_caches=caches,
        decode_acts=dec_acts,
        raw=raw[0],
        version=policy.version,
    )


def policy_backward(
    policy: PolicyNetwork, record: PolicyForwardRecord, design_grad: np.ndarray
):
    """Gradients of <raw design, design_grad> w.r.t. parameters and pair inputs.

    Returns (param grads dict, list of (du, dy) per history pair). Raises if the
    record was taken before a parameter update.
    """
    if record.version != policy.version:
        raise RuntimeError("stale forward record: policy parameters changed")
    grads = {k: np.zeros_like(v) for k, v in policy.to_dict().items()}
    g = np.asarray(design_grad, dtype=np.float64).reshape(1, -1)
    dec_grads, d_pool = policy.decode_backward(record.decode_acts, g)
    gc.add_scaled(grads, dec_grads)
    input_grads = []
    for cache in record.pair_caches:
        pair_grads, du, dy = policy.pair_backward(cache, d_pool)
        gc.add_scaled(grads, pair_grads)
        input_grads.append((du[0], dy[0]))
    return grads, input_grads


# ---------------------------------------------------------------------------
# checkpointing


def save_policy(stem, policy: PolicyNetwork, extra_metadata: Optional[dict] = None):
    arch = policy.arch
    meta = {
        "kind": "policy",
        "model": policy.model.name,
        "train_steps": policy.train_steps,
        "refined_at": policy.refined_at,
        "arch": {
            "raw_design_dim": arch.raw_design_dim,
            "pool_width": arch.pool_width,
            "encoder_widths": list(arch.encoder_widths),
            "decoder_widths": list(arch.decoder_widths),
            "encoder_activation": arch.encoder_activation,
            "decoder_activation": arch.decoder_activation,
            "outcome_in_input": arch.outcome_in_input,
            "gated_heads": arch.gated_heads,
            "embed_inputs": arch.embed_inputs,
            "embed_width": arch.embed_width,
            "layer_norm": arch.layer_norm,
            "encoder_out_norm_act": arch.encoder_out_norm_act,
        },
    }
    meta.update(extra_metadata or {})
    return gc.save_tensors(stem, policy.to_dict(), meta)


def load_policy(stem, model: Model) -> PolicyNetwork:
    tensors, meta = gc.load_tensors(stem)
    if meta.get("model") != model.name:
        raise ValueError(
            f"checkpoint was trained for model {meta.get('model')!r}, not {model.name!r}"
        )
    arch_meta = dict(meta["arch"])
    arch_meta["encoder_widths"] = tuple(arch_meta["encoder_widths"])
    arch_meta["decoder_widths"] = tuple(arch_meta["decoder_widths"])
    arch_meta.setdefault("encoder_out_norm_act", False)
    arch = PolicyArch(**arch_meta)
    policy = PolicyNetwork(model, arch, np.random.default_rng(0))
    policy.load_dict(tensors)
    policy.train_steps = int(meta.get("train_steps", 0))
    policy.refined_at = meta.get("refined_at")
    return policy
