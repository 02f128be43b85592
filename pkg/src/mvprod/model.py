"""The retrieval network: projectors, gated fusion, query/key encoders.

Each instance side (microvideo, product) runs visual and textual raw
features through its own two-layer projector, fuses the two refined
vectors with a context gate, and encodes the fused vector twice: once
with a gradient-trained query encoder and once with a key encoder that
only ever moves through the momentum blend of its query twin.

All weights use the row convention: a layer mapping n -> m inputs is a
(n, m) matrix applied as ``x @ W``. Biases are omitted throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeMismatchError, Tensor

PROJECTOR_ROLES = (
    "projector-mv-visual",
    "projector-mv-text",
    "projector-prod-visual",
    "projector-prod-text",
)
FUSION_ROLES = ("fusion-mv", "fusion-prod")
ENCODER_ROLES = (
    "encoder-mv-query",
    "encoder-mv-key",
    "encoder-prod-query",
    "encoder-prod-key",
)
ALL_ROLES = PROJECTOR_ROLES + FUSION_ROLES + ENCODER_ROLES

LEAKY_SLOPE = 0.01


@dataclass
class Dims:
    visual_in: int = 2048
    text_in: int = 768
    hidden: int = 1024
    refined: int = 512  # projector output width
    embed: int = 512  # fused / encoder width


@dataclass
class ParamSet:
    """Named weight tensors for one sub-network role.

    `stats` holds non-graph state (batch-norm running statistics).
    Key-encoder sets are created with trainable=False and are only ever
    written by :func:`momentum_update`.
    """

    role: str
    tensors: dict[str, Tensor]
    trainable: bool = True
    stats: dict[str, np.ndarray] = field(default_factory=dict)

    def trainable_items(self):
        if not self.trainable:
            return []
        return list(self.tensors.items())


def _uniform_fanin(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def init_params(
    dims: Dims,
    seed: int,
    batchnorm: bool = True,
    dtype=np.float32,
) -> dict[str, ParamSet]:
    """Deterministic parameter sets for every role.

    Query-side weights are fan-in-bounded uniform; each key encoder
    starts as an exact copy of its query twin so the momentum blend has
    a noise-free starting point.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, ParamSet] = {}

    for role in PROJECTOR_ROLES:
        fan = dims.visual_in if role.endswith("visual") else dims.text_in
        tensors = {
            "w1": Tensor(_uniform_fanin(rng, fan, dims.hidden, dtype), requires_grad=True),
            "w2": Tensor(_uniform_fanin(rng, dims.hidden, dims.refined, dtype), requires_grad=True),
        }
        stats = {}
        if batchnorm:
            stats["bn_mean"] = np.zeros(dims.hidden, dtype=dtype)
            stats["bn_var"] = np.ones(dims.hidden, dtype=dtype)
        params[role] = ParamSet(role=role, tensors=tensors, stats=stats)

    for role in FUSION_ROLES:
        tensors = {
            "w_text": Tensor(_uniform_fanin(rng, dims.refined, dims.embed, dtype), requires_grad=True),
            "w_visual": Tensor(_uniform_fanin(rng, dims.refined, dims.embed, dtype), requires_grad=True),
            "w_gate": Tensor(_uniform_fanin(rng, dims.embed, dims.embed, dtype), requires_grad=True),
        }
        params[role] = ParamSet(role=role, tensors=tensors)

    for query_role, key_role in (("encoder-mv-query", "encoder-mv-key"), ("encoder-prod-query", "encoder-prod-key")):
        tensors = {
            "w1": Tensor(_uniform_fanin(rng, dims.embed, dims.embed, dtype), requires_grad=True),
            "w2": Tensor(_uniform_fanin(rng, dims.embed, dims.embed, dtype), requires_grad=True),
        }
        params[query_role] = ParamSet(role=query_role, tensors=tensors)
        params[key_role] = ParamSet(
            role=key_role,
            tensors={name: Tensor(t.data.copy(), requires_grad=False) for name, t in tensors.items()},
            trainable=False,
        )

    return params


def project(x: Tensor, pset: ParamSet, training: bool = True) -> Tensor:
    """Two-layer refinement of raw features: w2 . leaky_relu(w1 . x).

    Batch norm, when the set carries running stats, sits on the hidden
    layer between the linear map and the activation.
    """
    w1, w2 = pset.tensors["w1"], pset.tensors["w2"]
    if x.shape[-1] != w1.shape[0]:
        raise ShapeMismatchError(f"project[{pset.role}]: input {x.shape} vs w1 {w1.shape}")
    h = ad.matmul(x, w1)
    if "bn_mean" in pset.stats:
        h = ad.batch_norm(h, pset.stats["bn_mean"], pset.stats["bn_var"], training=training)
    h = ad.leaky_relu(h, LEAKY_SLOPE)
    return ad.matmul(h, w2)


def fuse(visual: Tensor, text: Tensor, pset: ParamSet) -> Tensor:
    """Context-gated fusion of the two refined modalities.

    The combined projection u = visual . Wv + text . Wt is scaled
    elementwise by the sigmoid gate of its own linear map, so the
    output magnitude never exceeds |u|.
    """
    wt, wv, wg = pset.tensors["w_text"], pset.tensors["w_visual"], pset.tensors["w_gate"]
    if visual.shape != text.shape or visual.shape[-1] != wv.shape[0]:
        raise ShapeMismatchError(
            f"fuse[{pset.role}]: visual {visual.shape}, text {text.shape}, weights {wv.shape}"
        )
    u = ad.add(ad.matmul(visual, wv), ad.matmul(text, wt))
    gate = ad.sigmoid(ad.matmul(u, wg))
    return ad.mul(u, gate)


def encode(fused: Tensor, pset: ParamSet) -> Tensor:
    """Two-layer instance encoder.

    Key-role sets sever gradient flow entirely: the input is detached
    and the key weights never require grad, so the output is a constant
    with respect to every trainable parameter.
    """
    w1, w2 = pset.tensors["w1"], pset.tensors["w2"]
    if fused.shape[-1] != w1.shape[0]:
        raise ShapeMismatchError(f"encode[{pset.role}]: input {fused.shape} vs w1 {w1.shape}")
    if not pset.trainable:
        fused = fused.detach()
    h = ad.leaky_relu(ad.matmul(fused, w1), LEAKY_SLOPE)
    return ad.matmul(h, w2)


def momentum_update(key: ParamSet, query: ParamSet, m: float) -> None:
    """key <- m * key + (1 - m) * query, elementwise, in place."""
    if not 0.0 <= m < 1.0:
        raise ValueError(f"momentum_update: m must be in [0, 1), got {m}")
    if set(key.tensors) != set(query.tensors):
        raise ShapeMismatchError("momentum_update: tensor name mismatch")
    for name, kt in key.tensors.items():
        qt = query.tensors[name]
        if kt.shape != qt.shape:
            raise ShapeMismatchError(f"momentum_update: {name} shapes {kt.shape} vs {qt.shape}")
        dt = kt.data.dtype.type
        kt.data = dt(m) * kt.data + dt(1.0 - m) * qt.data


def param_fingerprint(pset: ParamSet) -> bytes:
    """Stable byte digest of a set's weights, for no-touch assertions."""
    import hashlib

    h = hashlib.sha256()
    for name in sorted(pset.tensors):
        h.update(name.encode())
        h.update(pset.tensors[name].data.tobytes())
    return h.digest()
