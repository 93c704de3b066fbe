"""Recommendation network: a GMF branch and an MLP tower over pre-trained
user/item embeddings, combined by a single affine output layer, optionally
fused with a social-background vector.

Fusion modes:

* ``none``     -- score from ``[z_gmf; z_mlp]`` only.
* ``average``  -- appends the mean hourly social vector of the previous
  time segment to the concatenation.
* ``iste``     -- appends a context vector produced by bilinear attention:
  the projected item embedding queries the last ``k`` hourly social vectors.

Parameters are a flat ordered mapping of named float64 tensors, initialised
Glorot-uniform (biases zero) from per-name random streams so that parameters
shared between fusion modes are initialised identically under one seed.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, philox

__all__ = [
    "ModelConfig",
    "PredictionInput",
    "init_params",
    "param_specs",
    "gmf_branch",
    "mlp_branch",
    "attention_weights",
    "iste_context",
    "predict",
    "forward_batch",
    "save_checkpoint",
    "load_checkpoint",
]

FUSION_MODES = ("none", "average", "iste")


@dataclass(frozen=True)
class ModelConfig:
    emb_dim: int = 200
    gmf_dim: int = 50
    mlp_layers: tuple[int, ...] = (200, 100, 50)
    social_dim: int = 50
    k: int = 24
    fusion: str = "none"
    deep_head: bool = False

    def __post_init__(self):
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}, got '{self.fusion}'")
        for name in ("emb_dim", "gmf_dim", "social_dim", "k"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.mlp_layers:
            raise ValueError("mlp_layers must not be empty")
        if self.mlp_layers[-1] != self.gmf_dim:
            raise ValueError(
                f"last MLP layer ({self.mlp_layers[-1]}) must equal gmf_dim ({self.gmf_dim})"
            )
        if self.fusion == "iste" and self.social_dim != self.gmf_dim:
            raise ValueError(
                "iste fusion requires social_dim == gmf_dim for the bilinear score, "
                f"got {self.social_dim} != {self.gmf_dim}"
            )

    @property
    def concat_width(self) -> int:
        width = 2 * self.gmf_dim
        if self.fusion != "none":
            width += self.social_dim
        return width


@dataclass(frozen=True)
class PredictionInput:
    """One scoring request: embeddings plus the fusion-specific social input.

    ``social`` is None for fusion ``none``, the segment-average vector for
    ``average``, or the ``(k, social_dim)`` key matrix for ``iste``.
    """

    p_u: np.ndarray
    q_i: np.ndarray
    social: np.ndarray | None = None


def param_specs(config: ModelConfig) -> list[tuple[str, tuple[int, ...], bool]]:
    """Ordered ``(name, shape, is_weight)`` list; biases are zero-initialised."""
    g, e, s = config.gmf_dim, config.emb_dim, config.social_dim
    specs = [
        ("p_gu_w", (g, e), True),
        ("p_gu_b", (g,), False),
        ("p_gi_w", (g, e), True),
        ("p_gi_b", (g,), False),
    ]
    in_dim = 2 * e
    for layer, out in enumerate(config.mlp_layers):
        specs.append((f"mlp{layer}_w", (out, in_dim), True))
        specs.append((f"mlp{layer}_b", (out,), False))
        in_dim = out
    if config.fusion == "iste":
        specs.append(("w_att", (g, s), True))
    width = config.concat_width
    if config.deep_head:
        hidden = 2 * g
        specs.append(("head1_w", (hidden, width), True))
        specs.append(("head1_b", (hidden,), False))
        width = hidden
    specs.append(("head_w", (width,), True))
    specs.append(("head_b", (), False))
    return specs


def _glorot(shape: tuple[int, ...], gen: np.random.Generator) -> np.ndarray:
    if len(shape) == 2:
        fan_in, fan_out = shape[1], shape[0]
    else:
        fan_in, fan_out = shape[0], 1
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return gen.uniform(-bound, bound, size=shape)


def init_params(config: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Glorot-uniform weights and zero biases, one random stream per name."""
    params: dict[str, Tensor] = {}
    for name, shape, is_weight in param_specs(config):
        if is_weight:
            values = _glorot(shape, philox(seed, "init", name))
        else:
            values = np.zeros(shape)
        params[name] = Tensor(values)
    return params


def _check_dim(name: str, vec: np.ndarray, dim: int) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (dim,):
        raise ValueError(f"{name} has shape {vec.shape}, expected ({dim},)")
    return vec


def gmf_branch(
    p_u: np.ndarray, q_i: np.ndarray, params: Mapping[str, Tensor]
) -> tuple[np.ndarray, np.ndarray]:
    """Project both embeddings and take their Hadamard product.

    Returns ``(z_gmf, h_i)`` where ``h_i`` is the projected item embedding,
    reused as the attention query.
    """
    w_u = params["p_gu_w"].data
    w_i = params["p_gi_w"].data
    p_u = _check_dim("p_u", p_u, w_u.shape[1])
    q_i = _check_dim("q_i", q_i, w_i.shape[1])
    u = w_u @ p_u + params["p_gu_b"].data
    h_i = w_i @ q_i + params["p_gi_b"].data
    return u * h_i, h_i


def mlp_branch(
    p_u: np.ndarray, q_i: np.ndarray, params: Mapping[str, Tensor]
) -> np.ndarray:
    """Tower of dense layers with ReLU after every layer, over ``[p_u; q_i]``."""
    w0 = params["mlp0_w"].data
    expected = w0.shape[1]
    x = np.concatenate([np.asarray(p_u, dtype=np.float64), np.asarray(q_i, dtype=np.float64)])
    if x.shape != (expected,):
        raise ValueError(f"[p_u; q_i] has shape {x.shape}, expected ({expected},)")
    layer = 0
    while f"mlp{layer}_w" in params:
        x = params[f"mlp{layer}_w"].data @ x + params[f"mlp{layer}_b"].data
        x = np.maximum(x, 0.0)
        layer += 1
    return x


def _softmax_1d(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max()
    ex = np.exp(shifted)
    return ex / ex.sum()


def attention_weights(
    h_i: np.ndarray, keys: np.ndarray, w_att: np.ndarray
) -> np.ndarray:
    """Softmax of the bilinear scores ``h_i^T W s_j`` over the key rows."""
    keys = np.asarray(keys, dtype=np.float64)
    if keys.ndim != 2 or keys.shape[0] < 1 or keys.shape[1] != w_att.shape[1]:
        raise ValueError(
            f"keys shape {keys.shape} incompatible with attention matrix {w_att.shape}"
        )
    h_i = _check_dim("h_i", h_i, w_att.shape[0])
    return _softmax_1d(keys @ (w_att.T @ h_i))


def iste_context(
    h_i: np.ndarray, keys: np.ndarray, w_att: np.ndarray
) -> np.ndarray:
    """Attention-weighted sum of the key vectors."""
    weights = attention_weights(h_i, keys, w_att)
    return weights @ np.asarray(keys, dtype=np.float64)


def predict(
    inp: PredictionInput, params: Mapping[str, Tensor], config: ModelConfig
) -> float:
    """Score one (user, item, social-context) triple; output is in (0, 1)."""
    z_gmf, h_i = gmf_branch(inp.p_u, inp.q_i, params)
    z_mlp = mlp_branch(inp.p_u, inp.q_i, params)
    blocks = [z_gmf, z_mlp]
    if config.fusion == "none":
        if inp.social is not None:
            raise ValueError("fusion 'none' takes no social input")
    elif config.fusion == "average":
        if inp.social is None:
            raise ValueError("fusion 'average' requires a social vector")
        blocks.append(_check_dim("social", inp.social, config.social_dim))
    else:
        if inp.social is None:
            raise ValueError("fusion 'iste' requires a key matrix")
        blocks.append(iste_context(h_i, inp.social, params["w_att"].data))
    x = np.concatenate(blocks)
    if config.deep_head:
        x = np.maximum(params["head1_w"].data @ x + params["head1_b"].data, 0.0)
    logit = float(params["head_w"].data @ x + params["head_b"].data)
    if logit >= 0:
        return 1.0 / (1.0 + np.exp(-logit))
    ex = np.exp(logit)
    return ex / (1.0 + ex)


def forward_batch(
    params: Mapping[str, Tensor],
    config: ModelConfig,
    p_u: np.ndarray,
    q_i: np.ndarray,
    social: np.ndarray | None,
) -> Tensor:
    """Differentiable batched forward pass.

    ``p_u`` and ``q_i`` are ``(B, emb_dim)``; ``social`` is None,
    ``(B, social_dim)``, or ``(B, k, social_dim)`` depending on the fusion
    mode.  Returns the ``(B,)`` prediction tensor.
    """
    pu = Tensor(p_u)
    qi = Tensor(q_i)
    u = ad.add(ad.matmul(pu, ad.transpose(params["p_gu_w"])), params["p_gu_b"])
    h_i = ad.add(ad.matmul(qi, ad.transpose(params["p_gi_w"])), params["p_gi_b"])
    z_gmf = ad.elementwise_mul(u, h_i)

    x = ad.concat([pu, qi], axis=1)
    layer = 0
    while f"mlp{layer}_w" in params:
        x = ad.relu(
            ad.add(ad.matmul(x, ad.transpose(params[f"mlp{layer}_w"])), params[f"mlp{layer}_b"])
        )
        layer += 1

    blocks = [z_gmf, x]
    if config.fusion == "average":
        blocks.append(Tensor(social))
    elif config.fusion == "iste":
        keys = Tensor(social)
        scores = ad.batch_matvec(keys, ad.matmul(h_i, params["w_att"]))
        weights = ad.softmax(scores, axis=-1)
        blocks.append(ad.batch_vecmat(weights, keys))
    z = ad.concat(blocks, axis=1)
    if config.deep_head:
        z = ad.relu(ad.add(ad.matmul(z, ad.transpose(params["head1_w"])), params["head1_b"]))
    logit = ad.add(ad.matvec(z, params["head_w"]), params["head_b"])
    return ad.sigmoid(logit)


_CHECKPOINT_MAGIC = "trendrec-checkpoint 1"


def save_checkpoint(path, config: ModelConfig, params: Mapping[str, Tensor]) -> None:
    """Write a text config header plus raw little-endian float64 blocks.

    The format round-trips bitwise at 64-bit precision.
    """
    buf = io.BytesIO()
    header = [
        _CHECKPOINT_MAGIC,
        f"emb_dim={config.emb_dim}",
        f"gmf_dim={config.gmf_dim}",
        f"mlp_layers={','.join(str(n) for n in config.mlp_layers)}",
        f"social_dim={config.social_dim}",
        f"k={config.k}",
        f"fusion={config.fusion}",
        f"deep_head={int(config.deep_head)}",
        f"tensors={len(params)}",
    ]
    buf.write(("\n".join(header) + "\n").encode("utf-8"))
    for name, tensor in params.items():
        arr = np.ascontiguousarray(tensor.data, dtype="<f8")
        shape = ",".join(str(n) for n in arr.shape) if arr.ndim else "scalar"
        buf.write(f"{name} {shape}\n".encode("utf-8"))
        buf.write(arr.tobytes())
        buf.write(b"\n")
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, Tensor]]:
    path = Path(path)
    with path.open("rb") as fh:
        magic = fh.readline().decode("utf-8").rstrip("\n")
        if magic != _CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a trendrec checkpoint")
        fields: dict[str, str] = {}
        for _ in range(8):
            key, _, value = fh.readline().decode("utf-8").rstrip("\n").partition("=")
            fields[key] = value
        config = ModelConfig(
            emb_dim=int(fields["emb_dim"]),
            gmf_dim=int(fields["gmf_dim"]),
            mlp_layers=tuple(int(n) for n in fields["mlp_layers"].split(",")),
            social_dim=int(fields["social_dim"]),
            k=int(fields["k"]),
            fusion=fields["fusion"],
            deep_head=bool(int(fields["deep_head"])),
        )
        params: dict[str, Tensor] = {}
        for _ in range(int(fields["tensors"])):
            name, _, shape_field = (
                fh.readline().decode("utf-8").rstrip("\n").partition(" ")
            )
            if shape_field == "scalar":
                shape: tuple[int, ...] = ()
            else:
                shape = tuple(int(n) for n in shape_field.split(","))
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            fh.read(1)  # trailing newline
            params[name] = Tensor(np.frombuffer(raw, dtype="<f8").reshape(shape).copy())
    return config, params
