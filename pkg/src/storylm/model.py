"""Feed-forward next-sentence scorers.

Two architectures predict an embedding for the next sentence from the
concatenated context embeddings:

    mlp:     input norm -> [dense -> relu -> dropout] x num_layers
             -> dense -> output norm
    resmlp:  input norm -> dense projection (when input_dim != hidden_dim)
             -> residual blocks -> dense -> output norm

A residual block is dense -> relu -> dropout -> dense -> additive skip
-> relu -> dropout (post-activation style). Dropout is inverted: train
activations are scaled by 1/(1-rate), eval applies nothing.

Candidates are scored against the predicted embedding by dot product;
log-probabilities subtract a max-shifted log-sum-exp partition. Dot
products accumulate in float64 regardless of storage precision so that
ranking ties are stable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .store import FormatError, LengthError, ValidationError

LN_EPS = 1e-5

CHECKPOINT_MAGIC = b"SLMP"
CHECKPOINT_VERSION = 1
OPT_STATE_MAGIC = b"SLMO"
_ARCHS = ("mlp", "resmlp")
# magic, version, arch code, input_dim, hidden_dim, num_layers,
# num_residual_blocks, output_dim, dropout_rate
_CKPT_HEADER = struct.Struct("<4sIIIIIIIf")


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "mlp"
    input_dim: int = 3072
    hidden_dim: int = 1024
    num_layers: int = 3
    num_residual_blocks: int = 1
    output_dim: int = 768
    dropout_rate: float = 0.5

    def __post_init__(self) -> None:
        if self.arch not in _ARCHS:
            raise ValidationError(f"unknown arch {self.arch!r}, expected one of {_ARCHS}")
        for name in ("input_dim", "hidden_dim", "num_layers", "num_residual_blocks",
                     "output_dim"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError("dropout_rate must lie in [0, 1)")

    @property
    def has_projection(self) -> bool:
        return self.arch == "resmlp" and self.input_dim != self.hidden_dim


def dense_shapes(config: ModelConfig) -> list[tuple[int, int]]:
    """(fan_in, fan_out) of every dense layer, in declaration order."""
    if config.arch == "mlp":
        shapes = [(config.input_dim, config.hidden_dim)]
        shapes += [(config.hidden_dim, config.hidden_dim)] * (config.num_layers - 1)
    else:
        shapes = []
        if config.has_projection:
            shapes.append((config.input_dim, config.hidden_dim))
        shapes += [(config.hidden_dim, config.hidden_dim)] * (2 * config.num_residual_blocks)
    shapes.append((shapes[-1][1] if shapes else config.input_dim, config.output_dim))
    return shapes


def param_count(config: ModelConfig) -> int:
    total = 2 * config.input_dim + 2 * config.output_dim
    for fan_in, fan_out in dense_shapes(config):
        total += fan_in * fan_out + fan_out
    return total


@dataclass(eq=False)
class ModelParams:
    """All trainable tensors, in declaration order: dense layers, then norms."""

    layers: list[tuple[np.ndarray, np.ndarray]]
    input_norm: tuple[np.ndarray, np.ndarray]
    output_norm: tuple[np.ndarray, np.ndarray]

    def tensors(self) -> list[np.ndarray]:
        flat: list[np.ndarray] = []
        for w, b in self.layers:
            flat += [w, b]
        flat += [*self.input_norm, *self.output_norm]
        return flat

    @property
    def dtype(self) -> np.dtype:
        return self.layers[0][0].dtype

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            [(w.astype(dtype), b.astype(dtype)) for w, b in self.layers],
            tuple(t.astype(dtype) for t in self.input_norm),
            tuple(t.astype(dtype) for t in self.output_norm),
        )

    def copy(self) -> "ModelParams":
        return self.astype(self.dtype)


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    """He-normal weights (variance 2/fan_in), zero biases, identity norms."""
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in dense_shapes(config):
        w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        layers.append((w.astype(dtype), np.zeros(fan_out, dtype=dtype)))
    input_norm = (np.ones(config.input_dim, dtype=dtype), np.zeros(config.input_dim, dtype=dtype))
    output_norm = (np.ones(config.output_dim, dtype=dtype), np.zeros(config.output_dim, dtype=dtype))
    return ModelParams(layers, input_norm, output_norm)


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray,
               eps: float = LN_EPS) -> np.ndarray:
    """gain * (x - mean) / sqrt(population var + eps) + bias, over the last axis."""
    x = np.asarray(x)
    if x.shape[-1] == 0:
        raise ValidationError("layer_norm over a zero-length vector")
    if np.shape(gain)[-1] != x.shape[-1] or np.shape(bias)[-1] != x.shape[-1]:
        raise ValidationError("layer_norm gain/bias length mismatch")
    if eps <= 0:
        raise ValidationError("layer_norm eps must be positive")
    eps = x.dtype.type(eps) if np.issubdtype(x.dtype, np.floating) else eps
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return gain * (x - mean) / np.sqrt(var + eps) + bias


def _ln_forward(x, gain, bias):
    eps = x.dtype.type(LN_EPS)
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return gain * xhat + bias, xhat, inv_std


def _ln_backward(d_out, xhat, inv_std, gain):
    # d_gain/d_bias summed over the batch; d_x from the normalized-row Jacobian.
    d_gain = (d_out * xhat).sum(axis=0)
    d_bias = d_out.sum(axis=0)
    d_xhat = d_out * gain
    m1 = d_xhat.mean(axis=-1, keepdims=True)
    m2 = (d_xhat * xhat).mean(axis=-1, keepdims=True)
    d_x = (d_xhat - m1 - xhat * m2) * inv_std
    return d_x, d_gain, d_bias


def _dropout_mask(rng, shape, rate, dtype):
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / dtype.type(1.0 - rate)


def forward_batch(params: ModelParams, config: ModelConfig, X: np.ndarray,
                  train: bool = False, dropout_rng: np.random.Generator | None = None):
    """Run the scorer on a batch of concatenated contexts.

    X is (batch, input_dim). Returns (H, cache); the cache holds every
    intermediate needed by backward_from_output.
    """
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] != config.input_dim:
        raise ValidationError(f"input shape {X.shape} does not match input_dim={config.input_dim}")
    dtype = params.dtype
    drop = train and config.dropout_rate > 0.0
    if drop and dropout_rng is None:
        raise ValidationError("train-mode forward with dropout needs a random source")

    a, xhat_in, inv_std_in = _ln_forward(X.astype(dtype, copy=False), *params.input_norm)
    trunk: list[tuple] = []
    li = 0
    layers = params.layers

    if config.arch == "mlp":
        for _ in range(config.num_layers):
            w, b = layers[li]
            z = a @ w + b
            r = np.maximum(z, 0)
            mask = _dropout_mask(dropout_rng, r.shape, config.dropout_rate, dtype) if drop else None
            out = r * mask if drop else r
            trunk.append(("dense", a, z, mask))
            a = out
            li += 1
    else:
        if config.has_projection:
            w, b = layers[li]
            trunk.append(("proj", a))
            a = a @ w + b
            li += 1
        for _ in range(config.num_residual_blocks):
            w1, b1 = layers[li]
            w2, b2 = layers[li + 1]
            z1 = a @ w1 + b1
            r1 = np.maximum(z1, 0)
            mask1 = _dropout_mask(dropout_rng, r1.shape, config.dropout_rate, dtype) if drop else None
            d1 = r1 * mask1 if drop else r1
            s = a + d1 @ w2 + b2
            r2 = np.maximum(s, 0)
            mask2 = _dropout_mask(dropout_rng, r2.shape, config.dropout_rate, dtype) if drop else None
            out = r2 * mask2 if drop else r2
            trunk.append(("block", a, z1, mask1, d1, s, mask2))
            a = out
            li += 2

    w_out, b_out = layers[li]
    y = a @ w_out + b_out
    H, yhat, inv_std_out = _ln_forward(y, *params.output_norm)
    cache = {
        "trunk": trunk,
        "trunk_out": a,
        "xhat_in": xhat_in,
        "inv_std_in": inv_std_in,
        "yhat": yhat,
        "inv_std_out": inv_std_out,
    }
    return H, cache


def forward(params: ModelParams, config: ModelConfig, context, mode: str = "eval",
            dropout_rng: np.random.Generator | None = None) -> np.ndarray:
    """Predict the next-sentence embedding h for one context (t embeddings)."""
    if mode not in ("train", "eval"):
        raise ValidationError(f"mode must be 'train' or 'eval', got {mode!r}")
    ctx = np.asarray(context)
    flat = ctx.reshape(1, -1)
    if flat.shape[1] != config.input_dim:
        raise ValidationError(
            f"context of total length {flat.shape[1]} does not match input_dim={config.input_dim}"
        )
    H, _ = forward_batch(params, config, flat, train=(mode == "train"), dropout_rng=dropout_rng)
    return H[0]


def backward_from_output(params: ModelParams, config: ModelConfig, cache: dict,
                         dH: np.ndarray) -> list[np.ndarray]:
    """Gradients of a scalar loss w.r.t. every tensor, given dLoss/dH.

    Returned list is aligned with ModelParams.tensors(). Dropout masks are
    the ones recorded in the cache, so repeated calls are bitwise equal.
    """
    dtype = params.dtype
    dH = dH.astype(dtype, copy=False)
    layers = params.layers
    grads_layers: list[tuple[np.ndarray, np.ndarray]] = [None] * len(layers)

    d_y, d_gain_out, d_bias_out = _ln_backward(
        dH, cache["yhat"], cache["inv_std_out"], params.output_norm[0])

    li = len(layers) - 1
    w_out, _ = layers[li]
    a = cache["trunk_out"]
    grads_layers[li] = (a.T @ d_y, d_y.sum(axis=0))
    d_a = d_y @ w_out.T
    li -= 1

    for item in reversed(cache["trunk"]):
        kind = item[0]
        if kind == "dense":
            _, a_prev, z, mask = item
            d_r = d_a * mask if mask is not None else d_a
            d_z = d_r * (z > 0)
            grads_layers[li] = (a_prev.T @ d_z, d_z.sum(axis=0))
            d_a = d_z @ layers[li][0].T
            li -= 1
        elif kind == "block":
            _, a_prev, z1, mask1, d1, s, mask2 = item
            d_r2 = d_a * mask2 if mask2 is not None else d_a
            d_s = d_r2 * (s > 0)
            w1, _ = layers[li - 1]
            w2, _ = layers[li]
            grads_layers[li] = (d1.T @ d_s, d_s.sum(axis=0))
            d_d1 = d_s @ w2.T
            d_r1 = d_d1 * mask1 if mask1 is not None else d_d1
            d_z1 = d_r1 * (z1 > 0)
            grads_layers[li - 1] = (a_prev.T @ d_z1, d_z1.sum(axis=0))
            d_a = d_s + d_z1 @ w1.T
            li -= 2
        else:  # proj
            _, a_prev = item
            grads_layers[li] = (a_prev.T @ d_a, d_a.sum(axis=0))
            d_a = d_a @ layers[li][0].T
            li -= 1

    _, d_gain_in, d_bias_in = _ln_backward(
        d_a, cache["xhat_in"], cache["inv_std_in"], params.input_norm[0])

    flat: list[np.ndarray] = []
    for gw, gb in grads_layers:
        flat += [gw, gb]
    flat += [d_gain_in, d_bias_in, d_gain_out, d_bias_out]
    return flat


@dataclass(eq=False)
class ScoreResult:
    """Dot-product logits of one predicted embedding against a candidate set."""

    ids: np.ndarray
    logits: np.ndarray        # float64
    log_partition: float
    log_probs: np.ndarray

    @property
    def size(self) -> int:
        return self.logits.shape[0]


def candidate_logits(candidates: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Row-wise dot products with float64 accumulation."""
    return np.einsum("nd,d->n", candidates, h, dtype=np.float64)


def log_sum_exp(logits: np.ndarray) -> float:
    m = float(np.max(logits))
    return m + float(np.log(np.sum(np.exp(logits - m))))


def score_candidates(h: np.ndarray, candidates: np.ndarray,
                     ids: np.ndarray | None = None) -> ScoreResult:
    """Score candidate embeddings (rows) against h under the sampled softmax."""
    candidates = np.asarray(candidates)
    if candidates.ndim != 2 or candidates.shape[0] == 0:
        raise ValidationError("score_candidates needs a non-empty 2-D candidate matrix")
    if candidates.shape[1] != np.shape(h)[-1]:
        raise ValidationError("candidate dim does not match predicted embedding dim")
    logits = candidate_logits(candidates, np.asarray(h))
    log_z = log_sum_exp(logits)
    if ids is None:
        ids = np.arange(candidates.shape[0], dtype=np.int64)
    else:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.shape != (candidates.shape[0],):
            raise ValidationError("ids length does not match candidate count")
    return ScoreResult(ids, logits, log_z, logits - log_z)


def _config_to_header(config: ModelConfig) -> bytes:
    return _CKPT_HEADER.pack(
        CHECKPOINT_MAGIC, CHECKPOINT_VERSION, _ARCHS.index(config.arch),
        config.input_dim, config.hidden_dim, config.num_layers,
        config.num_residual_blocks, config.output_dim, config.dropout_rate)


def save_checkpoint(path, config: ModelConfig, params: ModelParams) -> None:
    """Write config header plus all tensors (declaration order) as float32 LE."""
    with open(path, "wb") as fh:
        fh.write(_config_to_header(config))
        for tensor in params.tensors():
            fh.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[ModelConfig, ModelParams]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _CKPT_HEADER.size:
        raise LengthError(f"{path}: shorter than the checkpoint header")
    magic, version, arch_code, input_dim, hidden_dim, num_layers, num_blocks, \
        output_dim, dropout_rate = _CKPT_HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if arch_code >= len(_ARCHS):
        raise FormatError(f"{path}: unknown arch code {arch_code}")
    config = ModelConfig(_ARCHS[arch_code], input_dim, hidden_dim, num_layers,
                         num_blocks, output_dim, float(dropout_rate))
    expected = _CKPT_HEADER.size + 4 * param_count(config)
    if len(raw) != expected:
        raise LengthError(f"{path}: expected {expected} bytes, got {len(raw)}")

    offset = _CKPT_HEADER.size

    def take(shape) -> np.ndarray:
        nonlocal offset
        n = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(shape).copy()
        offset += 4 * n
        return arr

    layers = [(take(shape), take((shape[1],))) for shape in dense_shapes(config)]
    input_norm = (take((input_dim,)), take((input_dim,)))
    output_norm = (take((output_dim,)), take((output_dim,)))
    params = ModelParams(layers, input_norm, output_norm)
    for i, tensor in enumerate(params.tensors()):
        if not np.isfinite(tensor).all():
            raise ValidationError(f"{path}: non-finite values in tensor {i}")
    return config, params
