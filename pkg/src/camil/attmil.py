"""Attention-based MIL with swappable classification / regression heads.

A bag ``X`` (n x d) is pooled with attention weights ``a = softmax(w . tanh(V x_i))``
into ``z = sum_i a_i x_i``. The head is ``W2 relu(W1 z' + b1) + b2`` where ``z'``
is ``z`` after optional batch normalization. Gradients are written out by hand;
``backward_batch`` mirrors ``forward_batch`` operation by operation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, NumericError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

CHECKPOINT_MAGIC = b"MILM"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sHIIIIBf")

# declaration order of every tensor, also the checkpoint order
TENSOR_ORDER = ("V", "w", "U", "W1", "b1", "W2", "b2", "bn_gamma", "bn_beta", "bn_mean", "bn_var")
BUFFERS = ("bn_mean", "bn_var")
NO_DECAY = ("b1", "b2", "bn_gamma", "bn_beta")


@dataclass
class ModelParams:
    V: np.ndarray
    w: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    U: np.ndarray | None = None
    bn_gamma: np.ndarray | None = None
    bn_beta: np.ndarray | None = None
    bn_mean: np.ndarray | None = None
    bn_var: np.ndarray | None = None
    dropout_rate: float = 0.0
    preset: str = ""

    def __post_init__(self):
        h_att, d = self.V.shape
        h_mlp = self.W1.shape[0]
        expect = {
            "w": (h_att,),
            "U": (h_att, d),
            "W1": (h_mlp, d),
            "b1": (h_mlp,),
            "W2": (self.out, h_mlp),
            "b2": (self.out,),
            "bn_gamma": (d,),
            "bn_beta": (d,),
            "bn_mean": (d,),
            "bn_var": (d,),
        }
        for name, shape in expect.items():
            arr = getattr(self, name)
            if arr is not None and arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
        bn = [getattr(self, n) is None for n in ("bn_gamma", "bn_beta", "bn_mean", "bn_var")]
        if any(bn) and not all(bn):
            raise ValueError("batch-norm tensors must be all present or all absent")
        if self.out not in (1, 2):
            raise ValueError("out must be 1 (regression) or 2 (classification)")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    @property
    def d(self) -> int:
        return self.V.shape[1]

    @property
    def h_att(self) -> int:
        return self.V.shape[0]

    @property
    def h_mlp(self) -> int:
        return self.W1.shape[0]

    @property
    def out(self) -> int:
        return self.W2.shape[0]

    @property
    def gated(self) -> bool:
        return self.U is not None

    @property
    def batch_norm(self) -> bool:
        return self.bn_gamma is not None

    @property
    def is_regression(self) -> bool:
        return self.out == 1

    def tensors(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in TENSOR_ORDER if getattr(self, n) is not None}

    def trainable(self) -> dict[str, np.ndarray]:
        return {n: a for n, a in self.tensors().items() if n not in BUFFERS}

    def copy(self) -> "ModelParams":
        return replace(self, **{n: a.copy() for n, a in self.tensors().items()})

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.tensors().values())


def init_params(
    d: int,
    out: int,
    rng: np.random.Generator,
    h_att: int = 128,
    h_mlp: int = 256,
    gated: bool = False,
    batch_norm: bool = False,
    dropout_rate: float = 0.0,
    preset: str = "",
) -> ModelParams:
    """Fan-in scaled uniform initialization, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``.

    This is the He-uniform family with gain ``1/sqrt(3)`` (the usual framework
    default for linear layers). Biases start at zero.
    """

    def he(shape):
        bound = 1.0 / np.sqrt(shape[-1])
        return rng.uniform(-bound, bound, size=shape)

    V = he((h_att, d))
    U = he((h_att, d)) if gated else None
    w = he((1, h_att))[0]
    W1 = he((h_mlp, d))
    W2 = he((out, h_mlp))
    bn = {}
    if batch_norm:
        bn = dict(bn_gamma=np.ones(d), bn_beta=np.zeros(d), bn_mean=np.zeros(d), bn_var=np.ones(d))
    return ModelParams(
        V=V, w=w, W1=W1, b1=np.zeros(h_mlp), W2=W2, b2=np.zeros(out), U=U,
        dropout_rate=dropout_rate, preset=preset, **bn,
    )


@dataclass(frozen=True)
class BagOutput:
    prediction: np.ndarray
    attention: np.ndarray


@dataclass
class _BatchCache:
    bags: list[dict]
    Z: np.ndarray
    Zn: np.ndarray
    bn_mode: str | None
    zhat: np.ndarray | None
    inv_std: np.ndarray | None
    U1: np.ndarray
    masks: np.ndarray
    R_drop: np.ndarray
    pred: np.ndarray
    batch_stats: tuple[np.ndarray, np.ndarray] | None = field(default=None)


def _check_width(X: np.ndarray, params: ModelParams) -> None:
    if X.ndim != 2 or X.shape[1] != params.d:
        raise ValueError(f"bag width {X.shape[-1]} does not match model width {params.d}")


def _softmax(e: np.ndarray) -> np.ndarray:
    ex = np.exp(e - e.max())
    return ex / ex.sum()


def _attend(X: np.ndarray, params: ModelParams) -> dict:
    A = X @ params.V.T
    T = np.tanh(A)
    if params.gated:
        G = 1.0 / (1.0 + np.exp(-(X @ params.U.T)))
        H = T * G
    else:
        G = None
        H = T
    e = H @ params.w
    if not np.isfinite(e).all():
        raise NumericError("numeric overflow in attention logits")
    a = _softmax(e)
    z = a @ X
    return {"X": X, "T": T, "G": G, "H": H, "a": a, "z": z}


def dropout_masks(rng: np.random.Generator, batch: int, h_mlp: int, rate: float) -> np.ndarray:
    """Inverted-dropout masks: kept units carry ``1 / (1 - rate)``, dropped ones 0."""
    if rate <= 0:
        return np.ones((batch, h_mlp))
    keep = rng.random((batch, h_mlp)) >= rate
    return keep / (1.0 - rate)


def forward_batch(
    bags: Sequence[np.ndarray],
    params: ModelParams,
    bn_mode: str | None = "running",
    masks: np.ndarray | None = None,
) -> _BatchCache:
    """Forward a list of bags.

    ``bn_mode`` is ``"batch"`` (normalize with batch statistics, training) or
    ``"running"`` (use stored running statistics); ignored without batch norm.
    ``masks`` are dropout masks of shape (B, h_mlp); None means no dropout.
    """
    caches = []
    for X in bags:
        X = np.asarray(X, dtype=np.float64)
        _check_width(X, params)
        caches.append(_attend(X, params))
    Z = np.stack([c["z"] for c in caches])
    B = Z.shape[0]
    zhat = inv_std = stats = None
    mode = bn_mode if params.batch_norm else None
    if mode == "batch" and B < 2:
        mode = "running"
    if mode == "batch":
        mu = Z.mean(axis=0)
        var = Z.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        zhat = (Z - mu) * inv_std
        Zn = params.bn_gamma * zhat + params.bn_beta
        stats = (mu, var)
    elif mode == "running":
        inv_std = 1.0 / np.sqrt(params.bn_var + BN_EPS)
        zhat = (Z - params.bn_mean) * inv_std
        Zn = params.bn_gamma * zhat + params.bn_beta
    elif mode is None:
        Zn = Z
    else:
        raise ValueError(f"unknown bn_mode {bn_mode!r}")
    U1 = Zn @ params.W1.T + params.b1
    R = np.maximum(U1, 0.0)
    if masks is None:
        masks = np.ones_like(R)
    R_drop = R * masks
    pred = R_drop @ params.W2.T + params.b2
    if not np.isfinite(pred).all():
        raise NumericError("numeric overflow in head output")
    return _BatchCache(caches, Z, Zn, mode, zhat, inv_std, U1, masks, R_drop, pred, stats)


def backward_batch(cache: _BatchCache, params: ModelParams, dpred: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of ``sum(dpred * pred)`` with respect to every trainable tensor."""
    dpred = np.asarray(dpred, dtype=np.float64).reshape(cache.pred.shape)
    g: dict[str, np.ndarray] = {}
    g["W2"] = dpred.T @ cache.R_drop
    g["b2"] = dpred.sum(axis=0)
    dR = (dpred @ params.W2) * cache.masks
    dU1 = dR * (cache.U1 > 0)
    g["W1"] = dU1.T @ cache.Zn
    g["b1"] = dU1.sum(axis=0)
    dZn = dU1 @ params.W1

    if cache.bn_mode is None:
        dZ = dZn
    else:
        g["bn_gamma"] = np.sum(dZn * cache.zhat, axis=0)
        g["bn_beta"] = dZn.sum(axis=0)
        dzhat = dZn * params.bn_gamma
        if cache.bn_mode == "batch":
            B = dZn.shape[0]
            dZ = (cache.inv_std / B) * (
                B * dzhat - dzhat.sum(axis=0) - cache.zhat * np.sum(dzhat * cache.zhat, axis=0)
            )
        else:
            dZ = dzhat * cache.inv_std

    g["V"] = np.zeros_like(params.V)
    g["w"] = np.zeros_like(params.w)
    if params.gated:
        g["U"] = np.zeros_like(params.U)
    for c, dz in zip(cache.bags, dZ):
        X, a = c["X"], c["a"]
        da = X @ dz
        de = a * (da - a @ da)
        g["w"] += c["H"].T @ de
        dH = np.outer(de, params.w)
        if params.gated:
            dT = dH * c["G"]
            dGate = dH * c["T"] * c["G"] * (1.0 - c["G"])
            g["U"] += dGate.T @ X
        else:
            dT = dH
        dA = dT * (1.0 - c["T"] ** 2)
        g["V"] += dA.T @ X
    return g


def update_running_stats(params: ModelParams, cache: _BatchCache, momentum: float = BN_MOMENTUM) -> None:
    if cache.batch_stats is None:
        return
    mu, var = cache.batch_stats
    B = cache.Z.shape[0]
    unbiased = var * B / (B - 1)
    params.bn_mean = (1 - momentum) * params.bn_mean + momentum * mu
    params.bn_var = (1 - momentum) * params.bn_var + momentum * unbiased


def forward_bag(bag, params: ModelParams, train_mode: bool = False, rng: np.random.Generator | None = None) -> BagOutput:
    """Single-bag forward; batch norm (if any) uses running statistics.

    ``bag`` may be a FeatureBag or a bare (n x d) matrix.
    """
    X = getattr(bag, "features", bag)
    masks = None
    if train_mode and params.dropout_rate > 0:
        if rng is None:
            raise ValueError("train_mode with dropout needs an rng")
        masks = dropout_masks(rng, 1, params.h_mlp, params.dropout_rate)
    cache = forward_batch([X], params, "running", masks)
    return BagOutput(cache.pred[0].copy(), cache.bags[0]["a"].copy())


def backward_bag(bag, params: ModelParams, upstream_grad, dropout_mask: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Parameter gradients of ``upstream_grad . prediction`` for one bag (eval mode or fixed mask)."""
    X = getattr(bag, "features", bag)
    masks = None if dropout_mask is None else np.asarray(dropout_mask, dtype=np.float64).reshape(1, -1)
    cache = forward_batch([X], params, "running", masks)
    return backward_batch(cache, params, np.asarray(upstream_grad, dtype=np.float64).reshape(1, -1))


def positive_probability(logits: np.ndarray) -> np.ndarray:
    logits = np.atleast_2d(logits)
    m = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - m)
    return ex[:, 1] / ex.sum(axis=1)


def predict_scores(params: ModelParams, bags: Sequence) -> np.ndarray:
    """Continuous score per bag: regression output or positive-class probability."""
    preds = np.stack([forward_bag(b, params).prediction for b in bags])
    if params.is_regression:
        return preds[:, 0]
    return positive_probability(preds)


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    name = params.preset.encode("utf-8")
    flags = int(params.gated) | (int(params.batch_norm) << 1)
    with open(path, "wb") as fh:
        fh.write(
            _CKPT_HEADER.pack(
                CHECKPOINT_MAGIC, CHECKPOINT_VERSION, params.d, params.h_att,
                params.h_mlp, params.out, flags, params.dropout_rate,
            )
        )
        fh.write(struct.pack("<H", len(name)) + name)
        for arr in params.tensors().values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> ModelParams:
    data = Path(path).read_bytes()
    if len(data) < _CKPT_HEADER.size + 2:
        raise FormatError(f"{path}: truncated checkpoint")
    magic, version, d, h_att, h_mlp, out, flags, rate = _CKPT_HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    off = _CKPT_HEADER.size
    (nlen,) = struct.unpack_from("<H", data, off)
    off += 2
    preset = data[off : off + nlen].decode("utf-8")
    off += nlen
    gated, bn = bool(flags & 1), bool(flags & 2)
    shapes = {
        "V": (h_att, d), "w": (h_att,), "U": (h_att, d), "W1": (h_mlp, d), "b1": (h_mlp,),
        "W2": (out, h_mlp), "b2": (out,), "bn_gamma": (d,), "bn_beta": (d,), "bn_mean": (d,), "bn_var": (d,),
    }
    present = [n for n in TENSOR_ORDER if (n != "U" or gated) and (not n.startswith("bn_") or bn)]
    tensors = {}
    for n in present:
        count = int(np.prod(shapes[n]))
        if off + 4 * count > len(data):
            raise FormatError(f"{path}: truncated tensor {n}")
        tensors[n] = np.frombuffer(data, "<f4", count, off).reshape(shapes[n]).astype(np.float64)
        off += 4 * count
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes")
    return ModelParams(dropout_rate=float(rate), preset=preset, **tensors)

