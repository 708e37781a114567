# float32 storage, float64 accumulation; all reductions run over the last axis
from __future__ import annotations

import math

import numpy as np
import numpy.typing as npt

Matrix = npt.NDArray[np.float32]
Vector = npt.NDArray[np.floating]

_GELU_C = math.sqrt(2.0 / math.pi)


class ContractError(ValueError):
    pass


class DegenerateInputError(ContractError):
    pass


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise ContractError(f"{name}: non-finite values")


def matmul(a: npt.ArrayLike, b: npt.ArrayLike) -> Matrix:
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.ndim != 2 or b.ndim != 2:
        raise ContractError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a, b, dtype=np.float64).astype(np.float32)
    _check_finite("matmul", out)
    return out


def linear(x: npt.ArrayLike, w: npt.ArrayLike, b: npt.ArrayLike | None = None) -> Matrix:
    x = np.asarray(x, dtype=np.float32)
    w = np.asarray(w, dtype=np.float32)
    if x.shape[-1] != w.shape[0]:
        raise ContractError(f"linear dimension mismatch: {x.shape} x {w.shape}")
    out = np.matmul(x, w, dtype=np.float64)
    if b is not None:
        b = np.asarray(b, dtype=np.float32)
        if b.shape != (w.shape[1],):
            raise ContractError(f"linear bias shape {b.shape} does not match output width {w.shape[1]}")
        out += b
    out = out.astype(np.float32)
    _check_finite("linear", out)
    return out


def _validate_temperature(temperature: float) -> float:
    temperature = float(temperature)
    if not temperature > 0.0 or not math.isfinite(temperature):
        raise ContractError(f"temperature must be positive, got {temperature}")
    return temperature


def log_softmax(v: npt.ArrayLike, temperature: float = 1.0) -> npt.NDArray[np.float64]:
    temperature = _validate_temperature(temperature)
    x = np.asarray(v, dtype=np.float64)
    _check_finite("log_softmax input", x)
    x = x / temperature
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(v: npt.ArrayLike, temperature: float = 1.0) -> npt.NDArray[np.float64]:
    temperature = _validate_temperature(temperature)
    x = np.asarray(v, dtype=np.float64)
    _check_finite("softmax input", x)
    x = x / temperature
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def masked_softmax(scores: npt.ArrayLike, keep: npt.ArrayLike) -> npt.NDArray[np.float64]:
    x = np.where(keep, np.asarray(scores, dtype=np.float64), -np.inf)
    if not np.asarray(keep).any(axis=-1).all():
        raise ContractError("masked_softmax: a row has every position masked")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(
    v: npt.ArrayLike,
    gain: npt.ArrayLike,
    bias: npt.ArrayLike,
    epsilon: float = 1e-5,
) -> Matrix:
    x = np.asarray(v, dtype=np.float32)
    gain = np.asarray(gain, dtype=np.float32)
    bias = np.asarray(bias, dtype=np.float32)
    if not epsilon > 0:
        raise ContractError(f"layer_norm epsilon must be positive, got {epsilon}")
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ContractError(
            f"layer_norm length mismatch: input {width}, gain {gain.shape}, bias {bias.shape}"
        )
    x64 = x.astype(np.float64)
    mean = x64.mean(axis=-1, keepdims=True)
    var = ((x64 - mean) ** 2).mean(axis=-1, keepdims=True)
    normed = (x64 - mean) / np.sqrt(var + epsilon)
    out = (normed * gain + bias).astype(np.float32)
    _check_finite("layer_norm", out)
    return out


def gelu(v: npt.ArrayLike) -> Matrix:
    # tanh approximation, as in the published GPT-2 checkpoints
    x = np.asarray(v, dtype=np.float64)
    out = 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))
    return out.astype(np.float32)


def cosine(a: npt.ArrayLike, b: npt.ArrayLike) -> float:
    a64 = np.asarray(a, dtype=np.float64).ravel()
    b64 = np.asarray(b, dtype=np.float64).ravel()
    if a64.shape != b64.shape:
        raise ContractError(f"cosine length mismatch: {a64.shape} vs {b64.shape}")
    na = float(np.linalg.norm(a64))
    nb = float(np.linalg.norm(b64))
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine of a zero-norm vector is undefined")
    value = float(np.dot(a64, b64) / (na * nb))
    return max(-1.0, min(1.0, value))


def argmax(v: npt.ArrayLike) -> int:
    # np.argmax returns the first maximum, i.e. the lowest id on ties
    return int(np.argmax(np.asarray(v)))
