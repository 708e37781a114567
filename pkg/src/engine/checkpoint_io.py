from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Any, Mapping

import numpy as np
from safetensors import SafetensorError
from safetensors.numpy import load_file, save_file

from engine.tensor_ops import Matrix
from util.filehash import sha256_file
from util.paths import model_config_path, model_weights_path

_log = logging.getLogger(__name__)

_PREFIXES = ("transformer.",)
_IGNORED_SUFFIXES = (".attn.bias", ".attn.masked_bias")
_TIED_HEAD = "lm_head.weight"
# projection weights whose storage orientation depends on the exporter
_PROJECTIONS = ("attn.c_attn.weight", "attn.c_proj.weight", "mlp.c_fc.weight", "mlp.c_proj.weight")
WEIGHT_LAYOUTS = ("conv1d", "linear")


class CheckpointError(Exception):
    pass


class ConfigError(CheckpointError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class MissingTensorError(CheckpointError):
    def __init__(self, name: str) -> None:
        super().__init__(f"missing tensor: {name}")
        self.name = name


class ShapeMismatchError(CheckpointError):
    def __init__(self, name: str, expected: tuple[int, ...], actual: tuple[int, ...]) -> None:
        super().__init__(f"tensor {name}: expected shape {expected}, got {actual}")
        self.name = name
        self.expected = expected
        self.actual = actual


class UnexpectedTensorError(CheckpointError):
    def __init__(self, name: str, reason: str = "not part of a GPT-2 checkpoint") -> None:
        super().__init__(f"unexpected tensor {name}: {reason}")
        self.name = name


@dataclass(frozen=True)
class ModelConfig:
    n_layer: int
    n_head: int
    n_embd: int
    vocab_size: int
    n_ctx: int
    layer_norm_epsilon: float = 1e-5

    def __post_init__(self) -> None:
        for key in ("n_layer", "n_head", "n_embd", "vocab_size", "n_ctx"):
            if int(getattr(self, key)) < 1:
                raise ConfigError(f"{key} must be >= 1, got {getattr(self, key)}")
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.n_embd % self.n_head:
            raise ConfigError(f"n_embd ({self.n_embd}) is not divisible by n_head ({self.n_head})")
        if not self.layer_norm_epsilon > 0:
            raise ConfigError(f"layer_norm_epsilon must be positive, got {self.layer_norm_epsilon}")

    @property
    def head_dim(self) -> int:
        return self.n_embd // self.n_head

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_layer": self.n_layer,
            "n_head": self.n_head,
            "n_embd": self.n_embd,
            "vocab_size": self.vocab_size,
            "n_ctx": self.n_ctx,
            "layer_norm_epsilon": self.layer_norm_epsilon,
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "ModelConfig":
        n_ctx = raw.get("n_ctx", raw.get("n_positions"))
        values = {
            "n_layer": raw.get("n_layer"),
            "n_head": raw.get("n_head"),
            "n_embd": raw.get("n_embd"),
            "vocab_size": raw.get("vocab_size"),
            "n_ctx": n_ctx,
        }
        for key, value in values.items():
            if value is None:
                raise ConfigError(f"config.json is missing {key}")
        try:
            return cls(
                n_layer=int(values["n_layer"]),
                n_head=int(values["n_head"]),
                n_embd=int(values["n_embd"]),
                vocab_size=int(values["vocab_size"]),
                n_ctx=int(values["n_ctx"]),
                layer_norm_epsilon=float(raw.get("layer_norm_epsilon", 1e-5)),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config.json has a non-numeric field: {exc}") from exc


@dataclass(frozen=True, eq=False)
class LayerWeights:
    ln_1_g: Matrix
    ln_1_b: Matrix
    c_attn_w: Matrix
    c_attn_b: Matrix
    attn_proj_w: Matrix
    attn_proj_b: Matrix
    ln_2_g: Matrix
    ln_2_b: Matrix
    c_fc_w: Matrix
    c_fc_b: Matrix
    mlp_proj_w: Matrix
    mlp_proj_b: Matrix


@dataclass(frozen=True, eq=False)
class CheckpointBundle:
    config: ModelConfig
    tensors: Mapping[str, Matrix]
    layers: tuple[LayerWeights, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        validate_tensors(self.config, self.tensors)
        frozen: dict[str, Matrix] = {}
        for name, arr in self.tensors.items():
            arr = np.ascontiguousarray(arr, dtype=np.float32)
            arr.setflags(write=False)
            frozen[name] = arr
        object.__setattr__(self, "tensors", MappingProxyType(frozen))
        object.__setattr__(self, "layers", tuple(_layer_view(frozen, i) for i in range(self.config.n_layer)))

    @property
    def wte(self) -> Matrix:
        return self.tensors["wte.weight"]

    @property
    def wpe(self) -> Matrix:
        return self.tensors["wpe.weight"]

    @property
    def ln_f_g(self) -> Matrix:
        return self.tensors["ln_f.weight"]

    @property
    def ln_f_b(self) -> Matrix:
        return self.tensors["ln_f.bias"]

    def equals(self, other: "CheckpointBundle") -> bool:
        if self.config != other.config or set(self.tensors) != set(other.tensors):
            return False
        return all(self.tensors[k].tobytes() == other.tensors[k].tobytes() for k in self.tensors)


def _layer_view(tensors: Mapping[str, Matrix], i: int) -> LayerWeights:
    p = f"h.{i}."
    return LayerWeights(
        ln_1_g=tensors[p + "ln_1.weight"],
        ln_1_b=tensors[p + "ln_1.bias"],
        c_attn_w=tensors[p + "attn.c_attn.weight"],
        c_attn_b=tensors[p + "attn.c_attn.bias"],
        attn_proj_w=tensors[p + "attn.c_proj.weight"],
        attn_proj_b=tensors[p + "attn.c_proj.bias"],
        ln_2_g=tensors[p + "ln_2.weight"],
        ln_2_b=tensors[p + "ln_2.bias"],
        c_fc_w=tensors[p + "mlp.c_fc.weight"],
        c_fc_b=tensors[p + "mlp.c_fc.bias"],
        mlp_proj_w=tensors[p + "mlp.c_proj.weight"],
        mlp_proj_b=tensors[p + "mlp.c_proj.bias"],
    )


def tensor_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical tensor names with their runtime shapes (projections are (in, out))."""
    d = config.n_embd
    shapes: dict[str, tuple[int, ...]] = {
        "wte.weight": (config.vocab_size, d),
        "wpe.weight": (config.n_ctx, d),
    }
    for i in range(config.n_layer):
        p = f"h.{i}."
        shapes.update(
            {
                p + "ln_1.weight": (d,),
                p + "ln_1.bias": (d,),
                p + "attn.c_attn.weight": (d, 3 * d),
                p + "attn.c_attn.bias": (3 * d,),
                p + "attn.c_proj.weight": (d, d),
                p + "attn.c_proj.bias": (d,),
                p + "ln_2.weight": (d,),
                p + "ln_2.bias": (d,),
                p + "mlp.c_fc.weight": (d, 4 * d),
                p + "mlp.c_fc.bias": (4 * d,),
                p + "mlp.c_proj.weight": (4 * d, d),
                p + "mlp.c_proj.bias": (d,),
            }
        )
    shapes["ln_f.weight"] = (d,)
    shapes["ln_f.bias"] = (d,)
    return shapes


def validate_tensors(config: ModelConfig, tensors: Mapping[str, np.ndarray]) -> None:
    if not tensors:
        raise MissingTensorError("wte.weight")
    expected = tensor_shapes(config)
    for name, shape in expected.items():
        if name not in tensors:
            raise MissingTensorError(name)
        actual = tuple(np.shape(tensors[name]))
        if actual != shape:
            raise ShapeMismatchError(name, shape, actual)
    extras = sorted(set(tensors) - set(expected))
    if extras:
        raise UnexpectedTensorError(extras[0])


def _canonical_name(name: str) -> str:
    for prefix in _PREFIXES:
        if name.startswith(prefix):
            return name[len(prefix):]
    return name


def _normalize_tensors(
    raw: Mapping[str, np.ndarray],
    config: ModelConfig,
    layout: str,
) -> dict[str, Matrix]:
    expected = tensor_shapes(config)
    out: dict[str, Matrix] = {}
    head: np.ndarray | None = None
    for stored_name, arr in raw.items():
        name = _canonical_name(stored_name)
        if name.endswith(_IGNORED_SUFFIXES):
            continue
        if name == _TIED_HEAD:
            head = arr
            continue
        if arr.dtype not in (np.float32, np.float16):
            raise CheckpointFormatError(f"tensor {stored_name}: unsupported dtype {arr.dtype}")
        arr = arr.astype(np.float32, copy=False)
        if layout == "linear" and name.endswith(_PROJECTIONS) and name in expected:
            arr = arr.T
        out[name] = np.ascontiguousarray(arr)
    if head is not None:
        wte = out.get("wte.weight")
        if wte is None or head.shape != wte.shape or not np.array_equal(head.astype(np.float32), wte):
            raise UnexpectedTensorError(_TIED_HEAD, "untied output heads are not supported")
    return out


def _read_config(model_dir: Path) -> tuple[ModelConfig, str]:
    path = model_config_path(model_dir)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config document not found: {path}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"config document unreadable: {path} ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config document must be a JSON object: {path}")
    layout = str(raw.get("weight_layout", "conv1d"))
    if layout not in WEIGHT_LAYOUTS:
        raise ConfigError(f"unsupported weight_layout {layout!r}")
    return ModelConfig.from_dict(raw), layout


def load_checkpoint(model_dir: str | Path) -> CheckpointBundle:
    model_dir = Path(model_dir)
    config, layout = _read_config(model_dir)
    weights = model_weights_path(model_dir)
    if not weights.exists():
        raise CheckpointFormatError(f"weights file not found: {weights}")
    try:
        raw = load_file(str(weights))
    except SafetensorError as exc:
        raise CheckpointFormatError(f"malformed safetensors file {weights}: {exc}") from exc
    except (OSError, ValueError) as exc:
        raise CheckpointFormatError(f"cannot read {weights}: {exc}") from exc
    tensors = _normalize_tensors(raw, config, layout)
    bundle = CheckpointBundle(config=config, tensors=tensors)
    _log.info(
        "Loaded checkpoint %s (n_layer=%d, n_embd=%d, vocab=%d)",
        model_dir,
        config.n_layer,
        config.n_embd,
        config.vocab_size,
    )
    return bundle


def write_checkpoint(bundle: CheckpointBundle, model_dir: str | Path) -> None:
    validate_tensors(bundle.config, bundle.tensors)
    model_dir = Path(model_dir)
    try:
        model_dir.mkdir(parents=True, exist_ok=True)
        config = dict(bundle.config.to_dict(), weight_layout="conv1d")
        model_config_path(model_dir).write_text(
            json.dumps(config, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        save_file({k: np.ascontiguousarray(v) for k, v in bundle.tensors.items()}, str(model_weights_path(model_dir)))
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint to {model_dir}: {exc}") from exc


def checkpoint_digest(model_dir: str | Path) -> str:
    return sha256_file(model_weights_path(model_dir))


def random_checkpoint(config: ModelConfig, seed: int = 0, scale: float = 0.2) -> CheckpointBundle:
    rng = np.random.default_rng(seed)
    tensors: dict[str, Matrix] = {}
    for name, shape in tensor_shapes(config).items():
        if name.endswith(("ln_1.weight", "ln_2.weight", "ln_f.weight")):
            arr = 1.0 + 0.1 * rng.standard_normal(shape)
        elif name.endswith(".bias"):
            arr = 0.02 * rng.standard_normal(shape)
        else:
            arr = scale * rng.standard_normal(shape)
        tensors[name] = arr.astype(np.float32)
    return CheckpointBundle(config=config, tensors=tensors)
