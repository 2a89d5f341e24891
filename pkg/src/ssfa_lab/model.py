"""MLP encoder with a main classification head and an auxiliary head.

Only the first ``shared_count`` encoder layers take gradients from
auxiliary objectives.  Deeper layers still shape the aux head's input, but
through constant copies of their weights.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, add, matmul, relu, reshape

AUX_DIMS = {"rot": 4, "simclr": None, "em": 0}


@dataclass(frozen=True)
class ArchConfig:
    input_dim: int = 256
    widths: tuple = (256, 256, 128, 128)
    n_classes: int = 10
    aux_task: str = "rot"
    embed_dim: int = 32
    shared_count: int = 2

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if any(w <= 0 for w in self.widths) or self.input_dim <= 0:
            raise ValueError(f"layer widths must be positive, got {self.widths}")
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        if self.aux_task not in AUX_DIMS:
            raise ValueError(f"unknown aux task {self.aux_task!r}")
        if not 1 <= self.shared_count <= len(self.widths):
            raise ValueError(f"shared_count must be in 1..{len(self.widths)}, got {self.shared_count}")

    @property
    def aux_dim(self) -> int:
        d = AUX_DIMS[self.aux_task]
        return self.embed_dim if d is None else d


@dataclass
class Layer:
    W: Tensor
    b: Tensor

    @property
    def tensors(self):
        return [self.W, self.b]


@dataclass
class ModelParams:
    arch: ArchConfig
    encoder: list
    main_head: Layer
    aux_head: Layer | None

    @property
    def shared_count(self) -> int:
        return self.arch.shared_count

    def named(self) -> dict:
        out = {}
        for i, layer in enumerate(self.encoder):
            out[f"enc{i}.W"], out[f"enc{i}.b"] = layer.W, layer.b
        out["main.W"], out["main.b"] = self.main_head.W, self.main_head.b
        if self.aux_head is not None:
            out["aux.W"], out["aux.b"] = self.aux_head.W, self.aux_head.b
        return out

    def tensors(self, group: str = "all") -> list:
        """Parameter tensors of a group: all, encoder, shared, main, aux."""
        enc = [t for layer in self.encoder for t in layer.tensors]
        shared = [t for layer in self.encoder[: self.shared_count] for t in layer.tensors]
        main = self.main_head.tensors
        aux = self.aux_head.tensors if self.aux_head is not None else []
        groups = {"all": enc + main + aux, "encoder": enc, "shared": shared,
                  "main": main, "aux": aux}
        try:
            return groups[group]
        except KeyError:
            raise ValueError(f"unknown parameter group {group!r}") from None

    def with_shared(self, scratch: list) -> "ModelParams":
        """Shallow view whose leading encoder layers are replaced by ``scratch``."""
        return ModelParams(self.arch, list(scratch) + self.encoder[len(scratch):],
                           self.main_head, self.aux_head)

    def fingerprint(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for name, t in self.named().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


def _affine(fan_in, fan_out, rng, name):
    limit = np.sqrt(6.0 / fan_in)
    W = Tensor(rng.uniform(-limit, limit, (fan_in, fan_out)), requires_grad=True, name=f"{name}.W")
    b = Tensor(np.zeros(fan_out), requires_grad=True, name=f"{name}.b")
    return Layer(W, b)


def init_model(arch: ArchConfig | None = None, seed: int = 0) -> ModelParams:
    """He-uniform weights, zero biases; deterministic in ``seed``."""
    arch = arch or ArchConfig()
    rng = np.random.default_rng([seed, 4242])
    dims = (arch.input_dim,) + arch.widths
    encoder = [_affine(dims[i], dims[i + 1], rng, f"enc{i}") for i in range(len(arch.widths))]
    main = _affine(dims[-1], arch.n_classes, rng, "main")
    aux = _affine(dims[-1], arch.aux_dim, rng, "aux") if arch.aux_dim else None
    return ModelParams(arch, encoder, main, aux)


def _as_input(x) -> Tensor:
    if isinstance(x, Tensor):
        return reshape(x, (x.shape[0], -1)) if x.data.ndim > 2 else x
    x = np.asarray(x, dtype=np.float64)
    return Tensor(x.reshape(len(x), -1))


def encode(x, params: ModelParams, grad_layers: int | None = None) -> Tensor:
    """Encoder features; layers at index >= ``grad_layers`` act as constants."""
    h = _as_input(x)
    if h.shape[1] != params.arch.input_dim:
        raise ValueError(f"encode: expected input dim {params.arch.input_dim}, got {h.shape[1]}")
    for i, layer in enumerate(params.encoder):
        if grad_layers is not None and i >= grad_layers:
            W, b = layer.W.detach(), layer.b.detach()
        else:
            W, b = layer.W, layer.b
        h = relu(add(matmul(h, W), b))
    return h


def classify(feature: Tensor, params: ModelParams, freeze: bool = False) -> Tensor:
    head = params.main_head
    W, b = (head.W.detach(), head.b.detach()) if freeze else (head.W, head.b)
    return add(matmul(feature, W), b)


def aux_forward(feature: Tensor, params: ModelParams, task: str | None = None) -> Tensor:
    """Aux-head output: 4 rotation logits, a contrastive embedding, or (em) frozen main logits."""
    task = task or params.arch.aux_task
    if task == "em":
        return classify(feature, params, freeze=True)
    if params.aux_head is None or task != params.arch.aux_task:
        raise ValueError(f"model has no aux head for task {task!r}")
    return add(matmul(feature, params.aux_head.W), params.aux_head.b)


def forward_numpy(x: np.ndarray, encoder: list, head: Layer) -> np.ndarray:
    """Graph-free logits, used for pseudo-labels and evaluation."""
    h = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    for layer in encoder:
        h = np.maximum(h @ layer.W.data + layer.b.data, 0.0)
    return h @ head.W.data + head.b.data


def features_numpy(x: np.ndarray, params: ModelParams) -> np.ndarray:
    h = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    for layer in params.encoder:
        h = np.maximum(h @ layer.W.data + layer.b.data, 0.0)
    return h


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


# ------------------------------------------------------------- snapshots

@dataclass
class ParamSnapshot:
    values: dict = field(default_factory=dict)


def snapshot(params: ModelParams, subset: str = "all") -> ParamSnapshot:
    ids = {t.node_id for t in params.tensors(subset)}
    return ParamSnapshot({name: t.data.copy() for name, t in params.named().items() if t.node_id in ids})


def restore(params: ModelParams, snap: ParamSnapshot) -> None:
    named = params.named()
    missing = set(snap.values) - set(named)
    if missing:
        raise ValueError(f"snapshot layers not present in params: {sorted(missing)}")
    for name, value in snap.values.items():
        if named[name].shape != value.shape:
            raise ValueError(f"snapshot shape mismatch for {name}")
    for name, value in snap.values.items():
        named[name].data = value.copy()


def clone(params: ModelParams) -> ModelParams:
    out = copy.deepcopy(params)
    for t in out.tensors("all"):
        t.grad = None
    return out


# ------------------------------------------------------------ checkpoints
# magic "SSFACKPT", u32 version, u32 json length, arch json, then every
# parameter (named() order) as little-endian float64.

CKPT_MAGIC = b"SSFACKPT"
CKPT_VERSION = 1


def save_checkpoint(params: ModelParams, path) -> None:
    meta = json.dumps(asdict(params.arch), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(meta)) + meta)
        for t in params.named().values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, n = struct.unpack("<II", raw[8:16])
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    arch = ArchConfig(**json.loads(raw[16:16 + n]))
    params = init_model(arch, seed=0)
    offset = 16 + n
    for t in params.named().values():
        size = t.data.size * 8
        chunk = raw[offset:offset + size]
        if len(chunk) != size:
            raise ValueError(f"{path}: truncated checkpoint")
        t.data = np.frombuffer(chunk, dtype="<f8").reshape(t.shape).astype(np.float64)
        offset += size
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return params
