"""Task-specific output layers over one shared encoder, plus persistence.

Hard parameter sharing: every registered task reads the same encoder;
only its own dense head (width = number of classes, or 1 for regression)
is task-specific.  Checkpoints are a directory with ``manifest.json``
(format magic, config, parameter layout, task registry) and
``weights.bin`` (concatenated little-endian float32 in manifest order).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .encoder import EncoderConfig, EncoderParams, encode_sequence, init_encoder, pool_cls, trunc_normal
from .errors import CheckpointError, ConfigError, ContractError, RegistryError

CHECKPOINT_MAGIC = "MTLF1"
CHECKPOINT_VERSION = 1

CLASSIFICATION_KINDS = ("single_classification", "pair_classification")
REGRESSION_KINDS = ("single_regression", "pair_regression")


@dataclass(frozen=True)
class TaskSpec:
    """A named task: kind, label structure, loss, and domain tag."""

    name: str
    task_kind: str
    num_classes: int | None = None
    target_range: tuple[float, float] | None = None
    loss_kind: str = "CE"
    domain: str = "in_domain"

    def __post_init__(self):
        if self.task_kind in CLASSIFICATION_KINDS:
            if self.loss_kind != "CE":
                raise ConfigError(f"task '{self.name}': classification pairs with CE loss")
            if not self.num_classes or self.num_classes < 2:
                raise ConfigError(f"task '{self.name}': classification needs >=2 classes")
        elif self.task_kind in REGRESSION_KINDS:
            if self.loss_kind != "MSE":
                raise ConfigError(f"task '{self.name}': regression pairs with MSE loss")
            if self.target_range is None:
                raise ConfigError(f"task '{self.name}': regression needs a target range")
        else:
            raise ConfigError(f"task '{self.name}': unknown task_kind '{self.task_kind}'")
        if self.domain not in ("in_domain", "cross_domain"):
            raise ConfigError(f"task '{self.name}': bad domain tag '{self.domain}'")

    @property
    def is_classification(self) -> bool:
        return self.task_kind in CLASSIFICATION_KINDS

    @property
    def head_width(self) -> int:
        return self.num_classes if self.is_classification else 1

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "task_kind": self.task_kind,
            "num_classes": self.num_classes,
            "target_range": list(self.target_range) if self.target_range else None,
            "loss_kind": self.loss_kind,
            "domain": self.domain,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "TaskSpec":
        return cls(
            name=obj["name"],
            task_kind=obj["task_kind"],
            num_classes=obj.get("num_classes"),
            target_range=tuple(obj["target_range"]) if obj.get("target_range") else None,
            loss_kind=obj["loss_kind"],
            domain=obj.get("domain", "in_domain"),
        )


@dataclass
class HeadParams:
    weight: Tensor  # [d, width]
    bias: Tensor  # [width]


@dataclass
class SharedModel:
    """One shared encoder plus a head per registered task."""

    encoder: EncoderParams
    heads: dict[str, HeadParams] = field(default_factory=dict)
    tasks: dict[str, TaskSpec] = field(default_factory=dict)

    @property
    def config(self) -> EncoderConfig:
        return self.encoder.config

    def named_parameters(self):
        for name, p in self.encoder.named_parameters():
            yield f"encoder.{name}", p
        for task in self.heads:
            yield f"heads.{task}.weight", self.heads[task].weight
            yield f"heads.{task}.bias", self.heads[task].bias

    def task_parameters(self, task_name: str):
        """Parameters touched by one task's loss: encoder plus its own head."""
        for name, p in self.encoder.named_parameters():
            yield f"encoder.{name}", p
        head = self.heads[task_name]
        yield f"heads.{task_name}.weight", head.weight
        yield f"heads.{task_name}.bias", head.bias


def new_model(config: EncoderConfig, rng: np.random.Generator, dtype=np.float32) -> SharedModel:
    return SharedModel(encoder=init_encoder(config, rng, dtype=dtype))


def attach_head(model: SharedModel, spec: TaskSpec, rng: np.random.Generator, dtype=None) -> None:
    """Create a head for ``spec``; the encoder is untouched."""
    if spec.name in model.tasks:
        raise RegistryError(f"task '{spec.name}' already registered")
    if dtype is None:
        dtype = model.encoder.token_emb.data.dtype
    d = model.config.hidden_dim
    width = spec.head_width
    model.heads[spec.name] = HeadParams(
        weight=Tensor(trunc_normal(rng, (d, width), dtype=dtype), requires_grad=True),
        bias=Tensor(np.zeros(width, dtype=dtype), requires_grad=True),
    )
    model.tasks[spec.name] = spec


def detach_head(model: SharedModel, task_name: str) -> None:
    model.heads.pop(task_name, None)
    model.tasks.pop(task_name, None)


def forward_task(
    model: SharedModel,
    task_name: str,
    token_ids: np.ndarray,
    attention_mask: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Predictions for one homogeneous batch: logits [B, C] or values [B]."""
    if task_name not in model.tasks:
        raise RegistryError(
            f"unknown task '{task_name}' (registered: {sorted(model.tasks)})"
        )
    spec = model.tasks[task_name]
    head = model.heads[task_name]
    hidden = encode_sequence(model.encoder, token_ids, attention_mask, training=training, rng=rng)
    sent = pool_cls(hidden)
    sent = ag.dropout(sent, model.config.dropout_p, training, rng)
    out = ag.add(ag.matmul(sent, head.weight), head.bias)
    if spec.is_classification:
        return out
    return ag.take(out, (slice(None), 0))


def task_loss(spec: TaskSpec, predictions: Tensor, labels) -> Tensor:
    """Dispatch to CE or MSE per the task's loss kind."""
    if spec.loss_kind == "CE":
        arr = np.asarray(labels)
        if not np.issubdtype(arr.dtype, np.integer):
            raise ContractError(
                f"task '{spec.name}' uses CE loss and needs integer class labels"
            )
        if predictions.data.ndim != 2 or predictions.shape[1] != spec.num_classes:
            raise ContractError(
                f"task '{spec.name}' expects logits [B, {spec.num_classes}], got {predictions.shape}"
            )
        return ag.cross_entropy_loss(predictions, arr)
    arr = np.asarray(labels, dtype=predictions.data.dtype)
    if predictions.data.ndim != 1:
        raise ContractError(
            f"task '{spec.name}' expects one value per example, got shape {predictions.shape}"
        )
    return ag.mse_loss(predictions, Tensor(arr))


# -- checkpoint persistence ----------------------------------------------------

def save_checkpoint(model: SharedModel, path: str | Path) -> None:
    """Write manifest.json + weights.bin; parameters stored as float32 LE."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    blobs = []
    offset = 0
    for name, p in model.named_parameters():
        arr = np.ascontiguousarray(p.data, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "size": int(arr.size)})
        blobs.append(arr.tobytes())
        offset += arr.size * 4
    manifest = {
        "magic": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "encoder_config": model.config.to_dict(),
        "params": entries,
        "tasks": [model.tasks[name].to_dict() for name in model.tasks],
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    (path / "weights.bin").write_bytes(b"".join(blobs))


def load_checkpoint(path: str | Path) -> SharedModel:
    """Rebuild a SharedModel; any inconsistency raises CheckpointError."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    weights_path = path / "weights.bin"
    if not manifest_path.exists() or not weights_path.exists():
        raise CheckpointError(f"checkpoint incomplete at {path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"manifest.json is not valid JSON: {e.msg}") from e
    if manifest.get("magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(
            f"bad checkpoint magic {manifest.get('magic')!r}, expected {CHECKPOINT_MAGIC!r}"
        )
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')}")
    config = EncoderConfig.from_dict(manifest["encoder_config"])
    blob = weights_path.read_bytes()
    expected_bytes = sum(e["size"] for e in manifest["params"]) * 4
    if len(blob) != expected_bytes:
        raise CheckpointError(
            f"weights.bin holds {len(blob)} bytes, manifest expects {expected_bytes}"
        )

    model = new_model(config, np.random.default_rng(config.seed))
    for task_obj in manifest["tasks"]:
        spec = TaskSpec.from_dict(task_obj)
        attach_head(model, spec, np.random.default_rng(0))
    params = dict(model.named_parameters())
    if set(params) != {e["name"] for e in manifest["params"]}:
        raise CheckpointError("manifest parameter set does not match the model layout")
    for entry in manifest["params"]:
        arr = np.frombuffer(
            blob, dtype="<f4", count=entry["size"], offset=entry["offset"]
        ).reshape(entry["shape"])
        target = params[entry["name"]]
        if tuple(arr.shape) != target.data.shape:
            raise CheckpointError(
                f"parameter '{entry['name']}' shape {arr.shape} does not match model {target.data.shape}"
            )
        target.data = arr.copy()
        target.grad = None
    return model
