"""Attention-based MIL pipeline: frozen features -> GDAT -> gated attention -> classifier."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .gdat import Gdat, GdatConfig, group_assignment
from .numeric import NonFiniteError, read_matrix, softmax_rows, write_matrix
from .owlora import AdapterStack

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 32
    hidden_dim: int | None = None  # gated-attention width, defaults to feature_dim // 2
    num_classes: int = 2
    init_std: float = 0.02
    head_init_std: float = 0.0  # classifier rows; 0 keeps the scorer still until the head is informative
    use_gdat: bool = True
    gdat: GdatConfig = field(default_factory=GdatConfig)

    @property
    def attn_hidden(self) -> int:
        return self.hidden_dim or self.feature_dim // 2


@dataclass
class BagOutput:
    logits: torch.Tensor
    A: torch.Tensor
    z: torch.Tensor
    H: torch.Tensor

    @property
    def Y_hat(self) -> int:
        # torch.argmax returns the first maximal index, i.e. lowest-index tie-break
        return int(torch.argmax(self.logits.detach()))


class ClassifierHead(nn.Module):
    """Affine head whose rows are appended in task-owned blocks."""

    def __init__(self, dim: int, num_classes: int, generator: torch.Generator | None, init_std: float):
        super().__init__()
        self.dim = dim
        self.init_std = init_std
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.last_block_task = 1
        self.add_classes(num_classes, generator)

    @property
    def num_classes(self) -> int:
        return sum(w.shape[0] for w in self.weights)

    def add_classes(self, n: int, generator: torch.Generator | None = None) -> None:
        if self.init_std > 0:
            w = torch.randn(n, self.dim, generator=generator, dtype=torch.float64) * self.init_std
        else:
            w = torch.zeros(n, self.dim, dtype=torch.float64)
        self.weights.append(nn.Parameter(w))
        self.biases.append(nn.Parameter(torch.zeros(n, dtype=torch.float64)))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        W = torch.cat(list(self.weights), dim=0)
        b = torch.cat(list(self.biases), dim=0)
        return W @ z + b


class MILModel(nn.Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        g = torch.Generator().manual_seed(seed)
        D, Dh = config.feature_dim, config.attn_hidden
        self.gdat = Gdat(D, config.gdat, config.init_std, g) if config.use_gdat else None
        self.attn_tanh = AdapterStack(D, Dh, init_std=config.init_std, generator=g)
        self.attn_gate = AdapterStack(D, Dh, init_std=config.init_std, generator=g)
        # zero scorer: attention starts exactly uniform, so the bag loss sets its polarity
        self.attn_score = nn.Parameter(torch.zeros(Dh, dtype=torch.float64))
        self.classifier = ClassifierHead(D, config.num_classes, g, config.head_init_std)

    # -- pipeline stages ------------------------------------------------------

    def refine(self, X: torch.Tensor, positions: np.ndarray) -> torch.Tensor:
        if self.gdat is None:
            return X
        assignment, m = group_assignment(positions, self.config.gdat.grouping_factor)
        return self.gdat(X, assignment, m)

    def attention_scores(self, H: torch.Tensor) -> torch.Tensor:
        return (torch.tanh(self.attn_tanh(H)) * torch.sigmoid(self.attn_gate(H))) @ self.attn_score

    def aggregate(self, H: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Gated attention pooling; returns ``(z, A)`` with A on the simplex."""
        A = softmax_rows(self.attention_scores(H))
        return A @ H, A

    def classify(self, z: torch.Tensor) -> torch.Tensor:
        return self.classifier(z)

    def forward(self, bag) -> BagOutput:
        X = torch.as_tensor(bag.instances, dtype=torch.float64)
        if X.shape[1] != self.config.feature_dim:
            raise ValueError(f"bag has feature dim {X.shape[1]}, model expects {self.config.feature_dim}")
        H = self.refine(X, bag.positions)
        z, A = self.aggregate(H)
        logits = self.classify(z)
        if not torch.isfinite(logits).all():
            raise NonFiniteError("non-finite bag logits")
        return BagOutput(logits=logits, A=A, z=z, H=H)


def bag_loss(logits: torch.Tensor, Y: int) -> torch.Tensor:
    """Softmax cross-entropy of the bag logits against class ``Y``."""
    if not 0 <= Y < logits.shape[-1]:
        raise ValueError(f"class id {Y} outside [0, {logits.shape[-1]})")
    return -torch.log_softmax(logits, dim=-1)[Y]


# ---------------------------------------------------------------------------
# checkpoints: manifest.json + one CMLM blob per named tensor
# ---------------------------------------------------------------------------


def _named_tensors(model: MILModel) -> dict[str, torch.Tensor]:
    out: dict[str, torch.Tensor] = {}
    for name, module in model.named_modules():
        if isinstance(module, AdapterStack):
            for key, t in module.named_state().items():
                out[f"{name}.{key}"] = t
    out["attn_score"] = model.attn_score.detach()
    for i, (w, b) in enumerate(zip(model.classifier.weights, model.classifier.biases)):
        out[f"classifier.weights.{i}"] = w.detach()
        out[f"classifier.biases.{i}"] = b.detach()
    return out


def save_checkpoint(model: MILModel, directory: str | Path, meta: dict | None = None) -> Path:
    directory = Path(directory)
    (directory / "tensors").mkdir(parents=True, exist_ok=True)
    tensors = _named_tensors(model)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "model_config": _config_dict(model.config),
        "layers": {name: m.layout() for name, m in model.named_modules() if isinstance(m, AdapterStack)},
        "classifier_blocks": [int(w.shape[0]) for w in model.classifier.weights],
        "tensors": {name: {"shape": list(t.shape), "file": f"tensors/{name}.cmlm"} for name, t in tensors.items()},
    }
    for name, t in tensors.items():
        write_matrix(directory / f"tensors/{name}.cmlm", t.reshape(t.shape[0], -1) if t.ndim else t.reshape(1, 1))
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def _config_dict(config: ModelConfig) -> dict:
    return asdict(config)


def model_config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    d["gdat"] = GdatConfig(**d["gdat"])
    return ModelConfig(**d)


def load_checkpoint(directory: str | Path) -> tuple[MILModel, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
    tensors = {
        name: torch.from_numpy(read_matrix(directory / info["file"]).reshape(info["shape"]))
        for name, info in manifest["tensors"].items()
    }
    config = model_config_from_dict(manifest["model_config"])
    model = MILModel(config)
    blocks = manifest["classifier_blocks"]
    model.classifier.weights = nn.ParameterList(
        nn.Parameter(tensors[f"classifier.weights.{i}"].clone()) for i in range(len(blocks)))
    model.classifier.biases = nn.ParameterList(
        nn.Parameter(tensors[f"classifier.biases.{i}"].clone()) for i in range(len(blocks)))
    model.attn_score = nn.Parameter(tensors["attn_score"].clone())
    for name, module in model.named_modules():
        if isinstance(module, AdapterStack):
            prefix = name + "."
            own = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
            module.load_named_state(manifest["layers"][name], own)
    return model, manifest["meta"]
