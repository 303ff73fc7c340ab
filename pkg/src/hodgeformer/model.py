"""Model configuration and end-to-end assembly."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .layers import (
    KINDS,
    REQUIRES,
    ROLE_SOURCE,
    ConfigurationError,
    HodgeFormerLayer,
    Module,
    NeighborEmbedding,
    TaskHead,
    VanillaLayer,
)

RAW_WIDTH = {"v": 7, "e": 20, "f": 13}
SMOOTHING_GRID = (0.0, 0.05, 0.1, 0.2, 0.4)


@dataclass(frozen=True)
class LayerConfig:
    kind: str = "hodgeformer"
    elements: tuple = ("v",)

    def __post_init__(self):
        if self.kind not in ("hodgeformer", "vanilla"):
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        els = tuple(k for k in KINDS if k in set(self.elements))
        if not els or len(els) != len(set(self.elements)):
            raise ConfigurationError(f"layer elements must be a nonempty subset of v/e/f, got {self.elements}")
        object.__setattr__(self, "elements", els)


def make_layout(n_hodge=6, n_vanilla=2, mixing="append", interleave_every=2, elements=("v",)):
    """Layer sequence mixing HodgeFormer (H) and vanilla (T) layers.

    ``append`` places all T layers after the H layers (e.g. 6:2 gives
    HHHHHHTT); ``interleave`` inserts a T after every ``interleave_every`` H
    layers while T layers remain (6:2 every 2 gives HHTHHTHH).
    """
    if n_hodge + n_vanilla < 1:
        raise ConfigurationError("layout needs at least one layer")
    seq = []
    placed = 0
    for i in range(n_hodge):
        seq.append(LayerConfig("hodgeformer", tuple(elements)))
        if mixing == "interleave" and (i + 1) % interleave_every == 0 and placed < n_vanilla:
            seq.append(LayerConfig("vanilla", tuple(elements)))
            placed += 1
    if mixing not in ("append", "interleave"):
        raise ConfigurationError(f"unknown mixing strategy {mixing!r}")
    seq += [LayerConfig("vanilla", tuple(elements))] * (n_vanilla - placed)
    return seq


@dataclass
class ModelConfig:
    """Architecture and training hyperparameters."""

    n_hodge: int = 6
    n_vanilla: int = 2
    mixing: str = "append"
    interleave_every: int = 2
    elements: tuple = ("v",)
    layers: list = None
    d: int = 256
    heads: int = 4
    d_hidden: int = 512
    dropout: float = 0.1
    task: str = "classification"
    num_classes: int = 3
    pool_element: str = "v"
    label_smoothing: float = 0.2
    class_weighting: bool = False
    lr: float = 5e-4
    lr_min: float = 1e-6
    batch_size: int = 8
    epochs: int = 200
    seed: int = 0
    precision: str = "float32"
    s_override: dict = field(default_factory=dict)
    augment: bool = True
    jitter: float = 0.1
    val_fraction: float = 0.2
    target_train_acc: float = None

    def __post_init__(self):
        self.elements = tuple(k for k in KINDS if k in set(self.elements))
        if self.layers is not None:
            self.layers = [l if isinstance(l, LayerConfig) else LayerConfig(l["kind"], tuple(l["elements"]))
                           for l in self.layers]
        self.validate()

    def validate(self):
        if self.heads < 1 or self.d % self.heads:
            raise ConfigurationError(f"d={self.d} must be a multiple of heads={self.heads}")
        if not self.layer_sequence():
            raise ConfigurationError("layer sequence is empty")
        if self.task not in ("classification", "segmentation"):
            raise ConfigurationError(f"unknown task {self.task!r}")
        if self.pool_element not in KINDS:
            raise ConfigurationError(f"pool_element must be one of {KINDS}")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigurationError("label_smoothing must lie in [0, 1)")
        if not 0 <= self.dropout < 1:
            raise ConfigurationError("dropout must lie in [0, 1)")
        if self.precision not in ("float32", "float64"):
            raise ConfigurationError("precision must be float32 or float64")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be at least 2")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("batch_size must be >= 1 and epochs >= 0")
        for k in self.s_override:
            if k not in KINDS:
                raise ConfigurationError(f"s_override key {k!r} is not an element kind")

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def layer_sequence(self):
        if self.layers is not None:
            return list(self.layers)
        if not self.elements:
            raise ConfigurationError("elements must name at least one of v/e/f")
        return make_layout(self.n_hodge, self.n_vanilla, self.mixing, self.interleave_every, self.elements)

    def updated_elements(self):
        return tuple(k for k in KINDS if any(k in l.elements for l in self.layer_sequence()))

    def head_element(self):
        if self.task == "classification":
            return self.pool_element
        updated = self.updated_elements()
        return "f" if "f" in updated else ("v" if "v" in updated else "e")

    def embedded_elements(self):
        need = {self.head_element()}
        for l in self.layer_sequence():
            for k in l.elements:
                need.update(REQUIRES[k] if l.kind == "hodgeformer" else (k,))
        return tuple(k for k in KINDS if k in need)

    def pattern_elements(self):
        """Kinds whose sparsity patterns are attended over by some Hodge star."""
        need = set()
        for l in self.layer_sequence():
            if l.kind == "hodgeformer":
                for k in l.elements:
                    need.update(k2 for k2 in REQUIRES[k])
        return tuple(k for k in KINDS if k in need)

    def to_dict(self):
        out = dataclasses.asdict(self)
        out["elements"] = list(self.elements)
        if self.layers is not None:
            out["layers"] = [{"kind": l.kind, "elements": list(l.elements)} for l in self.layers]
        return out

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        data = dict(data)
        if "elements" in data:
            data["elements"] = tuple(data["elements"])
        return cls(**data)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


class HodgeFormerModel(Module):
    """Neighbor embeddings, a stack of HodgeFormer/vanilla layers and a task head."""

    def __init__(self, config, zero_init=True):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x4D4F44]))
        dt = config.dtype
        self.embeddings = {}
        for k in config.embedded_elements():
            self.embeddings[k] = self.child(f"embed_{k}", NeighborEmbedding(
                RAW_WIDTH[k], config.d, config.d_hidden, rng, dt))
        self.layers = []
        for i, lc in enumerate(config.layer_sequence()):
            cls = HodgeFormerLayer if lc.kind == "hodgeformer" else VanillaLayer
            layer = cls(config.d, config.heads, config.d_hidden, lc.elements, rng, config.dropout, dt,
                        zero_init=zero_init)
            self.layers.append(self.child(f"layer{i}", layer))
        self.head = self.child("head", TaskHead(config.task, config.d, config.d_hidden,
                                                config.num_classes, config.head_element(), rng, dt))

    def parameters(self):
        return self.named_parameters()

    def forward(self, batch, train=False, rng=None, trace=None):
        xs = {k: emb(batch.features[k], batch.agg[k]) for k, emb in self.embeddings.items()}
        for i, layer in enumerate(self.layers):
            if isinstance(layer, HodgeFormerLayer):
                layer_trace = None
                if trace is not None:
                    layer_trace = []
                xs = layer(xs, batch.ops, batch.patterns, train, rng, layer_trace)
                if trace is not None:
                    trace.extend((i, role, w) for role, w in layer_trace)
            else:
                xs = layer(xs, batch.offsets, train, rng)
        return self.head(xs, batch, train, rng)

    __call__ = forward

    def state_arrays(self):
        return {f"param/{k}": v.data for k, v in self.parameters().items()}

    def load_state_arrays(self, arrays):
        for k, v in self.parameters().items():
            key = f"param/{k}"
            if key not in arrays:
                raise KeyError(f"checkpoint lacks parameter {k}")
            if arrays[key].shape != v.shape:
                raise ValueError(f"parameter {k}: checkpoint shape {arrays[key].shape} != {v.shape}")
            v.data = np.array(arrays[key], dtype=v.dtype)


__all__ = ["LayerConfig", "ModelConfig", "HodgeFormerModel", "make_layout", "ROLE_SOURCE", "SMOOTHING_GRID"]
