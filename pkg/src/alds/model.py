"""In-memory network description: ordered layers with metadata and weights."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from alds.tensor import as_weight_tensor


@dataclass(frozen=True)
class LayerMeta:
    name: str
    kind: str
    shape: tuple[int, int, int, int]
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    output_pixels: int | None = None
    input_size: tuple[int, int] | None = None

    def __post_init__(self):
        if self.kind not in ("conv", "fc"):
            raise ValueError(f"layer {self.name!r}: kind must be 'conv' or 'fc'")
        if len(self.shape) != 4 or min(self.shape) < 1:
            raise ValueError(f"layer {self.name!r}: invalid shape {self.shape}")
        if self.kind == "fc":
            if self.shape[2:] != (1, 1):
                raise ValueError(f"fc layer {self.name!r} must have a 1x1 kernel")
            if self.output_pixels not in (None, 1):
                raise ValueError(f"fc layer {self.name!r} must have output_pixels=1")
        if self.output_pixels is not None and self.output_pixels < 1:
            raise ValueError(f"layer {self.name!r}: output_pixels must be >= 1")

    @property
    def num_params(self) -> int:
        return int(np.prod(self.shape))


@dataclass(frozen=True)
class Layer:
    meta: LayerMeta
    weights: np.ndarray

    @property
    def name(self) -> str:
        return self.meta.name


@dataclass
class NetworkModel:
    layers: list[Layer] = field(default_factory=list)

    def __post_init__(self):
        names = [layer.name for layer in self.layers]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise ValueError(f"duplicate layer names: {dupes}")
        for layer in self.layers:
            if tuple(layer.weights.shape) != tuple(layer.meta.shape):
                raise ValueError(
                    f"layer {layer.name!r}: weights {layer.weights.shape} "
                    f"do not match metadata {layer.meta.shape}"
                )

    @classmethod
    def from_weights(cls, weights, names=None, kinds=None, output_pixels=None):
        """Build a model from a list of weight tensors with default metadata."""
        layers = []
        for i, w in enumerate(weights):
            w = as_weight_tensor(w)
            name = names[i] if names else f"layer{i}"
            kind = kinds[i] if kinds else ("fc" if w.shape[2:] == (1, 1) else "conv")
            pixels = output_pixels[i] if output_pixels else (1 if kind == "fc" else None)
            meta = LayerMeta(name, kind, tuple(int(s) for s in w.shape), output_pixels=pixels)
            layers.append(Layer(meta, w))
        return cls(layers)

    @property
    def names(self) -> list[str]:
        return [layer.name for layer in self.layers]

    @property
    def total_params(self) -> int:
        return sum(layer.meta.num_params for layer in self.layers)

    def layer(self, name: str) -> Layer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def __len__(self):
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)
