"""Activation-space interventions: clamping units and injecting noise.

A plan is a declarative description; ``compile`` checks it against a model
and produces the per-layer arrays the forward pass applies.  Interventions act
on a layer's *output*, so clamping a ReLU layer clamps post-nonlinearity
activity (post-batchnorm too, when batchnorm precedes the ReLU).  For
convolutional layers a unit is a whole feature map.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

import numpy as np

from ..errors import PlanError


class ClampMode(str, Enum):
    ZERO = "zero"
    MEAN = "mean"


@dataclass(frozen=True, order=True)
class UnitRef:
    layer: int
    unit: int


@dataclass
class LayerStats:
    """Empirical statistics of one layer's units.

    ``mean`` and ``var`` are per unit; for feature maps they pool all spatial
    elements.  ``element_mean`` keeps the per-element means of feature maps
    (shape ``[C, H, W]``) and is ``None`` for dense layers.
    """

    mean: np.ndarray
    var: np.ndarray
    element_mean: np.ndarray | None = None


@dataclass
class UnitStats:
    layers: dict[int, LayerStats] = field(default_factory=dict)

    def __contains__(self, layer: int) -> bool:
        return layer in self.layers

    def __getitem__(self, layer: int) -> LayerStats:
        return self.layers[layer]

    def clamp_value(self, ref: UnitRef) -> np.ndarray | float:
        st = self.layers[ref.layer]
        if st.element_mean is not None:
            return st.element_mean[ref.unit]
        return float(st.mean[ref.unit])


@dataclass(frozen=True)
class NoiseSpec:
    """Additive Gaussian noise with variance ``scale * var(unit)``.

    ``layers=None`` means every layer present in the plan's statistics.
    """

    scale: float
    seed: int = 0
    layers: tuple[int, ...] | None = None


@dataclass(frozen=True)
class InterventionPlan:
    clamps: tuple[tuple[UnitRef, ClampMode], ...] = ()
    stats: UnitStats | None = None
    noise: NoiseSpec | None = None

    @classmethod
    def clamp(cls, units: Iterable[UnitRef], mode: ClampMode | str = ClampMode.ZERO,
              stats: UnitStats | None = None) -> InterventionPlan:
        mode = ClampMode(mode)
        return cls(clamps=tuple((u, mode) for u in units), stats=stats)

    @property
    def is_empty(self) -> bool:
        return not self.clamps and (self.noise is None or self.noise.scale == 0.0)

    def compile(self, model) -> CompiledPlan:
        actions: dict[int, LayerAction] = {}
        seen: set[UnitRef] = set()
        by_layer: dict[int, list[tuple[int, ClampMode]]] = {}
        for ref, mode in self.clamps:
            mode = ClampMode(mode)
            _check_ref(model, ref)
            if ref in seen:
                raise PlanError(f"unit {ref} appears more than once in the clamp set")
            seen.add(ref)
            if mode is ClampMode.MEAN and (self.stats is None or ref.layer not in self.stats):
                raise PlanError(f"mean clamp of {ref} needs unit statistics for layer {ref.layer}")
            by_layer.setdefault(ref.layer, []).append((ref.unit, mode))

        for layer, entries in by_layer.items():
            shape = model.output_shapes[layer]
            units = np.array([u for u, _ in entries], dtype=np.intp)
            values = np.zeros((len(entries),) + tuple(shape[1:]))
            for k, (u, mode) in enumerate(entries):
                if mode is ClampMode.MEAN:
                    values[k] = self.stats.clamp_value(UnitRef(layer, u))
            actions[layer] = LayerAction(units=units, values=values)

        if self.noise is not None and self.noise.scale < 0:
            raise PlanError(f"noise scale must be >= 0, got {self.noise.scale}")
        if self.noise is not None and self.noise.scale > 0:
            if self.stats is None:
                raise PlanError("noise injection needs unit statistics")
            layers = self.noise.layers if self.noise.layers is not None else tuple(self.stats.layers)
            for layer in layers:
                if layer not in self.stats:
                    raise PlanError(f"no unit statistics for layer {layer} in noise scope")
                width = model.output_shapes[layer][0]
                var = self.stats[layer].var
                if var.shape != (width,):
                    raise PlanError(f"statistics for layer {layer} cover {var.shape[0]} units, layer has {width}")
                action = actions.setdefault(layer, LayerAction())
                action.noise_std = np.sqrt(self.noise.scale * var)
        return CompiledPlan(actions)


@dataclass
class LayerAction:
    units: np.ndarray | None = None
    values: np.ndarray | None = None
    noise_std: np.ndarray | None = None

    def apply(self, a: np.ndarray, rng: np.random.Generator | None) -> np.ndarray:
        a = a.copy()
        if self.noise_std is not None:
            if rng is None:
                raise PlanError("noise injection requires a random generator")
            std = self.noise_std.reshape((1, -1) + (1,) * (a.ndim - 2))
            a += rng.standard_normal(a.shape) * std
        if self.units is not None and len(self.units):
            a[:, self.units] = self.values
        return a


@dataclass
class CompiledPlan:
    actions: dict[int, LayerAction]

    def get(self, layer: int) -> LayerAction | None:
        return self.actions.get(layer)


def _check_ref(model, ref: UnitRef) -> None:
    if not 0 <= ref.layer < len(model.layers):
        raise PlanError(f"layer index {ref.layer} out of range (model has {len(model.layers)} layers)")
    width = model.output_shapes[ref.layer][0]
    if not 0 <= ref.unit < width:
        raise PlanError(f"unit index {ref.unit} out of range for layer {ref.layer} (width {width})")
