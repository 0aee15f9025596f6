from __future__ import annotations

from collections.abc import Iterable, Mapping

import numpy as np


class ModelParams:
    """Named, ordered parameter tensors stored in one contiguous float64 buffer.

    Each named tensor is a view into ``flat``, so optimizers and the fused
    kernels can work on the flat vector while callers index by name.
    ``frozen`` names are excluded from training.
    """

    def __init__(self, tensors: Mapping[str, np.ndarray], frozen: Iterable[str] = ()):
        self.names: tuple[str, ...] = tuple(tensors)
        shapes = [np.shape(tensors[n]) for n in self.names]
        sizes = [int(np.prod(s, dtype=np.int64)) for s in shapes]
        offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self.flat = np.empty(int(offsets[-1]), dtype=np.float64)
        self.layout: dict[str, tuple[int, tuple[int, ...]]] = {}
        for name, shape, start, stop in zip(self.names, shapes, offsets[:-1], offsets[1:]):
            self.layout[name] = (int(start), tuple(shape))
            self.flat[start:stop] = np.asarray(tensors[name], dtype=np.float64).ravel()
        self.frozen = frozenset(frozen)
        unknown = self.frozen - set(self.names)
        if unknown:
            raise KeyError(f"cannot freeze unknown tensors {sorted(unknown)}")

    def __getitem__(self, name: str) -> np.ndarray:
        start, shape = self.layout[name]
        size = int(np.prod(shape, dtype=np.int64))
        return self.flat[start:start + size].reshape(shape)

    def __iter__(self):
        return iter(self.names)

    def __len__(self) -> int:
        return len(self.names)

    def items(self):
        return ((n, self[n]) for n in self.names)

    @property
    def size(self) -> int:
        return self.flat.size

    def span(self, name: str) -> slice:
        start, shape = self.layout[name]
        return slice(start, start + int(np.prod(shape, dtype=np.int64)))

    def trainable_mask(self) -> np.ndarray:
        mask = np.ones(self.size, dtype=bool)
        for name in self.frozen:
            mask[self.span(name)] = False
        return mask

    @property
    def trainable_count(self) -> int:
        return int(self.trainable_mask().sum())

    def copy(self) -> ModelParams:
        out = ModelParams.__new__(ModelParams)
        out.names = self.names
        out.layout = self.layout
        out.flat = self.flat.copy()
        out.frozen = self.frozen
        return out

    def with_flat(self, flat: np.ndarray) -> ModelParams:
        if flat.shape != self.flat.shape:
            raise ValueError(f"flat vector has shape {flat.shape}, expected {self.flat.shape}")
        out = self.copy()
        out.flat[:] = flat
        return out

    def with_frozen(self, frozen: Iterable[str]) -> ModelParams:
        out = self.copy()
        out.frozen = frozenset(frozen)
        unknown = out.frozen - set(self.names)
        if unknown:
            raise KeyError(f"cannot freeze unknown tensors {sorted(unknown)}")
        return out

    def flatten_grads(self, grads) -> np.ndarray:
        """Accept either a flat vector or a name->array mapping."""
        if isinstance(grads, np.ndarray):
            if grads.shape != self.flat.shape:
                raise ValueError(f"gradient has shape {grads.shape}, expected {self.flat.shape}")
            return grads
        flat = np.zeros_like(self.flat)
        for name, g in grads.items():
            start, shape = self.layout[name]
            if np.shape(g) != shape:
                raise ValueError(f"gradient for {name} has shape {np.shape(g)}, expected {shape}")
            flat[self.span(name)] = np.ravel(g)
        return flat

    def same_layout(self, other: ModelParams) -> bool:
        return self.names == other.names and self.layout == other.layout
