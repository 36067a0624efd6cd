"""Input validation helpers shared by the simulation and estimator layers."""

from __future__ import annotations

import numbers

import numpy as np

SeedLike = int | np.random.SeedSequence | np.random.Generator | None


def as_generator(seed: SeedLike) -> np.random.Generator:
    """Turn an int, SeedSequence or Generator into a numpy Generator.

    Generators are passed through untouched so callers can thread one stream
    through several calls. ``None`` is rejected: every run must be seeded.
    """
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    if isinstance(seed, numbers.Integral):
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))
    raise TypeError(f"explicit seed required, got {seed!r}")


def child_seed(root, *key: int) -> np.random.SeedSequence:
    """Independent stream addressed by ``key`` under ``root``.

    Streams are keyed rather than spawned sequentially, so the stream used by
    episode ``k`` does not depend on how many other episodes ran before it.
    ``root`` may itself be a keyed SeedSequence; keys then nest.
    """
    key = tuple(int(k) for k in key)
    if isinstance(root, np.random.SeedSequence):
        return np.random.SeedSequence(root.entropy, spawn_key=tuple(root.spawn_key) + key)
    if not isinstance(root, numbers.Integral):
        raise TypeError(f"explicit seed required, got {root!r}")
    return np.random.SeedSequence(int(root), spawn_key=key)


def check_positions(x, half_width: float | None = None, *, name: str = "positions") -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1 and arr.shape[0] == 2:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"{name} must have shape (n, 2), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if half_width is not None and np.any(np.abs(arr) > half_width):
        raise ValueError(f"{name} outside the box [-{half_width}, {half_width}]^2")
    return arr


def check_probability_vector(p, *, atol: float = 1e-9, name: str = "weights") -> np.ndarray:
    arr = np.asarray(p, dtype=float).ravel()
    if arr.size == 0:
        raise ValueError(f"{name} is empty")
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite and non-negative")
    if abs(arr.sum() - 1.0) > atol:
        raise ValueError(f"{name} must sum to 1 (got {arr.sum():.12g})")
    return arr


def check_positive(value: float, name: str, *, allow_zero: bool = False) -> float:
    value = float(value)
    if not np.isfinite(value) or value < 0 or (value == 0 and not allow_zero):
        bound = ">= 0" if allow_zero else "> 0"
        raise ValueError(f"{name} must be {bound}, got {value}")
    return value
