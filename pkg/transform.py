"""Invertible latent transforms and per-step transform schedules.

Latents are ``(H, W, C)`` grids. Rotations are clockwise quarter-turns in
the (H, W) plane; channels are never mixed. Every transform here is
invertible, and all kinds except ``value-jitter`` only move entries around.
"""
import hashlib
import json
import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Sequence, Tuple, Union

import numpy as np

from utils.rng import Substream

logger = logging.getLogger(__name__)

KINDS = ("identity", "rotate", "flip-h", "flip-v", "patch-shuffle", "value-jitter")


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    k: int = 0
    patch_size: int = 0
    perm: Tuple[int, ...] = ()
    scale: float = 1.0
    shift: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"Unknown transform kind {self.kind!r}")
        if self.kind == "rotate" and self.k not in (1, 2, 3):
            raise ValueError(f"rotate needs k in {{1, 2, 3}}, got {self.k}")
        if self.kind == "patch-shuffle":
            perm = tuple(int(i) for i in self.perm)
            object.__setattr__(self, "perm", perm)
            if self.patch_size < 1:
                raise ValueError(f"patch_size must be positive, got {self.patch_size}")
            if sorted(perm) != list(range(len(perm))):
                raise ValueError("patch-shuffle permutation is not a bijection")
        if self.kind == "value-jitter" and not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"value-jitter scale must be positive, got {self.scale}")

    @property
    def value_preserving(self) -> bool:
        return self.kind != "value-jitter"

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {"kind": self.kind}
        if self.kind == "rotate":
            out["k"] = self.k
        elif self.kind == "patch-shuffle":
            out["patch_size"] = self.patch_size
            out["perm"] = list(self.perm)
        elif self.kind == "value-jitter":
            out["scale"] = float(self.scale)
            out["shift"] = float(self.shift)
        return out

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TransformSpec":
        return cls(
            kind=data["kind"],
            k=int(data.get("k", 0)),
            patch_size=int(data.get("patch_size", 0)),
            perm=tuple(data.get("perm", ())),
            scale=float(data.get("scale", 1.0)),
            shift=float(data.get("shift", 0.0)),
        )

    def __str__(self) -> str:
        if self.kind == "rotate":
            return f"rotate({self.k})"
        if self.kind == "patch-shuffle":
            return f"patch-shuffle({self.patch_size})"
        if self.kind == "value-jitter":
            return f"value-jitter({self.scale:.4g},{self.shift:.4g})"
        return self.kind


IDENTITY = TransformSpec("identity")


def rotation(k: int) -> TransformSpec:
    k %= 4
    return IDENTITY if k == 0 else TransformSpec("rotate", k=k)


def _patch_grid(spec: TransformSpec, shape: Tuple[int, ...]) -> Tuple[int, int]:
    h, w = shape[0], shape[1]
    p = spec.patch_size
    if h % p or w % p:
        raise ValueError(f"patch_size {p} does not divide grid {h}x{w}")
    gh, gw = h // p, w // p
    if len(spec.perm) != gh * gw:
        raise ValueError(f"permutation covers {len(spec.perm)} patches, grid has {gh * gw}")
    return gh, gw


def check_compatible(spec: TransformSpec, shape: Tuple[int, ...]) -> None:
    """Raise ValueError if `spec` cannot act on a grid of this shape."""
    if len(shape) != 3:
        raise ValueError(f"latents are (H, W, C) grids, got shape {shape}")
    if spec.kind == "rotate" and shape[0] != shape[1]:
        raise ValueError(f"rotate needs a square grid, got {shape[0]}x{shape[1]}")
    if spec.kind == "patch-shuffle":
        _patch_grid(spec, shape)


def apply(spec: TransformSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    check_compatible(spec, x.shape)
    if spec.kind == "identity":
        return x.copy()
    if spec.kind == "rotate":
        # negative k turns clockwise
        return np.ascontiguousarray(np.rot90(x, k=-spec.k, axes=(0, 1)))
    if spec.kind == "flip-h":
        return np.ascontiguousarray(x[:, ::-1, :])
    if spec.kind == "flip-v":
        return np.ascontiguousarray(x[::-1, :, :])
    if spec.kind == "patch-shuffle":
        gh, gw = _patch_grid(spec, x.shape)
        p = spec.patch_size
        c = x.shape[2]
        patches = x.reshape(gh, p, gw, p, c).transpose(0, 2, 1, 3, 4).reshape(gh * gw, p, p, c)
        shuffled = patches[np.asarray(spec.perm)]
        return np.ascontiguousarray(
            shuffled.reshape(gh, gw, p, p, c).transpose(0, 2, 1, 3, 4).reshape(x.shape)
        )
    return x * spec.scale + spec.shift


def invert(spec: TransformSpec) -> TransformSpec:
    if spec.kind == "rotate":
        return rotation(4 - spec.k)
    if spec.kind == "patch-shuffle":
        return TransformSpec("patch-shuffle", patch_size=spec.patch_size,
                             perm=tuple(int(i) for i in np.argsort(spec.perm)))
    if spec.kind == "value-jitter":
        return TransformSpec("value-jitter", scale=1.0 / spec.scale, shift=-spec.shift / spec.scale)
    return spec


def compose(a: TransformSpec, b: TransformSpec) -> TransformSpec:
    """The transform equal to applying `b` first, then `a` (quarter-turns only)."""
    for s in (a, b):
        if s.kind not in ("identity", "rotate"):
            raise ValueError(f"compose supports identity and rotate, got {s.kind}")
    return rotation(a.k + b.k)


# --- Schedules -------------------------------------------------------------

GENERATOR_KINDS = ("fixed", "rotate-any", "flip-any", "patch-shuffle", "value-jitter")


@dataclass(frozen=True)
class TransformGenerator:
    """One entry of a sampling pool.

    ``fixed`` always yields `spec`; the others draw their parameters from the
    step's substream.
    """
    kind: str
    spec: TransformSpec = IDENTITY
    patch_size: int = 0
    num_patches: int = 0
    scale_range: Tuple[float, float] = (0.9, 1.1)
    shift_range: Tuple[float, float] = (-0.05, 0.05)

    def __post_init__(self):
        if self.kind not in GENERATOR_KINDS:
            raise ValueError(f"Unknown generator kind {self.kind!r}")
        if self.kind == "patch-shuffle" and (self.patch_size < 1 or self.num_patches < 1):
            raise ValueError("patch-shuffle generator needs patch_size and num_patches")
        if self.kind == "value-jitter" and self.scale_range[0] <= 0:
            raise ValueError("value-jitter scales must be positive")

    def draw(self, stream: Substream) -> TransformSpec:
        if self.kind == "fixed":
            return self.spec
        if self.kind == "rotate-any":
            return rotation(stream.randbelow(4))
        if self.kind == "flip-any":
            return TransformSpec("flip-h") if stream.randbelow(2) == 0 else TransformSpec("flip-v")
        if self.kind == "patch-shuffle":
            perm = stream.permutation(self.num_patches)
            return TransformSpec("patch-shuffle", patch_size=self.patch_size, perm=tuple(perm))
        scale = stream.uniform(low=self.scale_range[0], high=self.scale_range[1])
        shift = stream.uniform(low=self.shift_range[0], high=self.shift_range[1])
        return TransformSpec("value-jitter", scale=scale, shift=shift)

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {"kind": self.kind}
        if self.kind == "fixed":
            out["spec"] = self.spec.to_dict()
        elif self.kind == "patch-shuffle":
            out["patch_size"] = self.patch_size
            out["num_patches"] = self.num_patches
        elif self.kind == "value-jitter":
            out["scale_range"] = list(self.scale_range)
            out["shift_range"] = list(self.shift_range)
        return out

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TransformGenerator":
        return cls(
            kind=data["kind"],
            spec=TransformSpec.from_dict(data["spec"]) if "spec" in data else IDENTITY,
            patch_size=int(data.get("patch_size", 0)),
            num_patches=int(data.get("num_patches", 0)),
            scale_range=tuple(data.get("scale_range", (0.9, 1.1))),
            shift_range=tuple(data.get("shift_range", (-0.05, 0.05))),
        )


@dataclass(frozen=True)
class TransformPool:
    name: str
    generators: Tuple[TransformGenerator, ...]

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "generators": [g.to_dict() for g in self.generators]}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TransformPool":
        return cls(name=data["name"],
                   generators=tuple(TransformGenerator.from_dict(g) for g in data["generators"]))


POOL_NAMES = ("identity", "rotation", "flip", "patch-shuffle", "value-jitter", "combination")


def named_pool(name: str, grid: Sequence[int], patch_size: int = 4) -> TransformPool:
    """Build one of the documented pools for a grid of shape (H, W, C)."""
    h, w = int(grid[0]), int(grid[1])

    def shuffle_gen() -> TransformGenerator:
        if h % patch_size or w % patch_size:
            raise ValueError(f"patch_size {patch_size} does not divide grid {h}x{w}")
        return TransformGenerator("patch-shuffle", patch_size=patch_size,
                                  num_patches=(h // patch_size) * (w // patch_size))

    if name in ("rotation", "combination") and h != w:
        raise ValueError(f"pool {name!r} rotates latents and needs H == W, got {h}x{w}")
    if name == "identity":
        gens = [TransformGenerator("fixed")]
    elif name == "rotation":
        gens = [TransformGenerator("fixed", spec=rotation(k)) for k in range(4)]
    elif name == "flip":
        gens = [TransformGenerator("fixed"),
                TransformGenerator("fixed", spec=TransformSpec("flip-h")),
                TransformGenerator("fixed", spec=TransformSpec("flip-v"))]
    elif name == "patch-shuffle":
        gens = [shuffle_gen()]
    elif name == "value-jitter":
        gens = [TransformGenerator("value-jitter")]
    elif name == "combination":
        gens = [TransformGenerator("rotate-any"), TransformGenerator("flip-any"),
                shuffle_gen(), TransformGenerator("value-jitter")]
    else:
        raise ValueError(f"Unknown pool {name!r}; expected one of {POOL_NAMES}")
    return TransformPool(name=name, generators=tuple(gens))


@dataclass(frozen=True)
class TransformSchedule:
    specs: Tuple[TransformSpec, ...]
    pool: TransformPool
    seed: int

    def __len__(self) -> int:
        return len(self.specs)

    def __getitem__(self, t: int) -> TransformSpec:
        return self.specs[t]

    def to_records(self) -> List[Dict[str, Any]]:
        return [{"step": t, "spec": s.to_dict()} for t, s in enumerate(self.specs)]

    @classmethod
    def from_records(cls, records: List[Dict[str, Any]], pool: TransformPool, seed: int) -> "TransformSchedule":
        ordered = sorted(records, key=lambda r: r["step"])
        if [r["step"] for r in ordered] != list(range(len(ordered))):
            raise ValueError("schedule records must cover steps 0..T-1 exactly once")
        return cls(specs=tuple(TransformSpec.from_dict(r["spec"]) for r in ordered),
                   pool=pool, seed=int(seed))

    def digest(self) -> str:
        payload = json.dumps(
            {"pool": self.pool.to_dict(), "seed": self.seed, "steps": self.to_records()},
            sort_keys=True, separators=(",", ":"),
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def sample_schedule(pool: Union[TransformPool, Sequence[TransformGenerator]], T: int,
                    seed: int) -> TransformSchedule:
    """Draw one spec per step, uniformly over the pool, from substream (seed, t)."""
    if not isinstance(pool, TransformPool):
        pool = TransformPool(name="custom", generators=tuple(pool))
    if not pool.generators:
        raise ValueError("transform pool is empty")
    if T < 1:
        raise ValueError(f"schedule length must be at least 1, got {T}")
    specs = []
    for t in range(T):
        stream = Substream(seed, "transform-schedule", t)
        gen = pool.generators[stream.randbelow(len(pool.generators))]
        specs.append(gen.draw(stream))
    logger.debug("sampled %d-step schedule from pool %s (seed=%d)", T, pool.name, seed)
    return TransformSchedule(specs=tuple(specs), pool=pool, seed=int(seed))
