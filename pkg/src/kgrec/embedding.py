"""Per-relation block widths, the concatenated layout, and trainable tables.

Block width grows linearly with the relation's edge count between d_min and
d_max, saturating once the count reaches c. Every entity has one embedding
per directed relation (its "attribute space"); user vectors live in the full
concatenated width D. Checkpoints are a single binary file with a fixed
header and little-endian float64 payload, round-tripping bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_MAGIC = b"KGRC"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Raised on corrupt or incompatible checkpoint files."""


@dataclass(frozen=True)
class DimensionSchedule:
    d_min: int
    d_max: int
    c: int

    def __post_init__(self):
        if self.d_min < 1 or self.c < 1:
            raise ValueError("d_min and c must be >= 1")
        if self.d_max < self.d_min:
            raise ValueError("d_max must be >= d_min")


def compute_dims(edge_counts, schedule: DimensionSchedule) -> np.ndarray:
    """Per-relation block width: linear ramp from d_min to d_max over [0, c].

    d = round(min(d_max, d_min + (d_max - d_min) * count / c)), then clamped.
    Counts at or beyond c saturate at d_max; a zero count gives d_min.
    """
    counts = np.asarray(edge_counts, dtype=np.float64)
    if np.any(counts < 0):
        raise ValueError("edge counts must be non-negative")
    ramp = schedule.d_min + (schedule.d_max - schedule.d_min) * counts / schedule.c
    d = np.floor(np.minimum(ramp, schedule.d_max) + 0.5)
    return np.clip(d, schedule.d_min, schedule.d_max).astype(np.int64)


@dataclass(frozen=True)
class AttributeLayout:
    """Element layout of the concatenated representation.

    ``offsets[m]`` is the start index of relation m's block, block m spans
    ``[offsets[m], offsets[m] + dims[m])``, and ``width`` is the total D.
    """

    dims: np.ndarray
    offsets: np.ndarray = field(repr=False)
    width: int

    @property
    def n_relations(self) -> int:
        return len(self.dims)

    def block(self, m: int) -> slice:
        if not (0 <= m < len(self.dims)):
            raise IndexError(f"relation id {m} out of range [0, {len(self.dims)})")
        return slice(int(self.offsets[m]), int(self.offsets[m] + self.dims[m]))

    def slice(self, vec: np.ndarray, m: int) -> np.ndarray:
        """Writable view of block m along the last axis of ``vec``."""
        if vec.shape[-1] != self.width:
            raise ValueError(f"expected last axis {self.width}, got {vec.shape[-1]}")
        return vec[..., self.block(m)]


def build_layout(dims) -> AttributeLayout:
    dims = np.asarray(dims, dtype=np.int64)
    if np.any(dims < 1):
        raise ValueError("all block widths must be >= 1")
    offsets = np.concatenate([[0], np.cumsum(dims)[:-1]])
    return AttributeLayout(dims=dims, offsets=offsets, width=int(dims.sum()))


@dataclass
class ParameterStore:
    """All trainable tables: per-relation entity blocks plus user vectors.

    ``entity[m]`` is an (n_entities, dims[m]) table; ``user`` is
    (n_users, user_width). In concat mode user_width equals the layout
    width D; the elementwise ablations use a single uniform width.
    """

    layout: AttributeLayout
    entity: list[np.ndarray] = field(repr=False)
    user: np.ndarray = field(repr=False)

    @property
    def n_entities(self) -> int:
        return self.entity[0].shape[0] if self.entity else 0

    @property
    def n_users(self) -> int:
        return self.user.shape[0]

    def all_finite(self) -> bool:
        return all(np.isfinite(t).all() for t in self.entity) and bool(
            np.isfinite(self.user).all()
        )

    def copy(self) -> "ParameterStore":
        return ParameterStore(
            layout=self.layout,
            entity=[t.copy() for t in self.entity],
            user=self.user.copy(),
        )

    def squared_norm(self) -> float:
        return float(sum((t * t).sum() for t in self.entity) + (self.user * self.user).sum())


def init_params(
    layout: AttributeLayout,
    entity_count: int,
    user_count: int,
    seed: int,
    user_width: int | None = None,
) -> ParameterStore:
    """Xavier/Glorot uniform init, deterministic under the seed.

    Embedding tables have no natural fan pair, so fan_in = fan_out = the
    block width, giving bound sqrt(6 / (2 d)) = sqrt(3 / d) per block.
    """
    rng = np.random.default_rng(seed)
    entity = []
    for d in layout.dims:
        bound = np.sqrt(3.0 / d)
        entity.append(rng.uniform(-bound, bound, size=(entity_count, int(d))))
    uw = layout.width if user_width is None else user_width
    ubound = np.sqrt(3.0 / uw)
    user = rng.uniform(-ubound, ubound, size=(user_count, uw))
    return ParameterStore(layout=layout, entity=entity, user=user)


def save_checkpoint(path, params: ParameterStore) -> None:
    """Header: magic, version, n_entities, n_users, user_width, n_relations,
    dims array; then float64 little-endian entity blocks in relation order,
    then user vectors."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(
            struct.pack(
                "<IQQQQ",
                CHECKPOINT_VERSION,
                params.n_entities,
                params.n_users,
                params.user.shape[1],
                params.layout.n_relations,
            )
        )
        fh.write(np.asarray(params.layout.dims, dtype="<i8").tobytes())
        for t in params.entity:
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(params.user, dtype="<f8").tobytes())


def load_checkpoint(path) -> ParameterStore:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r} in {path}")
        header = fh.read(struct.calcsize("<IQQQQ"))
        version, n_e, n_u, user_width, n_r = struct.unpack("<IQQQQ", header)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        dims = np.frombuffer(fh.read(8 * n_r), dtype="<i8").copy()
        layout = build_layout(dims)
        entity = []
        for d in dims:
            buf = fh.read(8 * n_e * int(d))
            if len(buf) != 8 * n_e * int(d):
                raise CheckpointError(f"truncated checkpoint {path}")
            entity.append(np.frombuffer(buf, dtype="<f8").reshape(n_e, int(d)).copy())
        buf = fh.read(8 * n_u * user_width)
        if len(buf) != 8 * n_u * user_width:
            raise CheckpointError(f"truncated checkpoint {path}")
        user = np.frombuffer(buf, dtype="<f8").reshape(n_u, user_width).copy()
        if fh.read(1):
            raise CheckpointError(f"trailing bytes in checkpoint {path}")
    return ParameterStore(layout=layout, entity=entity, user=user)
