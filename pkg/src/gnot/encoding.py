"""General input-encoding protocol for heterogeneous conditional inputs.

A sample can carry several input functions of different kinds: a global
parameter vector, a boundary point set, a function sampled over the domain,
per-point extra features, or mesh edges.  Each kind reduces to a sequence of
flat feature rows, and every input slot gets its own dedicated MLP (no
parameter sharing between slots) mapping its rows to an embedding sequence.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import Tensor


def _as_2d(name, a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1:
        raise ContractError(f"{name} must be a non-empty 2-d array, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class ParamVector:
    """Global parameter vector; encodes to a single embedding row."""

    values: np.ndarray

    KIND = "param_vector"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if v.size < 1:
            raise ContractError("parameter vector must have at least one entry")
        object.__setattr__(self, "values", v)

    def feature_rows(self):
        return self.values[np.newaxis, :]


@dataclass(frozen=True)
class BoundaryShape:
    """Boundary described by its point coordinates alone."""

    points: np.ndarray

    KIND = "boundary_shape"

    def __post_init__(self):
        object.__setattr__(self, "points", _as_2d("boundary points", self.points))

    def feature_rows(self):
        return self.points


@dataclass(frozen=True)
class DistributedFunction:
    """Function sampled on domain points: rows are (coords, values)."""

    points: np.ndarray
    values: np.ndarray

    KIND = "distributed_function"

    def __post_init__(self):
        pts = _as_2d("function points", self.points)
        vals = _as_2d("function values", self.values)
        if vals.shape[0] != pts.shape[0]:
            raise ContractError(
                f"point/value counts disagree: {pts.shape[0]} vs {vals.shape[0]}"
            )
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "values", vals)

    def feature_rows(self):
        return np.concatenate([self.points, self.values], axis=1)


@dataclass(frozen=True)
class ExtraFeatures:
    """Auxiliary per-point features (e.g. subdomain indicators)."""

    points: np.ndarray
    features: np.ndarray

    KIND = "extra_features"

    def __post_init__(self):
        pts = _as_2d("feature points", self.points)
        feats = _as_2d("extra features", self.features)
        if feats.shape[0] != pts.shape[0]:
            raise ContractError(
                f"point/feature counts disagree: {pts.shape[0]} vs {feats.shape[0]}"
            )
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "features", feats)

    def feature_rows(self):
        return np.concatenate([self.points, self.features], axis=1)


@dataclass(frozen=True)
class Edges:
    """Mesh connectivity; each row is (src coords, dst coords, edge features)."""

    src: np.ndarray
    dst: np.ndarray
    features: np.ndarray

    KIND = "edges"

    def __post_init__(self):
        src = _as_2d("edge sources", self.src)
        dst = _as_2d("edge destinations", self.dst)
        feats = _as_2d("edge features", self.features)
        if not (src.shape[0] == dst.shape[0] == feats.shape[0]):
            raise ContractError("edge arrays must have equal row counts")
        if src.shape[1] != dst.shape[1]:
            raise ContractError("edge endpoints must share the coordinate dimension")
        object.__setattr__(self, "src", src)
        object.__setattr__(self, "dst", dst)
        object.__setattr__(self, "features", feats)

    def feature_rows(self):
        return np.concatenate([self.src, self.dst, self.features], axis=1)


INPUT_KINDS = {
    cls.KIND: cls
    for cls in (ParamVector, BoundaryShape, DistributedFunction, ExtraFeatures, Edges)
}


@dataclass(frozen=True)
class SlotSpec:
    """Dataset-wide description of one input slot.

    `channels` is the kind-specific non-coordinate width: vector length for
    param_vector, value channels for distributed_function, feature width for
    extra_features/edges, and 0 for boundary_shape.
    """

    kind: str
    channels: int = 0

    def __post_init__(self):
        if self.kind not in INPUT_KINDS:
            raise ConfigError(f"unknown input kind '{self.kind}'")

    def row_width(self, coord_dim):
        if self.kind == "param_vector":
            return self.channels
        if self.kind == "boundary_shape":
            return coord_dim
        if self.kind == "edges":
            return 2 * coord_dim + self.channels
        return coord_dim + self.channels  # distributed_function, extra_features


def spec_of(inp, coord_dim):
    """Derive the SlotSpec an input instance conforms to."""
    if isinstance(inp, ParamVector):
        return SlotSpec("param_vector", inp.values.size)
    if isinstance(inp, BoundaryShape):
        return SlotSpec("boundary_shape")
    if isinstance(inp, DistributedFunction):
        return SlotSpec("distributed_function", inp.values.shape[1])
    if isinstance(inp, ExtraFeatures):
        return SlotSpec("extra_features", inp.features.shape[1])
    if isinstance(inp, Edges):
        return SlotSpec("edges", inp.features.shape[1])
    raise ConfigError(f"not an input kind: {type(inp).__name__}")


@dataclass
class ConditionalEmbedding:
    """Encoded sequence for one input slot, with an optional validity mask."""

    Y: Tensor
    mask: np.ndarray | None = None


def encode_queries(points, mlp):
    """Map query coordinates [N, d] pointwise to embeddings [N, n_e]."""
    points = _as_2d("query points", points)
    if points.shape[1] != mlp.in_width:
        raise ConfigError(
            f"query encoder expects width {mlp.in_width}, got points of width {points.shape[1]}"
        )
    return mlp(Tensor(points))


def encode_input(inp, mlp):
    """Encode one input function through its slot's dedicated MLP."""
    rows = inp.feature_rows()
    if rows.shape[1] != mlp.in_width:
        raise ConfigError(
            f"slot encoder expects width {mlp.in_width}, got rows of width {rows.shape[1]}"
        )
    return ConditionalEmbedding(Y=mlp(Tensor(rows)))
