"""Datasets of irregular point-cloud operator samples.

A sample pairs a query point set with target values and an ordered list of
heterogeneous inputs.  Files are line-delimited JSON: line 1 is a header
record fixing the dataset-wide shape contract (coordinate dimension, output
channels, slot kinds); every further line is one sample.  Floats survive a
save/load round trip exactly (shortest-representation printing).

Two synthetic generators make desk-scale verification self-contained; both
validate every generated target against an independent oracle at generation
time.
"""

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .encoding import (
    INPUT_KINDS,
    BoundaryShape,
    DistributedFunction,
    Edges,
    ExtraFeatures,
    ParamVector,
    SlotSpec,
    spec_of,
)
from .errors import ContractError, DatasetError

FORMAT_VERSION = 1


@dataclass
class Sample:
    query_points: np.ndarray  # [N', d]
    targets: np.ndarray       # [N', out_dim]
    inputs: list = field(default_factory=list)

    def __post_init__(self):
        self.query_points = np.asarray(self.query_points, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.query_points.ndim != 2 or self.query_points.shape[0] < 1:
            raise ContractError(f"query_points must be [N,d], got {self.query_points.shape}")
        if self.targets.shape != (self.query_points.shape[0], self.targets.shape[1]):
            raise ContractError(
                f"targets {self.targets.shape} do not match query count "
                f"{self.query_points.shape[0]}"
            )

    @property
    def n_queries(self):
        return self.query_points.shape[0]


@dataclass
class DatasetMeta:
    coord_dim: int
    out_dim: int
    slots: list  # of SlotSpec

    @property
    def num_slots(self):
        return len(self.slots)


@dataclass
class Dataset:
    meta: DatasetMeta
    samples: list

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)


def _check_sample(meta, sample, where):
    if sample.query_points.shape[1] != meta.coord_dim:
        raise DatasetError(f"{where}: query_points coordinate dim "
                           f"{sample.query_points.shape[1]} != header d {meta.coord_dim}")
    if sample.targets.shape[1] != meta.out_dim:
        raise DatasetError(f"{where}: targets out_dim {sample.targets.shape[1]} "
                           f"!= header out_dim {meta.out_dim}")
    if len(sample.inputs) != meta.num_slots:
        raise DatasetError(f"{where}: {len(sample.inputs)} inputs != header L {meta.num_slots}")
    for l, (inp, slot) in enumerate(zip(sample.inputs, meta.slots)):
        got = spec_of(inp, meta.coord_dim)
        if got != slot:
            raise DatasetError(f"{where}: input slot {l} is {got}, header says {slot}")


def make_dataset(samples):
    """Build a Dataset, deriving the shape contract from the first sample."""
    if not samples:
        raise DatasetError("no samples")
    first = samples[0]
    meta = DatasetMeta(
        coord_dim=first.query_points.shape[1],
        out_dim=first.targets.shape[1],
        slots=[spec_of(inp, first.query_points.shape[1]) for inp in first.inputs],
    )
    for i, s in enumerate(samples):
        _check_sample(meta, s, f"sample {i}")
    return Dataset(meta=meta, samples=list(samples))


# ---------------------------------------------------------------------------
# file format


def _input_to_record(inp):
    if isinstance(inp, ParamVector):
        return {"kind": inp.KIND, "values": inp.values.tolist()}
    if isinstance(inp, BoundaryShape):
        return {"kind": inp.KIND, "points": inp.points.tolist()}
    if isinstance(inp, DistributedFunction):
        return {"kind": inp.KIND, "points": inp.points.tolist(), "values": inp.values.tolist()}
    if isinstance(inp, ExtraFeatures):
        return {"kind": inp.KIND, "points": inp.points.tolist(), "features": inp.features.tolist()}
    if isinstance(inp, Edges):
        return {"kind": inp.KIND, "src": inp.src.tolist(), "dst": inp.dst.tolist(),
                "features": inp.features.tolist()}
    raise DatasetError(f"cannot serialize input of type {type(inp).__name__}")


def _input_from_record(rec):
    kind = rec.get("kind")
    if kind not in INPUT_KINDS:
        raise KeyError(f"unknown input kind '{kind}'")
    fields = {k: v for k, v in rec.items() if k != "kind"}
    return INPUT_KINDS[kind](**fields)


def save_dataset(dataset, path):
    meta = dataset.meta
    header = {
        "version": FORMAT_VERSION,
        "d": meta.coord_dim,
        "out_dim": meta.out_dim,
        "L": meta.num_slots,
        "slots": [{"kind": s.kind, "channels": s.channels} for s in meta.slots],
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for sample in dataset.samples:
            rec = {
                "query_points": sample.query_points.tolist(),
                "targets": sample.targets.tolist(),
                "inputs": [_input_to_record(inp) for inp in sample.inputs],
            }
            fh.write(json.dumps(rec) + "\n")


def load_dataset(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    lines = [ln for ln in lines if ln.strip()]
    if not lines:
        raise DatasetError(f"{path}: no samples")
    try:
        header = json.loads(lines[0])
        if header.get("version") != FORMAT_VERSION:
            raise DatasetError(f"line 1: unsupported format version {header.get('version')}")
        meta = DatasetMeta(
            coord_dim=int(header["d"]),
            out_dim=int(header["out_dim"]),
            slots=[SlotSpec(s["kind"], int(s.get("channels", 0))) for s in header["slots"]],
        )
        if int(header["L"]) != meta.num_slots:
            raise DatasetError(f"line 1: header L {header['L']} != slot count {meta.num_slots}")
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        if isinstance(exc, DatasetError):
            raise
        raise DatasetError(f"line 1: malformed header ({exc})") from exc

    samples = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            sample = Sample(
                query_points=np.asarray(rec["query_points"], dtype=np.float64),
                targets=np.asarray(rec["targets"], dtype=np.float64),
                inputs=[_input_from_record(r) for r in rec["inputs"]],
            )
        except (KeyError, TypeError, ValueError, json.JSONDecodeError, ContractError) as exc:
            raise DatasetError(f"line {lineno}: {exc}") from exc
        _check_sample(meta, sample, f"line {lineno}")
        samples.append(sample)
    if not samples:
        raise DatasetError(f"{path}: no samples")
    return Dataset(meta=meta, samples=samples)


# ---------------------------------------------------------------------------
# synthetic generators


def _sine_series(coeffs, x):
    k = np.arange(1, coeffs.size + 1)
    return np.sin(np.pi * np.outer(x, k)) @ coeffs


def _sine_series_integral(coeffs, y):
    # closed form: integral_0^y sum_k c_k sin(k pi x) dx
    k = np.arange(1, coeffs.size + 1)
    return ((1.0 - np.cos(np.pi * np.outer(y, k))) / (np.pi * k)) @ coeffs


def integrate_series_gauss(coeffs, ys, order=64):
    """Independent quadrature oracle: fixed-order Gauss-Legendre on [0, y]."""
    nodes, weights = np.polynomial.legendre.leggauss(order)
    ys = np.asarray(ys, dtype=np.float64)
    t = 0.5 * ys[:, None] * (nodes[None, :] + 1.0)          # [N, order]
    w = 0.5 * ys[:, None] * weights[None, :]
    k = np.arange(1, coeffs.size + 1)
    a_vals = np.sin(np.pi * t[:, :, None] * k) @ coeffs     # [N, order]
    return (a_vals * w).sum(axis=1)


def gen_antiderivative(n_samples, n_points, k_max=4, seed=0, validate=True):
    """Antiderivative operator: a(x) = sum c_k sin(k pi x) -> u(y) = int_0^y a.

    Coefficients c_k ~ U[-1,1]/k.  The input slot is the function sampled on
    its own random mesh; queries are independent random points in [0,1].
    """
    if n_points < 2:
        raise ContractError(f"n_points must be >= 2, got {n_points}")
    if k_max < 1:
        raise ContractError(f"k_max must be >= 1, got {k_max}")
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n_samples):
        coeffs = rng.uniform(-1.0, 1.0, k_max) / np.arange(1, k_max + 1)
        xs = rng.uniform(0.0, 1.0, n_points)
        ys = rng.uniform(0.0, 1.0, n_points)
        a_vals = _sine_series(coeffs, xs)
        u_vals = _sine_series_integral(coeffs, ys)
        if validate:
            ref = integrate_series_gauss(coeffs, ys)
            err = np.max(np.abs(u_vals - ref))
            if err > 1e-10:
                raise ContractError(f"generator self-check failed: quadrature mismatch {err:.3e}")
        samples.append(Sample(
            query_points=ys[:, None],
            targets=u_vals[:, None],
            inputs=[DistributedFunction(points=xs[:, None], values=a_vals[:, None])],
        ))
    return make_dataset(samples)


def multiscale_target(x, amplitude, frequency):
    """u(x) = sin(2 pi x) on [0, 0.5), amplitude * sin(frequency 2 pi x) on [0.5, 1].

    Piecewise by construction; no continuity at the interface.
    """
    x = np.asarray(x, dtype=np.float64)
    return np.where(
        x < 0.5,
        np.sin(2.0 * np.pi * x),
        amplitude * np.sin(frequency * 2.0 * np.pi * x),
    )


def gen_multiscale(n_samples, n_points, seed=0, validate=True):
    """Two-subdomain task with per-sample (amplitude, frequency) parameters.

    Slot 0 is the ParamVector (A, omega) with A ~ U[0.05,0.2] and
    omega ~ U[16,32]; slot 1 is a BoundaryShape marking the interface point.
    """
    if n_points < 4:
        raise ContractError(f"n_points must be >= 4, got {n_points}")
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n_samples):
        amplitude = rng.uniform(0.05, 0.2)
        frequency = rng.uniform(16.0, 32.0)
        xs = rng.uniform(0.0, 1.0, n_points)
        u_vals = multiscale_target(xs, amplitude, frequency)
        if validate:
            # independent route: masked piecewise assembly instead of where()
            left = xs < 0.5
            ref = np.empty_like(xs)
            ref[left] = np.sin(2.0 * np.pi * xs[left])
            ref[~left] = amplitude * np.sin(frequency * 2.0 * np.pi * xs[~left])
            if np.max(np.abs(u_vals - ref)) > 1e-12:
                raise ContractError("generator self-check failed: piecewise formula mismatch")
        samples.append(Sample(
            query_points=xs[:, None],
            targets=u_vals[:, None],
            inputs=[
                ParamVector(values=np.array([amplitude, frequency])),
                BoundaryShape(points=np.array([[0.5]])),
            ],
        ))
    return make_dataset(samples)


GENERATORS = {
    "antiderivative": gen_antiderivative,
    "multiscale": gen_multiscale,
}


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    queries: np.ndarray       # [B, Nmax, d] zero-padded
    targets: np.ndarray       # [B, Nmax, out_dim]
    query_mask: np.ndarray    # [B, Nmax] bool
    slot_rows: list           # per slot: [B, Mmax_l, w_l]
    slot_masks: list          # per slot: [B, Mmax_l] bool
    sample_indices: list      # positions in the originating sample list

    @property
    def size(self):
        return self.queries.shape[0]

    @property
    def query_counts(self):
        return self.query_mask.sum(axis=1)


def _pad_stack(rows_list):
    longest = max(r.shape[0] for r in rows_list)
    width = rows_list[0].shape[1]
    out = np.zeros((len(rows_list), longest, width))
    mask = np.zeros((len(rows_list), longest), dtype=bool)
    for b, rows in enumerate(rows_list):
        out[b, : rows.shape[0]] = rows
        mask[b, : rows.shape[0]] = True
    return out, mask


def batch_from_samples(samples, indices=None):
    """Pad a group of samples to shared per-batch lengths."""
    if not samples:
        raise ContractError("cannot batch zero samples")
    queries, qmask = _pad_stack([s.query_points for s in samples])
    targets, _ = _pad_stack([s.targets for s in samples])
    num_slots = len(samples[0].inputs)
    slot_rows, slot_masks = [], []
    for l in range(num_slots):
        rows, mask = _pad_stack([s.inputs[l].feature_rows() for s in samples])
        slot_rows.append(rows)
        slot_masks.append(mask)
    return Batch(
        queries=queries,
        targets=targets,
        query_mask=qmask,
        slot_rows=slot_rows,
        slot_masks=slot_masks,
        sample_indices=list(indices) if indices is not None else list(range(len(samples))),
    )


def make_batches(samples, batch_size, shuffle_seed=None):
    """Deterministically batch samples, shuffling first when a seed is given."""
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(samples))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(samples))
    batches = []
    for start in range(0, len(samples), batch_size):
        idx = order[start : start + batch_size]
        batches.append(batch_from_samples([samples[i] for i in idx], indices=idx))
    return batches


def split_samples(samples, holdout_fraction, seed):
    """Deterministic (train, holdout) split by seeded permutation."""
    n = len(samples)
    n_holdout = int(round(n * holdout_fraction))
    order = np.random.default_rng(seed).permutation(n)
    holdout_idx = set(order[:n_holdout].tolist())
    train = [s for i, s in enumerate(samples) if i not in holdout_idx]
    holdout = [samples[i] for i in sorted(holdout_idx)]
    return train, holdout


# ---------------------------------------------------------------------------
# normalization


class Normalizer:
    """Per-channel standardization, fit on training data only."""

    def __init__(self, mean, std):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)

    @classmethod
    def fit(cls, rows, floor=1e-8):
        rows = np.asarray(rows, dtype=np.float64)
        mean = rows.mean(axis=0)
        std = rows.std(axis=0)
        if np.any(std <= floor):
            warnings.warn("zero-variance channel; standard deviation floored", stacklevel=2)
            std = np.maximum(std, floor)
        return cls(mean, std)

    @classmethod
    def identity(cls, width):
        return cls(np.zeros(width), np.ones(width))

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def invert(self, x):
        return np.asarray(x, dtype=np.float64) * self.std + self.mean

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mean"], d["std"])


class DataStats:
    """Training-split statistics for queries, targets, and each input slot."""

    def __init__(self, query, target, slots):
        self.query = query
        self.target = target
        self.slots = slots

    @classmethod
    def fit(cls, meta, samples):
        query = Normalizer.fit(np.concatenate([s.query_points for s in samples]))
        target = Normalizer.fit(np.concatenate([s.targets for s in samples]))
        slots = []
        for l in range(meta.num_slots):
            rows = np.concatenate([s.inputs[l].feature_rows() for s in samples])
            slots.append(Normalizer.fit(rows))
        return cls(query, target, slots)

    @classmethod
    def identity(cls, meta):
        return cls(
            Normalizer.identity(meta.coord_dim),
            Normalizer.identity(meta.out_dim),
            [Normalizer.identity(s.row_width(meta.coord_dim)) for s in meta.slots],
        )

    def to_dict(self):
        return {
            "query": self.query.to_dict(),
            "target": self.target.to_dict(),
            "slots": [s.to_dict() for s in self.slots],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            Normalizer.from_dict(d["query"]),
            Normalizer.from_dict(d["target"]),
            [Normalizer.from_dict(s) for s in d["slots"]],
        )
