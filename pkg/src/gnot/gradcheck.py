"""End-to-end gradient verification against central finite differences.

The finite-difference side is forward-only (two evaluations per probed
coordinate), so it is independent of every backward rule it checks.  The
per-coordinate score is

    |ad - fd| / max(|ad|, |fd|, 0.01)

which enforces a relative tolerance for healthy gradients and an absolute
tolerance of 1e-7 (at the 1e-5 threshold) for near-zero ones.
"""

from dataclasses import dataclass

import numpy as np

from .data import Sample, batch_from_samples
from .encoding import BoundaryShape, DistributedFunction, ParamVector, SlotSpec
from .model import GnotModel, ModelConfig
from .tensor import no_grad
from .training import mse_loss

PROBE_KINDS = ("param_vector", "boundary", "distributed")


@dataclass
class GradCheckReport:
    max_score: float
    n_coords: int
    worst: list  # (param name, flat index, autodiff, finite difference, score)

    def passed(self, tol=1e-5):
        return self.max_score <= tol


def probe_model_and_sample(include=PROBE_KINDS, seed=0):
    """A small two-block model and a matching random sample.

    `include` selects which encoder kinds the sample carries (the default
    exercises all three: a parameter vector, a boundary shape, and a
    domain-distributed function).
    """
    rng = np.random.default_rng(seed)
    coord_dim = 2
    slots = []
    inputs = []
    for kind in include:
        if kind == "param_vector":
            slots.append(SlotSpec("param_vector", 3))
            inputs.append(ParamVector(rng.normal(size=3)))
        elif kind == "boundary":
            slots.append(SlotSpec("boundary_shape"))
            inputs.append(BoundaryShape(rng.uniform(-1, 1, (4, coord_dim))))
        elif kind == "distributed":
            slots.append(SlotSpec("distributed_function", 1))
            inputs.append(DistributedFunction(rng.uniform(-1, 1, (5, coord_dim)),
                                              rng.normal(size=(5, 1))))
        else:
            raise ValueError(f"unknown probe kind '{kind}' (choose from {PROBE_KINDS})")
    config = ModelConfig(
        coord_dim=coord_dim,
        out_dim=1,
        slots=slots,
        embed_dim=16,
        num_heads=2,
        num_blocks=2,
        num_experts=2,
        expert_hidden=16,
        encoder_layers=2,
        gate_hidden=8,
        seed=seed,
    )
    sample = Sample(
        query_points=rng.uniform(-1, 1, (6, coord_dim)),
        targets=rng.normal(size=(6, 1)),
        inputs=inputs,
    )
    return GnotModel(config), sample


def gradient_check(model, sample, n_coords=50, h=1e-5, seed=0, keep_worst=5):
    """Compare autodiff gradients of the sample's MSE loss against central
    finite differences at randomly probed parameter coordinates."""
    batch = batch_from_samples([sample])

    def loss_value():
        with no_grad():
            pred = model.forward_batch(batch)
            return mse_loss(pred, batch.targets, batch.query_mask).item()

    model.zero_grad()
    loss = mse_loss(model.forward_batch(batch), batch.targets, batch.query_mask)
    loss.backward()

    params = model.parameters()
    rng = np.random.default_rng(seed)
    sizes = np.array([t.size for _, t in params])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.cumsum(sizes)

    records = []
    for flat in sorted(picks.tolist()):
        p_idx = int(np.searchsorted(offsets, flat, side="right"))
        local = flat - (offsets[p_idx - 1] if p_idx else 0)
        name, t = params[p_idx]
        buf = t.data.reshape(-1)
        ad = float(t.grad.reshape(-1)[local]) if t.grad is not None else 0.0
        orig = buf[local]
        buf[local] = orig + h
        up = loss_value()
        buf[local] = orig - h
        down = loss_value()
        buf[local] = orig
        fd = (up - down) / (2.0 * h)
        score = abs(ad - fd) / max(abs(ad), abs(fd), 1e-2)
        records.append((name, int(local), ad, fd, score))

    records.sort(key=lambda r: -r[4])
    return GradCheckReport(
        max_score=records[0][4] if records else 0.0,
        n_coords=len(records),
        worst=records[:keep_worst],
    )
