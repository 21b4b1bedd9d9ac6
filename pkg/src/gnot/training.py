"""Optimization loop, evaluation metric, and checkpointing.

The objective is the masked mean-squared error in normalized target space,
nested exactly as per-sample mean over that sample's own query count, then
mean over samples.  Optimization is AdamW (decoupled weight decay) under a
one-cycle or exponential learning-rate schedule, with global-norm gradient
clipping.  The evaluation metric is the dataset-mean relative L2 error,
always computed in original target units.

Training is fully deterministic for a fixed seed: the per-epoch shuffle is
derived from (seed, epoch), so a run can be resumed from a checkpoint and
reproduce the uninterrupted run byte-for-byte.
"""

import json
import math
import os
import struct
import warnings
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import DataStats, batch_from_samples, make_batches, split_samples
from .errors import CheckpointError, ContractError
from .model import GnotModel, ModelConfig
from .tensor import Tensor

THREADS_ENV_VAR = "GNOT_NUM_THREADS"


# ---------------------------------------------------------------------------
# objective and metric


def mse_loss(pred, targets, mask=None):
    """Masked MSE: per-sample sum of squared errors over valid positions and
    channels divided by that sample's valid count, then mean over samples."""
    targets = np.asarray(targets, dtype=np.float64)
    diff = pred - Tensor(targets)
    sq = diff * diff
    if mask is not None:
        m = np.asarray(mask, dtype=np.float64)
        sq = sq * Tensor(m[..., np.newaxis])
        counts = m.sum(axis=-1)
    else:
        counts = np.full(sq.shape[0], sq.shape[1], dtype=np.float64)
    per_sample = sq.sum(axis=(1, 2)) / Tensor(counts)
    return per_sample.mean()


def relative_l2(pred, truth):
    """||pred - truth||_2 / ||truth||_2 over flattened values."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1)
    denom = np.linalg.norm(truth)
    if denom == 0.0:
        raise ContractError("relative_l2 is undefined for a zero-norm truth")
    return float(np.linalg.norm(pred - truth) / denom)


@dataclass
class MetricReport:
    """Dataset-mean relative L2 error (aggregate and per output channel),
    original-units MSE, and the sample counts behind them."""

    aggregate: float
    per_channel: list
    mse: float
    count: int
    excluded: int = 0

    def to_dict(self):
        return {
            "relative_l2": self.aggregate,
            "relative_l2_per_channel": list(self.per_channel),
            "mse": self.mse,
            "samples": self.count,
            "excluded_zero_norm": self.excluded,
        }


def metric_report(predictions, truths):
    """Reduce per-sample predictions/truths (original units) to a report.

    Zero-norm truths are excluded from the relative error with a warning.
    Per-sample values are gathered into position-indexed arrays first, so the
    reduction is independent of evaluation order.
    """
    n = len(predictions)
    out_dim = np.asarray(truths[0]).shape[1]
    agg = np.full(n, np.nan)
    chan = np.full((n, out_dim), np.nan)
    mses = np.zeros(n)
    for i, (pred, truth) in enumerate(zip(predictions, truths)):
        pred = np.asarray(pred, dtype=np.float64)
        truth = np.asarray(truth, dtype=np.float64)
        err = pred - truth
        mses[i] = float((err * err).sum() / truth.shape[0])
        denom = np.linalg.norm(truth)
        if denom > 0.0:
            agg[i] = np.linalg.norm(err) / denom
        for c in range(out_dim):
            dc = np.linalg.norm(truth[:, c])
            if dc > 0.0:
                chan[i, c] = np.linalg.norm(err[:, c]) / dc
    valid = ~np.isnan(agg)
    excluded = int(n - valid.sum())
    if excluded:
        warnings.warn(f"{excluded} sample(s) excluded from relative L2: zero-norm truth",
                      stacklevel=2)
    aggregate = float(agg[valid].mean()) if valid.any() else 0.0
    per_channel = []
    for c in range(out_dim):
        vc = ~np.isnan(chan[:, c])
        per_channel.append(float(chan[vc, c].mean()) if vc.any() else 0.0)
    return MetricReport(
        aggregate=aggregate,
        per_channel=per_channel,
        mse=float(mses.mean()),
        count=n,
        excluded=excluded,
    )


def _predictions_for(model, samples, batch_size):
    batches = make_batches(samples, batch_size)
    workers = max(1, int(os.environ.get(THREADS_ENV_VAR, "1")))
    results = [None] * len(batches)

    def run(i):
        results[i] = model.predict_batch(batches[i])

    if workers > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, range(len(batches))))
    else:
        for i in range(len(batches)):
            run(i)

    predictions = [None] * len(samples)
    for batch, out in zip(batches, results):
        for row, sample_idx in enumerate(batch.sample_indices):
            count = int(batch.query_mask[row].sum())
            predictions[sample_idx] = out[row, :count]
    return predictions


def evaluate_model(model, samples, batch_size=32):
    """Relative-L2 report of the model over samples, in original units."""
    preds = _predictions_for(model, samples, batch_size)
    return metric_report(preds, [s.targets for s in samples])


# ---------------------------------------------------------------------------
# optimizer and schedules


class AdamW:
    """Adam with bias correction and weight decay applied directly to the
    parameters (decoupled), not through the gradients."""

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in self.params}
        self.v = {name: np.zeros_like(t.data) for name, t in self.params}

    def step(self, lr, weight_decay=0.0):
        """One update; returns False (rejecting the step and zeroing all
        gradients) if any gradient is non-finite."""
        grads = {}
        for name, t in self.params:
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            if not np.all(np.isfinite(g)):
                warnings.warn(f"non-finite gradient in '{name}'; step rejected", stacklevel=2)
                for _, p in self.params:
                    p.grad = None
                return False
            grads[name] = g
        self.step_count += 1
        t_ = self.step_count
        bias1 = 1.0 - self.beta1 ** t_
        bias2 = 1.0 - self.beta2 ** t_
        for name, p in self.params:
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[name] / bias1
            v_hat = self.v[name] / bias2
            p.data = p.data - lr * weight_decay * p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return True


def clip_grad_norm(params, max_norm):
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for _, t in params:
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    total = math.sqrt(total)
    if max_norm and total > max_norm:
        scale = max_norm / total
        for _, t in params:
            if t.grad is not None:
                t.grad = t.grad * scale
    return total


def one_cycle_lr(step, total_steps, max_lr, div_factor=25.0, final_div_factor=1e4,
                 pct_warmup=0.3):
    """Cosine warmup from max_lr/div_factor to max_lr over pct_warmup of the
    run, then cosine anneal down to max_lr/final_div_factor."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    warm = pct_warmup * total_steps
    start = max_lr / div_factor
    floor = max_lr / final_div_factor
    if step <= warm:
        frac = step / warm if warm > 0 else 1.0
        return start + (max_lr - start) * 0.5 * (1.0 - math.cos(math.pi * frac))
    frac = (step - warm) / (total_steps - warm) if total_steps > warm else 1.0
    return floor + (max_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * frac))


def exponential_lr(step, max_lr, gamma):
    """Per-step exponential decay: max_lr * gamma**step."""
    return max_lr * gamma ** step


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 16
    max_lr: float = 1e-3
    weight_decay: float = 1e-4
    grad_clip_norm: float = 1.0
    seed: int = 0
    val_fraction: float = 0.1
    schedule: str = "onecycle"        # or "exponential"
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    pct_warmup: float = 0.3
    gamma: float = 0.9995             # exponential schedule, per step

    def __post_init__(self):
        if self.max_lr <= 0:
            raise ContractError(f"max_lr must be positive, got {self.max_lr}")
        if not 0.0 < self.pct_warmup < 1.0:
            raise ContractError(f"pct_warmup must lie in (0, 1), got {self.pct_warmup}")
        if self.schedule not in ("onecycle", "exponential"):
            raise ContractError(f"unknown schedule '{self.schedule}'")

    def lr_at(self, step, total_steps):
        if self.schedule == "onecycle":
            return one_cycle_lr(step, total_steps, self.max_lr, self.div_factor,
                                self.final_div_factor, self.pct_warmup)
        return exponential_lr(step, self.max_lr, self.gamma)

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class TrainState:
    """Everything needed to resume: counters, moments, and parameter values."""

    step: int
    epoch: int
    best_metric: float
    params: dict
    m: dict
    v: dict


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_metric: float = math.inf
    best_epoch: int = -1
    diverged: bool = False
    final_state: TrainState = None
    best_state: TrainState = None


def _snapshot(model, optimizer, step, epoch, best_metric):
    return TrainState(
        step=step,
        epoch=epoch,
        best_metric=best_metric,
        params={name: t.data.copy() for name, t in model.parameters()},
        m={k: a.copy() for k, a in optimizer.m.items()},
        v={k: a.copy() for k, a in optimizer.v.items()},
    )


def _restore_params(model, params):
    for name, t in model.parameters():
        if name not in params:
            raise CheckpointError(f"missing parameter '{name}'")
        if params[name].shape != t.data.shape:
            raise CheckpointError(
                f"parameter '{name}' has shape {params[name].shape}, model expects {t.data.shape}"
            )
        t.data = params[name].copy()


def _epoch_shuffle_seed(seed, epoch):
    return (seed * 1_000_003 + epoch) % (2 ** 63)


def train(model, dataset, cfg, resume=None, stop_epoch=None, log=None):
    """Train the model on the dataset; returns a TrainResult.

    The dataset is split deterministically (by cfg.seed) into train and
    validation parts; the best-validation-metric state is snapshotted.  On
    divergence (non-finite loss) training aborts and the best parameters are
    restored into the model.  `stop_epoch` interrupts the run early without
    changing the schedule, so resuming from the returned state reproduces
    the uninterrupted run exactly.
    """
    train_samples, val_samples = split_samples(dataset.samples, cfg.val_fraction, cfg.seed)
    if not train_samples:
        raise ContractError("training split is empty")
    if model.stats is None:
        model.stats = DataStats.fit(dataset.meta, train_samples)
    params = model.parameters()
    optimizer = AdamW(params)
    steps_per_epoch = math.ceil(len(train_samples) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch

    result = TrainResult()
    step = 0
    start_epoch = 0
    if resume is not None:
        _restore_params(model, resume.params)
        optimizer.m = {k: a.copy() for k, a in resume.m.items()}
        optimizer.v = {k: a.copy() for k, a in resume.v.items()}
        optimizer.step_count = resume.step
        step = resume.step
        start_epoch = resume.epoch
        result.best_metric = resume.best_metric

    eval_samples = val_samples if val_samples else train_samples
    end_epoch = cfg.epochs if stop_epoch is None else min(stop_epoch, cfg.epochs)
    for epoch in range(start_epoch, end_epoch):
        batches = make_batches(train_samples, cfg.batch_size,
                               shuffle_seed=_epoch_shuffle_seed(cfg.seed, epoch))
        epoch_losses = []
        lr = cfg.lr_at(step, total_steps)
        for batch in batches:
            model.zero_grad()
            pred = model.forward_batch(batch)
            targets = model.stats.target.apply(batch.targets)
            loss = mse_loss(pred, targets, batch.query_mask)
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                warnings.warn(f"training diverged at epoch {epoch}; best state restored",
                              stacklevel=2)
                result.diverged = True
                break
            loss.backward()
            clip_grad_norm(params, cfg.grad_clip_norm)
            lr = cfg.lr_at(step, total_steps)
            optimizer.step(lr, cfg.weight_decay)
            step += 1
            epoch_losses.append(loss_value)
        if result.diverged:
            break
        report = evaluate_model(model, eval_samples, batch_size=cfg.batch_size)
        row = {
            "epoch": epoch,
            "train_loss": float(np.mean(epoch_losses)),
            "val_rel_l2": report.aggregate,
            "lr": lr,
        }
        result.history.append(row)
        if report.aggregate < result.best_metric:
            result.best_metric = report.aggregate
            result.best_epoch = epoch
            result.best_state = _snapshot(model, optimizer, step, epoch + 1, report.aggregate)
        if log is not None:
            log(row)

    result.final_state = _snapshot(model, optimizer, step,
                                   epoch + 1 if end_epoch > start_epoch else start_epoch,
                                   result.best_metric)
    if result.diverged and result.best_state is not None:
        _restore_params(model, result.best_state.params)
    if result.best_state is None:
        result.best_state = result.final_state
        result.best_epoch = result.final_state.epoch - 1
    return result


# ---------------------------------------------------------------------------
# checkpoint container
#
# layout (little-endian): magic 8s | version u32 | config-JSON block |
# param table | state flag u8 | [state: step u64, epoch u64, best f64,
# m table, v table] | crc32 u32 over everything before it.

CHECKPOINT_MAGIC = b"GNOTCKP1"
CHECKPOINT_VERSION = 1


def _pack_bytes(buf, payload):
    buf.append(struct.pack("<Q", len(payload)))
    buf.append(payload)


def _pack_table(buf, table):
    buf.append(struct.pack("<I", len(table)))
    for name, arr in table.items():
        encoded = name.encode("utf-8")
        buf.append(struct.pack("<H", len(encoded)))
        buf.append(encoded)
        buf.append(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            buf.append(struct.pack("<I", dim))
        buf.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_table(reader):
    (count,) = reader.unpack("<I")
    table = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = reader.unpack("<B")
        shape = tuple(reader.unpack("<I")[0] for _ in range(ndim))
        n_items = int(np.prod(shape)) if shape else 1
        payload = reader.take(8 * n_items)
        table[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    return table


def save_checkpoint(path, model_config, stats, state, train_config=None):
    """Write a self-contained checkpoint (config, stats, params, optimizer)."""
    header = {
        "model": model_config.to_dict(),
        "stats": stats.to_dict() if stats is not None else None,
        "train": train_config.to_dict() if train_config is not None else None,
    }
    buf = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    _pack_bytes(buf, json.dumps(header, sort_keys=True).encode("utf-8"))
    _pack_table(buf, state.params)
    buf.append(struct.pack("<B", 1))
    buf.append(struct.pack("<QQd", state.step, state.epoch,
                           state.best_metric if math.isfinite(state.best_metric) else -1.0))
    _pack_table(buf, state.m)
    _pack_table(buf, state.v)
    body = b"".join(buf)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))


@dataclass
class Checkpoint:
    model_config: ModelConfig
    stats: DataStats
    state: TrainState
    train_config: dict

    def build_model(self):
        model = GnotModel(self.model_config, stats=self.stats)
        _restore_params(model, self.state.params)
        return model


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CHECKPOINT_MAGIC) + 8:
        raise CheckpointError(f"{path}: not a checkpoint (too short)")
    (stored_crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise CheckpointError(f"{path}: checksum mismatch (corrupted file)")
    reader = _Reader(blob[:-4])
    if reader.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    (version,) = reader.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: incompatible checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )
    (header_len,) = reader.unpack("<Q")
    header = json.loads(reader.take(header_len).decode("utf-8"))
    params = _read_table(reader)
    (has_state,) = reader.unpack("<B")
    state = TrainState(step=0, epoch=0, best_metric=math.inf, params=params, m={}, v={})
    if has_state:
        step, epoch, best = reader.unpack("<QQd")
        state.step = step
        state.epoch = epoch
        state.best_metric = math.inf if best < 0 else best
        state.m = _read_table(reader)
        state.v = _read_table(reader)
    stats = DataStats.from_dict(header["stats"]) if header["stats"] is not None else None
    return Checkpoint(
        model_config=ModelConfig.from_dict(header["model"]),
        stats=stats,
        state=state,
        train_config=header.get("train"),
    )
