"""Wall-clock scaling measurement of the two attention implementations.

The sequence length M applies to both the query set and the key/value set
(operator meshes grow together), so the direct form costs ~M^2 and the
factored form ~M.  Before timing anything, both forms are checked for
agreement at every size; the timings are meaningless if they diverge.
"""

import contextlib
import ctypes
import time
from dataclasses import dataclass

import numpy as np

from .attention import normalized_attention_direct, normalized_attention_factored
from .errors import ContractError

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # timings get noisier, slopes usually still land
    def threadpool_limits(limits):
        return contextlib.nullcontext()

DEFAULT_SIZES = (256, 512, 1024, 2048, 4096, 8192)


def _retain_freed_heap_blocks():
    """Ask glibc to keep large freed blocks on the heap (mallopt).

    The quadratic form churns ~0.5 GB of temporaries per call at the top
    size; without this, every later allocation page-faults its memory back
    in and the fast form's timings become bimodal.
    """
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(ctypes.c_int(-1), ctypes.c_int(2 ** 30))  # M_TRIM_THRESHOLD
        libc.mallopt(ctypes.c_int(-3), ctypes.c_int(2 ** 30))  # M_MMAP_THRESHOLD
    except OSError:
        pass


@dataclass
class BenchPoint:
    m: int
    direct_ms: float
    factored_ms: float


@dataclass
class BenchReport:
    points: list
    direct_slope: float
    factored_slope: float
    max_disagreement: float
    agreement_tol: float

    @property
    def outputs_agree(self):
        return self.max_disagreement <= self.agreement_tol

    def csv_lines(self):
        lines = ["m,direct_ms,factored_ms"]
        for p in self.points:
            lines.append(f"{p.m},{p.direct_ms!r},{p.factored_ms!r}")
        return lines


_SPIN_A = np.ones((64, 64))


def _spin(seconds):
    # busy work so the frequency governor is at speed when timing starts
    deadline = time.perf_counter() + seconds
    while time.perf_counter() < deadline:
        _SPIN_A @ _SPIN_A


def _median_ms(fn, reps, warmup=3, gap_s=0.08):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(reps):
        time.sleep(gap_s)  # give background housekeeping a window to run
        _spin(0.005)
        start = time.perf_counter()
        fn()
        times.append((time.perf_counter() - start) * 1e3)
    return float(np.median(times))


def run_scaling_benchmark(sizes=DEFAULT_SIZES, dim=64, reps=5, seed=0, agreement_tol=1e-10):
    """Time both attention forms at each size; fit log-log slopes."""
    _retain_freed_heap_blocks()
    rng = np.random.default_rng(seed)
    points = []
    worst = 0.0
    with threadpool_limits(limits=1):  # multithreaded BLAS jitters the timings
        for m in sizes:
            q = rng.uniform(-1.0, 1.0, (m, dim))
            k = rng.uniform(-1.0, 1.0, (m, dim))
            v = rng.uniform(-1.0, 1.0, (m, dim))
            direct_out = normalized_attention_direct(q, k, v).numpy()
            factored_out = normalized_attention_factored(q, k, v).numpy()
            # relative to the output scale: per-entry relative error is
            # ill-conditioned where the convex combination nearly cancels
            rel = np.max(np.abs(direct_out - factored_out)) / np.max(np.abs(direct_out))
            worst = max(worst, float(rel))
            if rel > agreement_tol:
                raise ContractError(
                    f"direct and factored outputs disagree at M={m}: {rel:.3e} > {agreement_tol:g}"
                )
            del direct_out, factored_out
            factored_ms = _median_ms(lambda: normalized_attention_factored(q, k, v), reps)
            direct_ms = _median_ms(lambda: normalized_attention_direct(q, k, v), reps)
            points.append(BenchPoint(m=m, direct_ms=direct_ms, factored_ms=factored_ms))
    log_m = np.log([p.m for p in points])
    direct_slope = float(np.polyfit(log_m, np.log([p.direct_ms for p in points]), 1)[0])
    factored_slope = float(np.polyfit(log_m, np.log([p.factored_ms for p in points]), 1)[0])
    return BenchReport(
        points=points,
        direct_slope=direct_slope,
        factored_slope=factored_slope,
        max_disagreement=worst,
        agreement_tol=agreement_tol,
    )
