"""Execution backends for per-particle work.

Three interchangeable ways to run the propagation phase of the filter:

* :class:`Sequential` loops over particles in index order.
* :class:`Parallel` splits ``[0, N)`` into contiguous chunks of equal size
  (+-1) and hands one chunk to each worker of a pool that lives as long as
  the backend.  Worker processes are the default because the per-particle
  integrators are Python-level code that would serialize on the interpreter
  lock under threads.
* :class:`Batched` stacks every particle into one system and solves the
  implicit stages on the aggregate block-diagonal iteration matrix.

Random draws never happen inside a backend, so all three return identical
results for identical inputs.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericalError, WorkerError
from .lmm import Integrator, batched_propagation

PHASES = ("propagate", "resample", "proliferate", "repropagate", "weights")


def partition(N: int, parts: int) -> list[tuple[int, int]]:
    """Contiguous ``(lo, hi)`` chunks of ``range(N)`` whose sizes differ by at most one.

    >>> [hi - lo for lo, hi in partition(10, 4)]
    [3, 3, 2, 2]
    """
    if parts < 1:
        raise ConfigError("need at least one chunk")
    base, extra = divmod(int(N), int(parts))
    out, lo = [], 0
    for i in range(parts):
        hi = lo + base + (1 if i < extra else 0)
        out.append((lo, hi))
        lo = hi
    return out


@dataclass
class WorkReport:
    """Wall time per filter phase and CPU busy time per worker, in seconds."""

    phase_times: dict = field(default_factory=lambda: {p: 0.0 for p in PHASES})
    worker_busy: np.ndarray = field(default_factory=lambda: np.zeros(1))

    def add_phase(self, phase: str, seconds: float):
        self.phase_times[phase] = self.phase_times.get(phase, 0.0) + max(0.0, seconds)

    def imbalance(self) -> float:
        busy = self.worker_busy[self.worker_busy > 0]
        if busy.size == 0:
            return 1.0
        return float(busy.max() / busy.min())

    def to_dict(self) -> dict:
        return {
            "phase_times": {k: float(v) for k, v in self.phase_times.items()},
            "worker_busy": [float(v) for v in self.worker_busy],
        }


@dataclass
class Propagated:
    """Interval end states, innovation variances and success flags of all particles."""

    states: np.ndarray
    gamma: np.ndarray
    ok: np.ndarray


def _cpu_clock():
    # per-thread CPU time is immune to oversubscription and to the other workers
    return time.thread_time()


def _propagate_chunk(model, thetas, X0, t0, t1, integ: Integrator, offset: int):
    """Propagate particles ``offset .. offset+len(X0)-1`` one at a time.

    Numerical failures mark a particle as failed; its state is left at ``X0``
    and its variance at zero so every backend reports the same values.
    """
    start = _cpu_clock()
    X0 = np.asarray(X0, dtype=float)
    states = X0.copy()
    gamma = np.zeros_like(X0)
    ok = np.ones(X0.shape[0], dtype=bool)
    for i in range(X0.shape[0]):
        try:
            res = integ.propagate(model, thetas[i], X0[i], t0, t1)
        except NumericalError:
            ok[i] = False
            continue
        except Exception as exc:  # noqa: BLE001 - surfaced with the particle index
            raise WorkerError(offset + i, f"{type(exc).__name__}: {exc}") from exc
        states[i] = res.state
        gamma[i] = res.gamma_diag
    return states, gamma, ok, _cpu_clock() - start


def _run_task_chunk(task, lo, hi):
    start = _cpu_clock()
    out = []
    for n in range(lo, hi):
        try:
            out.append(task(n))
        except WorkerError:
            raise
        except Exception as exc:  # noqa: BLE001
            raise WorkerError(n, f"{type(exc).__name__}: {exc}") from exc
    return out, _cpu_clock() - start


# worker-process globals, set once per pool
_WORKER_MODEL = None


def _init_worker(model):
    global _WORKER_MODEL
    _WORKER_MODEL = model


def _propagate_chunk_in_worker(thetas, X0, t0, t1, integ, offset):
    return _propagate_chunk(_WORKER_MODEL, thetas, X0, t0, t1, integ, offset)


class Backend:
    """Common interface; subclasses implement :meth:`propagate` and :meth:`map_particles`."""

    name = "base"
    workers = 1

    def __init__(self):
        self.report = WorkReport(worker_busy=np.zeros(self.workers))

    def reset_report(self):
        self.report = WorkReport(worker_busy=np.zeros(self.workers))

    def propagate(self, model, thetas, X0, t0, t1, integ: Integrator) -> Propagated:
        raise NotImplementedError

    def map_particles(self, task, N: int) -> list:
        raise NotImplementedError

    def close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __repr__(self):
        return f"{type(self).__name__}()"


class Sequential(Backend):
    name = "seq"

    def propagate(self, model, thetas, X0, t0, t1, integ):
        integ.check_interval(t0, t1)
        states, gamma, ok, busy = _propagate_chunk(model, thetas, X0, t0, t1, integ, 0)
        self.report.worker_busy[0] += busy
        return Propagated(states, gamma, ok)

    def map_particles(self, task, N):
        out, busy = _run_task_chunk(task, 0, N)
        self.report.worker_busy[0] += busy
        return out


class Parallel(Backend):
    """Fixed-size worker pool.

    ``schedule="static"`` gives worker ``i`` the ``i``-th contiguous chunk.
    ``schedule="dynamic"`` cuts smaller chunks and lets idle workers pick up
    the next one, which helps the adaptive integrator whose cost varies per
    particle.  Results are reassembled in index order either way.
    """

    name = "par"

    def __init__(self, workers: int = 2, executor: str = "process", schedule: str = "static",
                 chunks_per_worker: int = 8):
        workers = int(workers)
        if workers < 1:
            raise ConfigError("workers must be >= 1")
        if executor not in ("process", "thread"):
            raise ConfigError("executor must be 'process' or 'thread'")
        if schedule not in ("static", "dynamic"):
            raise ConfigError("schedule must be 'static' or 'dynamic'")
        self.workers = workers
        self.executor = executor
        self.schedule = schedule
        self.chunks_per_worker = int(chunks_per_worker)
        self._pool = None
        self._pool_model = None
        super().__init__()

    def __repr__(self):
        return f"Parallel(workers={self.workers}, executor={self.executor!r}, schedule={self.schedule!r})"

    def _chunks(self, N):
        parts = self.workers if self.schedule == "static" else self.workers * self.chunks_per_worker
        return [c for c in partition(N, min(parts, max(N, 1))) if c[1] > c[0]]

    def _ensure_pool(self, model=None):
        if self.executor == "thread":
            if self._pool is None:
                self._pool = ThreadPoolExecutor(max_workers=self.workers)
            return
        if self._pool is not None and self._pool_model is model:
            return
        self.close()
        self._pool = ProcessPoolExecutor(max_workers=self.workers, initializer=_init_worker,
                                         initargs=(model,))
        self._pool_model = model

    def _account(self, chunk_ids, busy):
        if self.schedule == "static":
            for c, b in zip(chunk_ids, busy):
                self.report.worker_busy[c] += b
        else:
            # dynamic chunks are spread round-robin for accounting purposes
            for c, b in zip(chunk_ids, busy):
                self.report.worker_busy[c % self.workers] += b

    def propagate(self, model, thetas, X0, t0, t1, integ):
        integ.check_interval(t0, t1)
        thetas = np.asarray(thetas, dtype=float)
        X0 = np.asarray(X0, dtype=float)
        chunks = self._chunks(X0.shape[0])
        if self.workers == 1 and self.executor == "process":
            # no pool needed; identical code path to the sequential backend
            results = [_propagate_chunk(model, thetas[lo:hi], X0[lo:hi], t0, t1, integ, lo)
                       for lo, hi in chunks]
        else:
            self._ensure_pool(model)
            if self.executor == "thread":
                futs = [self._pool.submit(_propagate_chunk, model, thetas[lo:hi], X0[lo:hi],
                                          t0, t1, integ, lo) for lo, hi in chunks]
            else:
                futs = [self._pool.submit(_propagate_chunk_in_worker, thetas[lo:hi], X0[lo:hi],
                                          t0, t1, integ, lo) for lo, hi in chunks]
            results = [f.result() for f in futs]
        self._account(range(len(chunks)), [r[3] for r in results])
        if not results:
            return Propagated(X0.copy(), np.zeros_like(X0), np.ones(0, dtype=bool))
        return Propagated(
            np.concatenate([r[0] for r in results]),
            np.concatenate([r[1] for r in results]),
            np.concatenate([r[2] for r in results]),
        )

    def map_particles(self, task, N):
        chunks = self._chunks(N)
        if self.workers == 1 and self.executor == "process":
            results = [_run_task_chunk(task, lo, hi) for lo, hi in chunks]
        else:
            if self._pool is None:
                self._ensure_pool(self._pool_model)
            futs = [self._pool.submit(_run_task_chunk, task, lo, hi) for lo, hi in chunks]
            results = [f.result() for f in futs]
        self._account(range(len(chunks)), [r[1] for r in results])
        return [x for r in results for x in r[0]]

    def close(self):
        if self._pool is not None:
            self._pool.shutdown(wait=True, cancel_futures=True)
            self._pool = None
            self._pool_model = None


class Batched(Backend):
    """All particles as one stacked system.

    Only fixed-step schemes are supported: the adaptive controller picks a
    different step sequence for every particle, so there is nothing to stack.
    """

    name = "batch"

    def __init__(self):
        super().__init__()
        self.last_newton_iterations = 0

    def propagate(self, model, thetas, X0, t0, t1, integ):
        return run_batched_propagation(model, thetas, X0, t0, t1, integ, backend=self)

    def map_particles(self, task, N):
        out, busy = _run_task_chunk(task, 0, N)
        self.report.worker_busy[0] += busy
        return out


def run_batched_propagation(model, thetas, X0, t0, t1, integ: Integrator, backend=None) -> Propagated:
    """Interval propagation of every particle through the stacked path.

    Failed particles are reported exactly like the per-particle backends
    report them: state left at ``X0``, zero variance, ``ok`` False.
    """
    if integ.adaptive:
        raise ConfigError("the batched backend needs a fixed-step integrator")
    X0 = np.asarray(X0, dtype=float)
    start = _cpu_clock()
    res = batched_propagation(model, np.asarray(thetas, dtype=float), X0, t0, t1, integ.h, integ.scheme)
    ok = res.ok
    states = np.where(ok[:, None], res.states, X0)
    gamma = np.where(ok[:, None], res.gamma, 0.0)
    if backend is not None:
        backend.report.worker_busy[0] += _cpu_clock() - start
        backend.last_newton_iterations = res.newton_iterations
    return Propagated(states, gamma, ok)


def map_particles(backend: Backend, task, N: int) -> list:
    """``[task(0), ..., task(N-1)]`` computed by ``backend``, always in index order."""
    if N < 0:
        raise ConfigError("N must be nonnegative")
    return backend.map_particles(task, int(N))


def make_backend(kind: str, workers: int | None = None, **kwargs) -> Backend:
    """``"seq"``, ``"par"`` or ``"batch"``; ``workers`` defaults to ``$PFSMC_WORKERS`` or 2."""
    kind = str(kind).lower()
    if kind in ("seq", "sequential"):
        return Sequential()
    if kind in ("batch", "batched"):
        return Batched()
    if kind in ("par", "parallel"):
        if workers is None:
            workers = default_workers()
        return Parallel(workers, **kwargs)
    raise ConfigError(f"unknown backend {kind!r}")


def default_workers() -> int:
    env = os.environ.get("PFSMC_WORKERS")
    if env is None or env.strip() == "":
        return 2
    try:
        w = int(env)
    except ValueError as exc:
        raise ConfigError(f"PFSMC_WORKERS must be an integer, got {env!r}") from exc
    if w < 1:
        raise ConfigError("PFSMC_WORKERS must be >= 1")
    return w


def physical_cores() -> int:
    """Physical core count from ``/proc/cpuinfo`` where available, else logical CPUs."""
    try:
        with open("/proc/cpuinfo") as fh:
            text = fh.read()
    except OSError:
        return os.cpu_count() or 1
    cores, phys = set(), "0"
    for line in text.splitlines():
        key, _, val = line.partition(":")
        key = key.strip()
        if key == "physical id":
            phys = val.strip()
        elif key == "core id":
            cores.add((phys, val.strip()))
    if not cores:
        return os.cpu_count() or 1
    avail = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else len(cores)
    return max(1, min(len(cores), avail))
