"""Synthetic 1-D regression tasks drawn from Gaussian-process priors."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import kernels

X_LOW, X_HIGH = -2.0, 2.0
MAX_POINTS = 50
MIN_POINTS = 3
JITTER = 1e-6
MAX_JITTER = 1e-2
STUDENT_T_DOF = 2.1
CORRUPTION_GRID = (0.05, 0.08, 0.11, 0.13, 0.15)
FAMILIES = ("rbf", "matern", "rbf-flip")

# leading words of the seed sequences keep train and eval streams disjoint
_TRAIN_STREAM = 0
_EVAL_STREAM = 1


class FactorizationError(RuntimeError):
    pass


@dataclass(frozen=True)
class KernelSpec:
    family: str
    s: float = 1.0
    ell: float = 1.0

    def __post_init__(self):
        if self.family not in ("rbf", "matern52"):
            raise ValueError(f"unknown kernel family {self.family!r}")


@dataclass(frozen=True)
class Task:
    context_x: np.ndarray
    context_y: np.ndarray
    target_x: np.ndarray
    target_y: np.ndarray

    @property
    def n_context(self) -> int:
        return len(self.context_x)

    @property
    def n_target(self) -> int:
        return len(self.target_x)


@dataclass(frozen=True)
class TaskBatch:
    tasks: tuple

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i):
        return self.tasks[i]


def sample_kernel_spec(family: str, rng: np.random.Generator) -> KernelSpec:
    """RBF hyperparameters ``s ~ U[0.1, 1)``, ``ell ~ U[0.1, 0.6)``; Matern-5/2 is fixed."""
    if family in ("rbf", "rbf-flip"):
        return KernelSpec("rbf", s=rng.uniform(0.1, 1.0), ell=rng.uniform(0.1, 0.6))
    if family in ("matern", "matern52"):
        return KernelSpec("matern52")
    raise ValueError(f"unknown task family {family!r}")


def kernel_eval(spec: KernelSpec, x: float, x2: float) -> float:
    if spec.family == "rbf":
        return spec.s**2 * math.exp(-((x - x2) ** 2) / (2.0 * spec.ell**2))
    d = 4.0 * abs(x - x2)
    return (1.0 + math.sqrt(5.0) * d + 5.0 * d * d / 3.0) * math.exp(-math.sqrt(5.0) * d)


def gram_matrix(spec: KernelSpec, x: np.ndarray) -> np.ndarray:
    if spec.family == "rbf":
        return kernels.gram_rbf(x, spec.s, spec.ell)
    return kernels.gram_matern52(x)


def jittered_cholesky(k: np.ndarray) -> np.ndarray:
    """Cholesky factor with diagonal jitter escalating x10 from 1e-6 to 1e-2."""
    jitter = JITTER
    eye = np.eye(len(k))
    while jitter <= MAX_JITTER * (1 + 1e-9):
        try:
            return np.linalg.cholesky(k + jitter * eye)
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise FactorizationError(f"Gram matrix of size {len(k)} not positive definite with jitter {MAX_JITTER}")


def sample_gp_function(spec: KernelSpec, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    chol = jittered_cholesky(gram_matrix(spec, x))
    return chol @ rng.standard_normal(len(x))


def sample_sizes(rng: np.random.Generator, max_points: int = MAX_POINTS):
    """``N_c ~ U{3..max-3}`` and ``N_t ~ U{3..max-N_c}``, both inclusive."""
    n_c = int(rng.integers(MIN_POINTS, max_points - MIN_POINTS + 1))
    n_t = int(rng.integers(MIN_POINTS, max_points - n_c + 1))
    return n_c, n_t


def sample_gp_task(spec: KernelSpec, rng: np.random.Generator, n_context: Optional[int] = None,
                   n_target: Optional[int] = None) -> Task:
    n_c, n_t = sample_sizes(rng)
    n_c = n_context if n_context is not None else n_c
    n_t = n_target if n_target is not None else n_t
    x = rng.uniform(X_LOW, X_HIGH, n_c + n_t)
    y = sample_gp_function(spec, x, rng)
    return Task(x[:n_c], y[:n_c], x[n_c:], y[n_c:])


def sample_family_task(family: str, rng: np.random.Generator) -> Task:
    """One task of a named family; ``rbf-flip`` negates the outputs with probability 1/2."""
    spec = sample_kernel_spec(family, rng)
    task = sample_gp_task(spec, rng)
    if family == "rbf-flip" and rng.random() < 0.5:
        task = replace(task, context_y=-task.context_y, target_y=-task.target_y)
    return task


def corrupt_student_t(task: Task, gamma: float, rng: np.random.Generator) -> Task:
    """Add ``gamma * t(2.1)`` noise to the context outputs; targets are untouched."""
    if gamma < 0:
        raise ValueError("corruption scale must be positive")
    if gamma == 0:
        return task
    noise = gamma * rng.standard_t(STUDENT_T_DOF, size=task.n_context)
    return replace(task, context_y=task.context_y + noise)


def task_rng(seed: int, step: int, index: int) -> np.random.Generator:
    return np.random.default_rng([_TRAIN_STREAM, seed, step, index])


def make_batch(family: str, batch_size: int, seed: int, step: int = 0) -> TaskBatch:
    """Batch for training step ``step``; task ``i`` depends only on ``(seed, step, i)``."""
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    return TaskBatch(tuple(sample_family_task(family, task_rng(seed, step, i)) for i in range(batch_size)))


def make_eval_set(family: str, n_tasks: int, seed: int) -> TaskBatch:
    """Frozen evaluation tasks drawn from a stream disjoint from training."""
    return TaskBatch(
        tuple(sample_family_task(family, np.random.default_rng([_EVAL_STREAM, seed, i])) for i in range(n_tasks))
    )


def corrupt_batch(batch: TaskBatch, gamma: float, seed: int) -> TaskBatch:
    return TaskBatch(
        tuple(corrupt_student_t(t, gamma, np.random.default_rng([2, seed, i])) for i, t in enumerate(batch))
    )


# -- task dump files ------------------------------------------------------------------
DUMP_HEADER = "# efagg-tasks v1"


def write_tasks(path, batch: TaskBatch, **attrs) -> Path:
    """Columnar CSV: ``task_id,role,x,y``; values use ``repr`` so they round-trip exactly.

    The first line is ``# efagg-tasks v1``; a second comment line carries
    ``key=value`` attributes (family, seed, ...).
    """
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(DUMP_HEADER + "\n")
        fh.write("# " + " ".join(f"{k}={v}" for k, v in sorted(attrs.items())) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task_id", "role", "x", "y"])
        for i, t in enumerate(batch):
            for role, xs, ys in (("context", t.context_x, t.context_y), ("target", t.target_x, t.target_y)):
                for x, y in zip(xs, ys):
                    w.writerow([i, role, repr(float(x)), repr(float(y))])
    return path


def read_tasks(path):
    """Inverse of :func:`write_tasks`; returns ``(batch, attrs)``."""
    with open(path, newline="") as fh:
        first = fh.readline().rstrip("\n")
        if first != DUMP_HEADER:
            raise ValueError(f"{path}: not an efagg task dump")
        attrs = dict(kv.split("=", 1) for kv in fh.readline()[1:].split())
        rows = list(csv.DictReader(fh))
    data: dict = {}
    for r in rows:
        entry = data.setdefault(int(r["task_id"]), {"context": ([], []), "target": ([], [])})
        entry[r["role"]][0].append(float(r["x"]))
        entry[r["role"]][1].append(float(r["y"]))
    tasks = []
    for i in sorted(data):
        (cx, cy), (tx, ty) = data[i]["context"], data[i]["target"]
        tasks.append(Task(np.array(cx), np.array(cy), np.array(tx), np.array(ty)))
    return TaskBatch(tuple(tasks)), attrs
