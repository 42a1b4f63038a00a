from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Tape, Var, backward, value
from .params import ParamStore
from .rng import SplitMix64


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: int
    checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


# Central differences carry about eps * |f| / h of cancellation noise (~1e-11 at
# h = 1e-5), so gradients under this floor are judged on absolute error instead.
REL_FLOOR = 1e-6


def rel_error(g_tape: float, g_fd: float, floor: float = REL_FLOOR) -> float:
    return abs(g_tape - g_fd) / max(abs(g_tape), abs(g_fd), floor)


def grad_check(
    f: Callable[[dict], Var],
    params: ParamStore,
    h: float = 1e-5,
    tol: float = 1e-4,
    samples: int | None = None,
    seed: int = 0,
    grads: dict[str, np.ndarray] | None = None,
) -> GradCheckReport:
    """Compare tape gradients of ``f`` against central differences.

    ``f`` receives a name -> tensor mapping (taped ``Var`` leaves, or plain
    arrays during the finite-difference evaluations) and returns a scalar.
    ``samples=None`` checks every element; otherwise a seeded uniform sample.
    ``grads`` overrides the tape gradient (used to plant faults).
    """
    if grads is None:
        tape = Tape()
        leaves = tape.watch(params)
        grads = backward(tape, f(leaves))

    names = params.names()
    sizes = np.array([params[n].size for n in names])
    total = int(sizes.sum())
    if samples is None or samples >= total:
        flat = np.arange(total)
    else:
        rng = SplitMix64(seed)
        flat = np.sort(rng.permutation(total)[:samples])
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def evaluate() -> float:
        return float(value(f({n: params[n] for n in names})))

    worst = (0.0, names[0], 0)
    for idx in flat:
        pi = int(np.searchsorted(offsets, idx, side="right") - 1)
        name, j = names[pi], int(idx - offsets[pi])
        arr = params[name].reshape(-1)
        orig = arr[j]
        arr[j] = orig + h
        f_plus = evaluate()
        arr[j] = orig - h
        f_minus = evaluate()
        arr[j] = orig
        g_fd = (f_plus - f_minus) / (2.0 * h)
        err = rel_error(float(grads[name].reshape(-1)[j]), g_fd)
        if err > worst[0]:
            worst = (err, name, j)
    return GradCheckReport(worst[0], worst[1], worst[2], len(flat), tol)
