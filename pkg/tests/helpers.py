"""Independent oracles shared by the test modules."""

from contextlib import contextmanager

import numpy as np


def brute_force_adjacency(faces):
    """O(F^2) edge matching: neighbours of each face, any order."""
    edges = [{frozenset((f[k], f[(k + 1) % 3])) for k in range(3)} for f in faces]
    out = []
    for i, ei in enumerate(edges):
        out.append(sorted(j for j, ej in enumerate(edges) if j != i and ei & ej))
    return out


def central_difference(fn, x, h=1e-6, coords=None):
    """Numerical gradient of scalar ``fn`` at ``x`` (float64), optionally on a
    subset of flat coordinates."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    grad = np.zeros_like(flat)
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = fn(x)
        flat[i] = old - h
        fm = fn(x)
        flat[i] = old
        grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(x.shape)


def rel_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


# acceptance criterion -> (title, passed, detail); printed in the terminal summary
ACCEPTANCE_RESULTS: dict[int, tuple[str, bool, str]] = {}


@contextmanager
def criterion(number: int, title: str):
    """Record the outcome of one acceptance criterion.

    The body may put a short measurement string into ``notes["detail"]``.
    """
    notes = {"detail": ""}
    try:
        yield notes
    except BaseException as exc:
        reason = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        ACCEPTANCE_RESULTS[number] = (title, False, reason[:120])
        print(f"ACCEPTANCE {number:2d} FAIL  {title}: {reason[:120]}")
        raise
    ACCEPTANCE_RESULTS[number] = (title, True, notes["detail"])
    print(f"ACCEPTANCE {number:2d} PASS  {title}: {notes['detail']}")
