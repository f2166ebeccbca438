"""Central finite-difference oracle for tape gradients."""

import numpy as np

from .autodiff import GradTape, NonFiniteError, no_grad, record


def fd_check(f, params, h=1e-4, max_entries_per_param=None, seed=0):
    """Compare tape gradients of f() against central differences.

    f must be a deterministic scalar function of the tensors in `params`
    (a name -> Tensor mapping). Every parameter entry is probed unless
    max_entries_per_param caps it, in which case a seeded subset of
    entries per tensor is used. Returns (max_rel_err, per_param dict).

    Relative error per entry is |fd - ad| / max(|fd|, |ad|, 1e-8).
    """
    for p in params.values():
        p.grad = None
    tape = GradTape()
    with record(tape):
        loss = f()
    if not np.isfinite(loss.data):
        raise NonFiniteError("fd_check: loss is non-finite at the base point")
    tape.backward(loss)
    grads = {}
    for name, p in params.items():
        grads[name] = np.zeros_like(p.data) if p.grad is None else p.grad.copy()

    rng = np.random.default_rng(seed)
    report = {}
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        gflat = grads[name].reshape(-1)
        if max_entries_per_param is None or flat.size <= max_entries_per_param:
            entries = np.arange(flat.size)
        else:
            entries = rng.choice(flat.size, size=max_entries_per_param, replace=False)
        param_worst = 0.0
        for idx in entries:
            orig = flat[idx]
            flat[idx] = orig + h
            with no_grad():
                f_plus = float(f().data)
            flat[idx] = orig - h
            with no_grad():
                f_minus = float(f().data)
            flat[idx] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFiniteError(f"fd_check: non-finite loss probing {name}[{idx}]")
            fd = (f_plus - f_minus) / (2.0 * h)
            ad = gflat[idx]
            rel = abs(fd - ad) / max(abs(fd), abs(ad), 1e-8)
            param_worst = max(param_worst, rel)
        report[name] = param_worst
        worst = max(worst, param_worst)
    return worst, report
