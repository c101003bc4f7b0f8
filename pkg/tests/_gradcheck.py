"""Central finite-difference checks for autograd ops."""
import numpy as np

from pidi import autograd as ag


def numeric_grad(f, arrays, idx, coords, eps=1e-6):
    """d f / d arrays[idx] at the given flat coordinates."""
    a = arrays[idx]
    out = []
    for c in coords:
        old = a.flat[c]
        a.flat[c] = old + eps
        hi = f(arrays)
        a.flat[c] = old - eps
        lo = f(arrays)
        a.flat[c] = old
        out.append((hi - lo) / (2 * eps))
    return np.array(out)


def check_op(op, arrays, rng, max_coords=12, eps=1e-6):
    """Largest relative error over every input of ``op(*vars) -> Var`` (float64 inputs).

    The scalar objective is ``sum(op(...) * R)`` for a fixed random ``R``.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = op(*[ag.constant(a) for a in arrays])
    r = rng.normal(size=probe.shape)

    def objective(arrs):
        return float(np.sum(op(*[ag.constant(a) for a in arrs]).data * r))

    vars_ = [ag.parameter(a) for a in arrays]
    out = op(*vars_)
    out.backward(r)
    worst = 0.0
    for i, v in enumerate(vars_):
        n = v.data.size
        coords = rng.choice(n, size=min(n, max_coords), replace=False)
        num = numeric_grad(objective, arrays, i, coords, eps)
        ana = np.zeros(n) if v.grad is None else np.asarray(v.grad).ravel()[coords]
        denom = max(np.linalg.norm(num) + np.linalg.norm(ana), 1e-8)
        worst = max(worst, float(np.linalg.norm(num - ana) / denom))
    return worst


def as_float64(module):
    """Cast every parameter and buffer of a module to float64 in place."""
    for _, p in module.named_parameters():
        p.data = p.data.astype(np.float64)
    for m in module.modules():
        for k, b in list(m._buffers.items()):
            nb = np.asarray(b, dtype=np.float64)
            m._buffers[k] = nb
            object.__setattr__(m, k, nb)
    return module
