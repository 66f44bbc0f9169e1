import numpy as np

from globalvol import diffcore as dc
from globalvol.training import sequence_nll


def model_loss(model, y):
    return sequence_nll(model.forward(y[:, None])[:, 0], y)


def max_rel_grad_error(model, y, eps=1e-6, floor=1e-5, order=2):
    """Largest |analytic - central difference| / max(|a|, |n|, floor) over all weights."""
    dc.zero_grad(model.parameters())
    dc.backward(model_loss(model, y))
    worst = 0.0
    for p in model.parameters():
        a = p.grad.copy()
        with dc.no_grad():
            n = dc.numeric_grad(lambda: model_loss(model, y).item(), p, eps=eps, order=order)
        rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(rel.max()))
    return worst
