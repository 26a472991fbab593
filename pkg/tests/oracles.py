"""Independent reference computations used across the test suite."""

import numpy as np


def naive_softmax_row(scores, allowed):
    out = np.zeros(len(scores))
    idx = [j for j in range(len(scores)) if allowed(j)]
    if not idx:
        return out
    m = max(scores[j] for j in idx)
    z = sum(np.exp(scores[j] - m) for j in idx)
    for j in idx:
        out[j] = np.exp(scores[j] - m) / z
    return out


def naive_disentangled(x, w1, w2, w3, exclusive=True):
    """Row-by-row forward of the concatenated-residual model, one sequence."""
    length = x.shape[0]

    def allowed_for(i):
        return (lambda j: j < i) if exclusive else (lambda j: j <= i)

    def layer(h, w):
        out = np.zeros_like(h)
        for i in range(length):
            scores = np.array([h[i] @ w @ h[j] for j in range(length)])
            out[i] = naive_softmax_row(scores, allowed_for(i)) @ h
        return np.concatenate([h, out], axis=1)

    v = layer(layer(x, w1), w2)
    return v[-1] @ w3


def central_difference(f, x, h):
    """Gradient of scalar f at array x by central differences."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        up = f()
        flat[k] = old - h
        down = f()
        flat[k] = old
        out[k] = (up - down) / (2 * h)
    return grad


def closed_loss_reference(a, b, g, n):
    """Attention-weight form of the three-parameter loss.

    Layer 1 under the exclusive mask puts weight e^a / (e^a + 2N - 2) on the
    previous row for every label row; layer 2 from the query compares items
    through b; the read-out scales by g.
    """
    ea = np.exp(a)
    w_prev = ea / (ea + 2 * n - 2)
    logits = np.zeros(2 * n)
    # query row attends to the 2N pair rows; only the label row after the
    # matching item picks up b * w_prev
    logits[2 * n - 1] = b * w_prev
    p = np.exp(logits - logits.max())
    p /= p.sum()
    pred_on_target = g * p[2 * n - 1]
    pred_elsewhere = g * p[: 2 * n - 1]
    return (1 - pred_on_target) ** 2 + np.sum(pred_elsewhere**2)
