"""Scalar reference implementations: plain Python floats, no torch."""

import math


def softmax_ce(logits, label):
    m = max(logits)
    lse = m + math.log(sum(math.exp(z - m) for z in logits))
    return lse - logits[label]


def mean_ce(rows, labels):
    return sum(softmax_ce(list(r), int(y)) for r, y in zip(rows, labels)) / len(rows)


def bce_logit(z, target):
    # -[t log s(z) + (1-t) log(1 - s(z))], written stably
    return max(z, 0.0) - z * target + math.log1p(math.exp(-abs(z)))


def consistency(real, fake):
    terms = [bce_logit(z, 1.0) for z in real] + [bce_logit(z, 0.0) for z in fake]
    return sum(terms) / len(terms)


def flat(x):
    if isinstance(x, (list, tuple)):
        out = []
        for v in x:
            out.extend(flat(v))
        return out
    return [float(x)]


def mean_abs_diff(a, b):
    fa, fb = flat(a), flat(b)
    assert len(fa) == len(fb)
    s = 0.0
    for u, v in zip(fa, fb):
        s += abs(u - v)
    return s / len(fa)


def feature_match(stack_a, stack_b, omega):
    return sum(w * mean_abs_diff(a, b) for w, a, b in zip(omega, stack_a, stack_b))


def central_difference(f, x, h=1e-6):
    """Numerical gradient of scalar ``f`` at the flat list ``x``."""
    grad = []
    for i in range(len(x)):
        up = list(x)
        dn = list(x)
        up[i] += h
        dn[i] -= h
        grad.append((f(up) - f(dn)) / (2 * h))
    return grad


def max_relative_error(analytic, numeric, floor=1e-8):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = max(abs(a), abs(n), floor)
        worst = max(worst, abs(a - n) / denom if denom > 1e-6 else abs(a - n))
    return worst
