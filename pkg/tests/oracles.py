"""Independent reference computations used by the tests.

Nothing here imports the autodiff engine: each function is written directly
in numpy (or plain Python) from the defining formulas.
"""

import math

import numpy as np


def attention(q, k, k_valid):
    d = q.shape[1]
    out = np.zeros_like(q)
    for i in range(q.shape[0]):
        logits = [float(q[i] @ k[j]) / math.sqrt(d) for j in range(k_valid)]
        top = max(logits)
        w = [math.exp(x - top) for x in logits]
        s = sum(w)
        for j in range(k_valid):
            out[i] += (w[j] / s) * k[j]
    return out


def submult(a, b):
    return np.concatenate([a, b, a - b, a * b], axis=-1)


def aggregate(x, valid):
    rows = x[:valid]
    return np.concatenate([x[0], rows.max(axis=0), rows.mean(axis=0)])


def enhanced_score(c, c_valid, r, r_valid, w):
    """Cross attention, CLS/max/mean aggregation, final comparison and MLP."""
    if "W1" in w:
        c_hat = submult(c, attention(c, r, r_valid)) @ w["W1"]
        r_hat = submult(r, attention(r, c, c_valid)) @ w["W1"]
    else:
        c_hat, r_hat = c, r
    c_bar = aggregate(c_hat, c_valid)
    r_bar = aggregate(r_hat, r_valid)
    compared = submult(c_bar, r_bar) if w["W_proj"].shape[0] == 4 * c_bar.size else np.concatenate([c_bar, r_bar])
    hidden = compared @ w["W_proj"] + w.get("b_proj", 0.0)
    hidden = np.maximum(hidden, 0.0)
    return float((hidden @ w["w_out"]).item() + np.sum(w.get("b_out", 0.0)))


def rank_by_sorting(scores, gold):
    """1-based rank via a stable sort on (-score, index)."""
    order = sorted(range(len(scores)), key=lambda j: (-scores[j], j))
    return order.index(gold) + 1


def _betacf(a, b, x, max_iter=500, eps=1e-16):
    # Lentz continued fraction for the regularized incomplete beta
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            break
    return h


def incomplete_beta(a, b, x):
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log(1.0 - x)
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def incomplete_beta_series(a, b, x, terms=4000):
    """Power series I_x(a, b) = x^a (1-x)^b / (a B(a,b)) * sum_n B(a+1,n+1)/B(a+b,n+1) x^n."""
    ln_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log(1.0 - x)
    total, term = 1.0, 1.0
    for n in range(terms):
        term *= (a + b + n) / (a + 1.0 + n) * x
        total += term
        if term < 1e-18 * total:
            break
    return math.exp(ln_front) * total / a


def paired_t_pvalue(a, b, series=False):
    diff = [x - y for x, y in zip(a, b)]
    n = len(diff)
    mean = sum(diff) / n
    var = sum((x - mean) ** 2 for x in diff) / (n - 1)
    t = mean / math.sqrt(var / n)
    df = n - 1
    x = df / (df + t * t)
    ib = incomplete_beta_series if series else incomplete_beta
    return ib(df / 2.0, 0.5, x)
