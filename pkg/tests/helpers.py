"""Numeric helpers and naive per-pair oracles used across the test modules."""

import math

import numpy as np


def unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def numeric_grad(f, x: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """
    Five-point central differences of scalar f at x, perturbing x in place.

    Truncation error is O(eps^4), so a relative tolerance of 1e-5 holds even at
    tau = 0.1 where third derivatives are large.
    """
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        values = []
        for step in (2, 1, -1, -2):
            x[idx] = orig + step * eps
            values.append(f(x))
        x[idx] = orig
        up2, up1, down1, down2 = values
        grad[idx] = (8 * (up1 - down1) - (up2 - down2)) / (12 * eps)
    return grad


def assert_grad_close(analytic: np.ndarray, numeric: np.ndarray, rtol: float = 1e-5, atol: float = 1e-8) -> None:
    """Elementwise |a - n| <= rtol * max(|a|, |n|) + atol; atol only matters for entries near zero."""
    diff = np.abs(analytic - numeric)
    bound = rtol * np.maximum(np.abs(analytic), np.abs(numeric)) + atol
    worst = np.unravel_index(np.argmax(diff - bound), diff.shape)
    assert np.all(diff <= bound), (
        f"gradient mismatch at {worst}: analytic={analytic[worst]:.10e}, numeric={numeric[worst]:.10e}"
    )


# Oracles: plain python loops, one pair at a time

def _dot(a, b) -> float:
    return float(sum(float(x) * float(y) for x, y in zip(a, b)))


def _lse(values) -> float:
    m = max(values)
    return m + math.log(sum(math.exp(v - m) for v in values))


def naive_positive_sets(cluster, sensitive):
    n = len(cluster)
    return [
        {j for j in range(n) if j != i and cluster[j] == cluster[i] and sensitive[j] != sensitive[i]}
        for i in range(n)
    ]


def naive_queue_positive_sets(cluster, sensitive, q_cluster, q_sensitive):
    return [
        {j for j in range(len(q_cluster)) if q_cluster[j] == cluster[i] and q_sensitive[j] != sensitive[i]}
        for i in range(len(cluster))
    ]


def naive_within(z, cluster, sensitive, tau) -> float:
    n = len(z)
    positives = naive_positive_sets(cluster, sensitive)
    per_anchor = []
    for i in range(n):
        if not positives[i]:
            continue
        denom = _lse([_dot(z[i], z[k]) / tau for k in range(n) if k != i])
        terms = [denom - _dot(z[i], z[j]) / tau for j in sorted(positives[i])]
        per_anchor.append(sum(terms) / len(terms))
    return sum(per_anchor) / len(per_anchor) if per_anchor else 0.0


def naive_cross(z, cluster, sensitive, qz, q_cluster, q_sensitive, tau) -> float:
    positives = naive_queue_positive_sets(cluster, sensitive, q_cluster, q_sensitive)
    per_anchor = []
    for i in range(len(z)):
        if not positives[i]:
            continue
        denom = _lse([_dot(z[i], qz[k]) / tau for k in range(len(qz))])
        terms = [denom - _dot(z[i], qz[j]) / tau for j in sorted(positives[i])]
        per_anchor.append(sum(terms) / len(terms))
    return sum(per_anchor) / len(per_anchor) if per_anchor else 0.0


def naive_supcon(z, labels, tau) -> float:
    n = len(z)
    per_anchor = []
    for i in range(n):
        positives = [j for j in range(n) if j != i and labels[j] == labels[i]]
        if not positives:
            continue
        denom = _lse([_dot(z[i], z[k]) / tau for k in range(n) if k != i])
        per_anchor.append(sum(denom - _dot(z[i], z[j]) / tau for j in positives) / len(positives))
    return sum(per_anchor) / len(per_anchor) if per_anchor else 0.0


def naive_simclr(z, tau) -> float:
    half = len(z) // 2
    # each row's only "label" match is its other view
    labels = list(range(half)) + list(range(half))
    return naive_supcon(z, labels, tau)
