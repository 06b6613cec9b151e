"""Straight-line reference evaluations in plain Python (no numpy, no graph code)."""

import math


def ntn_truth(params, v):
    W, V, u, b = params["W"], params["V"], params["u"], params["b"]
    s = 0.0
    for k in range(len(u)):
        q = b
        for i in range(len(v)):
            q += V[k][i] * v[i]
            for j in range(len(v)):
                q += v[i] * W[k][i][j] * v[j]
        s += u[k] * math.tanh(q)
    return 1.0 / (1.0 + math.exp(-s))


def focal_term(x, gamma):
    return -((1.0 - x) ** gamma) * math.log(max(x, 1e-7))


def sum_squares(params):
    total = 0.0
    for arr in params.values():
        stack = [arr]
        while stack:
            a = stack.pop()
            if isinstance(a, list):
                stack.extend(a)
            else:
                total += a * a
    return total


def small_theory_loss(pa, pb, c1, c2, c3, gamma, lambda_l2):
    """Loss of the theory

        axiom A(C1) & B(C2) -> A(C3)
        axiom forall x: A(x) -> ~B(x)      (x over C1, C2, C3)

    with Lukasiewicz connectives, one focal log-product per axiom and an L2
    term over both predicates.
    """
    a = {name: ntn_truth(pa, v) for name, v in (("C1", c1), ("C2", c2), ("C3", c3))}
    b = {name: ntn_truth(pb, v) for name, v in (("C1", c1), ("C2", c2), ("C3", c3))}
    antecedent = max(0.0, a["C1"] + b["C2"] - 1.0)
    ax1 = min(1.0, 1.0 - antecedent + a["C3"])
    loss1 = focal_term(ax1, gamma)
    loss2 = 0.0
    for c in ("C1", "C2", "C3"):
        x = min(1.0, 1.0 - a[c] + (1.0 - b[c]))
        loss2 += focal_term(x, gamma)
    return loss1 + loss2 + lambda_l2 * (sum_squares(pa) + sum_squares(pb))
