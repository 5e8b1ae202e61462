"""Straight-line float reference implementations used as test oracles.

Plain Python lists and ``math`` only, so they share no code path with the
torch implementations they check.
"""

import math

FLOOR = 1e-12


def softmax(row, T=1.0):
    m = max(row)
    e = [math.exp((v - m) / T) for v in row]
    s = sum(e)
    return [v / s for v in e]


def cross_entropy(p, q):
    """-sum p log q with the probability floor."""
    return -sum(pi * math.log(max(qi, FLOOR)) for pi, qi in zip(p, q))


def one_hot_loss(prob_rows):
    total = 0.0
    for row in prob_rows:
        k = max(range(len(row)), key=lambda i: row[i])
        total += -math.log(max(row[k], FLOOR))
    return total / len(prob_rows)


def class_diversity_loss(prob_rows):
    n, k = len(prob_rows), len(prob_rows[0])
    mean = [sum(r[j] for r in prob_rows) / n for j in range(k)]
    return sum(m * math.log(max(m, FLOOR)) for m in mean)


def l2(a, b):
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))


def bn_alignment_loss(batch_stats, stored):
    return sum(l2(bm, sm) + l2(bv, sv) for (bm, bv), (sm, sv) in zip(batch_stats, stored))


def kl(p, q):
    return sum(pi * (math.log(max(pi, FLOOR)) - math.log(max(qi, FLOOR))) for pi, qi in zip(p, q))


def pair_diversity(prob_rows, pairs):
    vals = [-0.5 * (kl(prob_rows[i], prob_rows[j]) + kl(prob_rows[j], prob_rows[i])) for i, j in pairs]
    return sum(vals) / len(vals)


def ce_logits(logit_rows, labels):
    total = 0.0
    for row, y in zip(logit_rows, labels):
        total += -math.log(softmax(row)[y])
    return total / len(logit_rows)


def kd(teacher_rows, student_rows, T):
    total = 0.0
    for t, s in zip(teacher_rows, student_rows):
        total += cross_entropy(softmax(t, T), softmax(s, T))
    return total / len(teacher_rows)


def entropy(p):
    return -sum(x * math.log(x) for x in p if x > 0)
