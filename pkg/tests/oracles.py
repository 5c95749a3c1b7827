"""Brute-force metric oracles shared by the unit and acceptance suites."""

import numpy as np


def brute_confusion(s, y, thr=0.5):
    tp = fp = tn = fn = 0
    for si, yi in zip(s, y):
        p = si >= thr
        if p and yi:
            tp += 1
        elif p:
            fp += 1
        elif yi:
            fn += 1
        else:
            tn += 1
    return tp, fp, tn, fn


def brute_metrics(s, y, thr=0.5):
    tp, fp, tn, fn = brute_confusion(s, y, thr)
    n = len(s)
    out = {"ACC": 100.0 * (tp + tn) / n}
    P, N = tp + fn, tn + fp
    if P:
        out["Recall"] = 100.0 * tp / P
        out["F1"] = 0.0 if tp == 0 else 100.0 * 2 * tp / (2 * tp + fp + fn)
        # precision at the stable descending rank of every positive
        precs = []
        for i in range(n):
            if not y[i]:
                continue
            above = [j for j in range(n) if s[j] > s[i] or (s[j] == s[i] and j <= i)]
            precs.append(sum(1 for j in above if y[j]) / len(above))
        out["AP"] = 100.0 * sum(precs) / len(precs)
    if P and N:
        wins = 0.0
        for i in range(n):
            for j in range(n):
                if y[i] and not y[j]:
                    wins += 1.0 if s[i] > s[j] else 0.5 if s[i] == s[j] else 0.0
        out["AUC"] = 100.0 * wins / (P * N)
        out["bACC"] = 50.0 * (tp / P + tn / N)
    return out


def random_instance(rng, n_max=100):
    n = int(rng.integers(2, n_max + 1))
    y = rng.random(n) < rng.uniform(0.2, 0.8)
    if y.all() or not y.any():
        y[0] = not y[0]
    # coarse scores so ties occur
    s = np.round(rng.random(n), int(rng.integers(1, 4)))
    return s, y
