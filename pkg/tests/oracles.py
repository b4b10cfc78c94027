"""Slow, obviously-correct reference implementations used by the test suite."""

import itertools
from fractions import Fraction


def brute_confusion(y_true, y_pred):
    cm = [[0, 0, 0] for _ in range(3)]
    for t, p in zip(y_true, y_pred):
        cm[int(t)][int(p)] += 1
    return cm


def brute_balanced_accuracy(y_true, y_pred):
    recalls = []
    for c in range(3):
        idx = [i for i, t in enumerate(y_true) if t == c]
        hits = sum(1 for i in idx if y_pred[i] == c)
        recalls.append(Fraction(hits, len(idx)))
    return float(sum(recalls) / 3)


def brute_auroc(scores, labels):
    """Exhaustive pair counting: wins + half ties over all positive/negative pairs."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = Fraction(0)
    for p, n in itertools.product(pos, neg):
        total += 1 if p > n else Fraction(1, 2) if p == n else 0
    return float(total / (len(pos) * len(neg)))


class ListQueue:
    """FIFO of fixed capacity kept as a plain list, oldest first."""

    def __init__(self, items, capacity):
        self.items = [list(x) for x in items]
        self.capacity = capacity

    def push(self, rows):
        for r in rows:
            self.items.append(list(r))
        self.items = self.items[-self.capacity:]
