"""Quadratic-time reference implementations of AUROC and AUPR."""


def auroc_pairs(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def aupr_thresholds(scores, labels):
    n_pos = sum(labels)
    out, prev_recall = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        hit = [y for s, y in zip(scores, labels) if s >= t]
        tp = sum(hit)
        recall = tp / n_pos
        out += (tp / len(hit)) * (recall - prev_recall)
        prev_recall = recall
    return out
