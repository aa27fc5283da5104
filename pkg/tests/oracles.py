"""Brute-force references written without numpy vectorization."""


def recount(truth, pred):
    tp = fp = fn = tn = 0
    for t, p in zip(truth, pred):
        if t and p:
            tp += 1
        elif p:
            fp += 1
        elif t:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def metrics_from_counts(tp, fp, fn, tn):
    prec = tp / (tp + fp) if tp + fp else None
    rec = tp / (tp + fn) if tp + fn else None
    f1 = 2 * prec * rec / (prec + rec) if prec is not None and rec is not None and prec + rec else None
    far = fp / (fp + tn) if fp + tn else None
    frr = fn / (fn + tp) if fn + tp else None
    return {"accuracy": (tp + tn) / (tp + fp + fn + tn), "precision": prec, "recall": rec, "f1": f1,
            "far": far, "frr": frr}


def eer_exhaustive(pos, neg):
    """EER at the threshold minimizing |FAR - FRR| over scores, midpoints and ±inf.

    Returns (eer, cell) with cell = max(1/len(pos), 1/len(neg)), the width of
    one sweep step in either rate.
    """
    u = sorted(set(pos) | set(neg))
    cands = [float("-inf"), float("inf")] + u + [(a + b) / 2 for a, b in zip(u, u[1:])]
    best = None
    for t in cands:
        far = sum(s >= t for s in neg) / len(neg)
        frr = sum(s < t for s in pos) / len(pos)
        key = abs(far - frr)
        if best is None or key < best[0]:
            best = (key, (far + frr) / 2)
    return best[1], max(1 / len(pos), 1 / len(neg))
