"""Brute-force metric recomputation from raw bag predictions, written without numpy reductions."""

from __future__ import annotations

import math


def _scores(preds) -> dict[str, float]:
    bag_hits = masked_hits = inst_hits = inst_total = 0
    pos_hits = pos_total = 0
    ious, dices = [], []
    for p in preds:
        bag_hits += p.predicted == p.label
        masked_hits += p.predicted_masked == p.label
        truth = [int(v) for v in p.truth]
        guess = [int(v) for v in p.instances]
        hits = sum(g == t for g, t in zip(guess, truth))
        inst_hits += hits
        inst_total += len(truth)
        if any(truth):
            pos_hits += hits
            pos_total += len(truth)
            P = {i for i, g in enumerate(guess) if g == 1}
            T = {i for i, t in enumerate(truth) if t == 1}
            ious.append(len(P & T) / len(P | T))
            dices.append(2 * len(P & T) / (len(P) + len(T)))
    n = len(preds)
    return {
        "bag": bag_hits / n, "mbag": masked_hits / n, "inst": inst_hits / inst_total,
        "inst_pos": pos_hits / pos_total if pos_total else math.nan,
        "iou": sum(ious) / len(ious) if ious else math.nan,
        "dice": sum(dices) / len(dices) if dices else math.nan,
    }


def brute_force_summary(result) -> dict[str, float | None]:
    """Recompute the headline numbers of a ``RunResult`` from ``result.predictions``."""
    stages = max(s for s, _ in result.predictions)
    tasks = max(t for _, t in result.predictions)
    R = {key: _scores(preds) for key, preds in result.predictions.items()}

    def final(metric):
        vals = [R[(stages, l)][metric] for l in range(1, tasks + 1)]
        vals = [v for v in vals if not math.isnan(v)]
        return sum(vals) / len(vals) if vals else None

    def forget(metric):
        if stages != tasks or tasks < 2:
            return None
        gaps = []
        for l in range(1, tasks):
            peak = max(R[(n, l)][metric] for n in range(l, tasks))
            gaps.append(peak - R[(tasks, l)][metric])
        return sum(gaps) / len(gaps)

    return {
        "acc_inst": final("inst"), "forget_inst": forget("inst"), "iou": final("iou"),
        "dice": final("dice"), "acc_bag": final("bag"), "forget_bag": forget("bag"),
        "macc_bag": final("mbag"), "acc_inst_pos": final("inst_pos"),
    }


def summaries_match(result, tol: float = 1e-12) -> tuple[bool, str]:
    oracle = brute_force_summary(result)
    for key, want in oracle.items():
        got = result.summary.get(key)
        if (want is None) != (got is None):
            return False, f"{key}: {got} vs {want}"
        if want is not None and abs(got - want) > tol:
            return False, f"{key}: {got} vs {want}"
    return True, "ok"
