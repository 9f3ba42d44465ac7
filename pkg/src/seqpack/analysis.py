"""Statistical evaluation of completion predictions and rollout outcomes:
histogram entropy of indicator outputs, two-sample Kolmogorov-Smirnov
statistics with asymptotic p-values, success-rate tables, and stop-threshold
timing sweeps."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffcore import make_rng
from .model import PolicyNet, sample_action_chunks
from .simenv import Episode, TaskPlan

METRICS_FORMAT_VERSION = 1


def histogram_entropy(samples, bins: int = 10) -> float:
    """Shannon entropy (nats) of sample frequencies over uniform bins on [0, 1]."""
    samples = np.asarray(list(samples), dtype=np.float64)
    if samples.size == 0:
        raise ValueError("entropy requires at least one sample")
    if bins < 2:
        raise ValueError("entropy requires at least two bins")
    idx = np.minimum((samples * bins).astype(int), bins - 1)
    counts = np.bincount(idx, minlength=bins)
    q = counts[counts > 0] / samples.size
    return float(-(q * np.log(q)).sum())


def _ks_survival(lam: float) -> float:
    """Asymptotic two-sided KS survival Q(lam) = 2 sum_j (-1)^(j-1) exp(-2 j^2 lam^2),
    truncated when terms fall below 1e-12 (1.0 if the series has not converged)."""
    if lam < 1e-8:
        return 1.0
    total = 0.0
    for j in range(1, 101):
        term = 2.0 * (-1.0) ** (j - 1) * np.exp(-2.0 * j * j * lam * lam)
        total += term
        if abs(term) < 1e-12:
            return float(min(max(total, 0.0), 1.0))
    return 1.0


# Exact computation stays cheap up to roughly 200x200 samples.
KS_EXACT_LIMIT = 40000


def _ks_exact_pvalue(m: int, n: int, d: float) -> float:
    """Exact null P(D >= d) for continuous two-sample data via lattice-path
    counting: a random interleaving is a monotone path on the (m, n) grid,
    and B[i, j] below is the probability that a uniform path prefix reaching
    (i, j) kept every |i/m - j/n| strictly under d."""
    h = round(d * m * n)  # ECDF differences are integer multiples of 1/(m*n)
    if h <= 0:
        return 1.0
    prev = np.zeros(n + 1)
    prev[0] = 1.0
    for j in range(1, n + 1):
        prev[j] = prev[j - 1] if j * m < h else 0.0
    for i in range(1, m + 1):
        cur = np.zeros(n + 1)
        cur[0] = prev[0] if i * n < h else 0.0
        for j in range(1, n + 1):
            if abs(i * n - j * m) >= h:
                continue
            cur[j] = (prev[j] * i + cur[j - 1] * j) / (i + j)
        prev = cur
    return float(min(max(1.0 - prev[n], 0.0), 1.0))


def ks_two_sample(x, y) -> tuple[float, float]:
    """Two-sample KS statistic D (sup of ECDF difference over the merged
    sample) and its p-value: the exact permutation-null tail probability at
    desk-scale sizes, otherwise the asymptotic series with the small-sample
    correction lam = (sqrt(ne) + 0.12 + 0.11/sqrt(ne)) * D, ne = nx*ny/(nx+ny)."""
    x = np.sort(np.asarray(list(x), dtype=np.float64))
    y = np.sort(np.asarray(list(y), dtype=np.float64))
    if x.size == 0 or y.size == 0:
        raise ValueError("both samples must be non-empty")
    merged = np.concatenate([x, y])
    cdf_x = np.searchsorted(x, merged, side="right") / x.size
    cdf_y = np.searchsorted(y, merged, side="right") / y.size
    d = float(np.abs(cdf_x - cdf_y).max())
    if x.size * y.size <= KS_EXACT_LIMIT:
        return d, _ks_exact_pvalue(int(x.size), int(y.size), d)
    ne = x.size * y.size / (x.size + y.size)
    lam = (np.sqrt(ne) + 0.12 + 0.11 / np.sqrt(ne)) * d
    return d, _ks_survival(float(lam))


@dataclass
class PredictionTrace:
    """Ordered indicator outputs for one episode plus the ground-truth
    completion frame index (first frame labelled done)."""

    subtask_prompt_id: int
    p_values: list
    completion_index: int

    def execution_values(self) -> list:
        return self.p_values[: self.completion_index]

    def completion_values(self) -> list:
        return self.p_values[self.completion_index :]


def collect_prediction_traces(
    net: PolicyNet,
    episodes: list[Episode],
    integration_steps: int,
    seed: int = 0,
    frame_stride: int = 1,
) -> list[PredictionTrace]:
    """Replay labelled episodes through the policy's inference path (chunk
    sampling included, so p reflects generated chunks) and log p per frame."""
    rng = make_rng(seed)
    traces = []
    for ep in episodes:
        labels = [fr.label for fr in ep.frames][::frame_stride]
        if 0 not in labels or labels[0] == 0:
            continue
        contexts = np.stack([fr.observation for fr in ep.frames])[::frame_stride]
        _, ps = sample_action_chunks(net, contexts, integration_steps, rng)
        traces.append(PredictionTrace(ep.subtask_prompt_id, [float(p) for p in ps], labels.index(0)))
    return traces


def pooled_values(traces: list[PredictionTrace]) -> tuple[list, list]:
    """All indicator outputs split into execution-phase and completion-phase pools."""
    execution: list[float] = []
    completion: list[float] = []
    for tr in traces:
        execution.extend(tr.execution_values())
        completion.extend(tr.completion_values())
    return execution, completion


def success_table(records: list, plan: TaskPlan) -> dict:
    """Per-plan-position and overall oracle success rates; order-invariant."""
    if not records:
        raise ValueError("success_table requires at least one record")
    for rec in records:
        if rec.plan_name != plan.name:
            raise ValueError(
                f"record plan {rec.plan_name!r} does not match table plan {plan.name!r}"
            )
    n = len(records)
    per_position = []
    for position in range(len(plan.sequence)):
        sub = plan.subtasks[plan.sequence[position]]
        wins = 0
        for rec in records:
            hit = [r for r in rec.results if r.plan_position == position]
            if hit and hit[0].oracle_success:
                wins += 1
        per_position.append(
            {
                "position": position,
                "prompt_id": sub.prompt_id,
                "prompt": sub.prompt,
                "success_rate": wins / n,
            }
        )
    return {
        "plan": plan.name,
        "records": n,
        "per_position": per_position,
        "overall_success_rate": sum(1 for r in records if r.overall_success) / n,
        "mean_sequence_errors": float(np.mean([r.sequence_errors for r in records])),
    }


def threshold_sweep(traces: list[PredictionTrace], thresholds) -> list[dict]:
    """Signal-timing quality per stop threshold: the first sub-threshold p is
    correct when it lands at or after the ground-truth completion frame."""
    if not traces:
        raise ValueError("threshold_sweep requires at least one trace")
    rows = []
    n = len(traces)
    for theta in thresholds:
        correct = premature = never = 0
        for tr in traces:
            fire = next((i for i, p in enumerate(tr.p_values) if p < theta), None)
            if fire is None:
                never += 1
            elif fire >= tr.completion_index:
                correct += 1
            else:
                premature += 1
        rows.append(
            {
                "threshold": float(theta),
                "correct_rate": correct / n,
                "premature_rate": premature / n,
                "never_fire_rate": never / n,
            }
        )
    return rows


def compare_strategies(
    strategy_traces: dict, plan: TaskPlan, bins: int = 10, config_hash: str = ""
) -> dict:
    """Per-subtask and overall entropy plus execution-vs-completion KS for
    each strategy, and the joint-vs-sequential comparison when both exist."""
    if not strategy_traces:
        raise ValueError("no strategies to compare")
    report: dict = {
        "format_version": METRICS_FORMAT_VERSION,
        "plan": plan.name,
        "bins": bins,
        "config_hash": config_hash,
        "strategies": {},
    }
    for name, traces in strategy_traces.items():
        per_subtask = {}
        for sub in plan.subtasks:
            sub_traces = [t for t in traces if t.subtask_prompt_id == sub.prompt_id]
            if not sub_traces:
                continue
            execution, completion = pooled_values(sub_traces)
            entry = {"entropy": histogram_entropy(execution + completion, bins)}
            if execution and completion:
                d, p = ks_two_sample(execution, completion)
                entry.update({"ks_d": d, "ks_p": p})
            entry.update({"n_execution": len(execution), "n_completion": len(completion)})
            per_subtask[sub.prompt] = entry
        execution, completion = pooled_values(traces)
        overall = {"entropy": histogram_entropy(execution + completion, bins)}
        if execution and completion:
            d, p = ks_two_sample(execution, completion)
            overall.update({"ks_d": d, "ks_p": p})
        report["strategies"][name] = {"per_subtask": per_subtask, "overall": overall}
    if "J" in report["strategies"] and "S" in report["strategies"]:
        j = report["strategies"]["J"]["overall"]
        s = report["strategies"]["S"]["overall"]
        report["comparison"] = {
            "joint_entropy_below_sequential": j["entropy"] < s["entropy"],
            "joint_ks_above_sequential": j.get("ks_d", 0.0) > s.get("ks_d", 0.0),
        }
    else:
        report["comparison"] = None
    return report


def write_metrics_report(path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, sort_keys=True, indent=2), encoding="utf-8")


def write_metrics_csv(path, report: dict) -> None:
    """Flat plot-ready table: one row per (strategy, task, subtask, metric)."""
    rows = []
    task = report["plan"]
    for strategy, payload in report["strategies"].items():
        scopes = list(payload["per_subtask"].items()) + [("overall", payload["overall"])]
        for subtask, metrics in scopes:
            for metric in ("entropy", "ks_d", "ks_p"):
                if metric in metrics:
                    rows.append((strategy, task, subtask, metric, metrics[metric]))
    with Path(path).open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["strategy", "task", "subtask", "metric", "value"])
        writer.writerows(rows)
