"""Per-round metrics and CSV emission.

Accuracies are fractions internally and percentages in the CSV; the
standard deviation column follows the x100 reporting convention
(population std of the fractions times 100, i.e. the std of the
percentage values).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


@dataclass
class RoundMetrics:
    round_index: int
    accuracies: list[float]          # NaN marks a client without a test shard
    mean: float
    std_x100: float
    lowest: float
    eff_params: list[int]            # effective trainable-adapter params per client
    cum_bytes: int                   # uplink + downlink so far

    @classmethod
    def from_accuracies(cls, round_index: int, accuracies: list[float],
                        eff_params: list[int], cum_bytes: int) -> "RoundMetrics":
        valid = [a for a in accuracies if not math.isnan(a)]
        mean, std100, lowest = summarize(valid)
        return cls(round_index, list(accuracies), mean, std100, lowest,
                   list(eff_params), cum_bytes)


def summarize(accs) -> tuple[float, float, float]:
    """(mean, population std x 100, minimum) of a per-client accuracy vector."""
    accs = np.asarray(accs, dtype=np.float64)
    if accs.size == 0:
        raise ContractError("summarize of an empty accuracy vector")
    return float(accs.mean()), float(accs.std() * 100.0), float(accs.min())


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def emit_csv(log: list[RoundMetrics], path) -> None:
    """One header row, then one row per round; accuracies in percent."""
    n_clients = len(log[0].accuracies) if log else 0
    columns = ["round", "mean_acc", "std_x100", "lowest_acc"]
    columns += [f"acc_client_{i}" for i in range(n_clients)]
    columns += ["eff_params_mean", "cum_bytes"]
    lines = [",".join(columns)]
    for rm in log:
        row = [str(rm.round_index), _fmt(100.0 * rm.mean), _fmt(rm.std_x100),
               _fmt(100.0 * rm.lowest)]
        row += [_fmt(100.0 * a) for a in rm.accuracies]
        row += [_fmt(float(np.mean(rm.eff_params))), str(rm.cum_bytes)]
        lines.append(",".join(row))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def emit_plot_csv(logs: dict[str, list[RoundMetrics]], path) -> None:
    """Companion plot data: mode, round, mean accuracy (percent) per row."""
    lines = ["mode,round,mean_acc"]
    for mode in sorted(logs):
        for rm in logs[mode]:
            lines.append(f"{mode},{rm.round_index},{_fmt(100.0 * rm.mean)}")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(lines) + "\n")
