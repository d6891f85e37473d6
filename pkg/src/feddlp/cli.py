"""Command-line entry point: run experiments, verify gradients, inspect
partitions.

Exit codes: 0 success, 1 verification failure, 2 usage/config error,
3 IO/format error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .adapter import init_adapter
from .config import RunConfig, load_config, manifest
from .data import class_histogram, dirichlet_partition, max_class_share
from .errors import ConfigError, FedDlpError, FormatError
from .federation import build_dataset, run_experiment
from .metrics import emit_csv, emit_plot_csv
from .model import FrozenHead, local_loss, global_loss
from . import seeding

logger = logging.getLogger(__name__)

GRAD_TOLERANCE = 1e-4
GRAD_ABS_FLOOR = 1e-6


def cmd_run(config_path: str, out_dir: str) -> int:
    cfg = load_config(config_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    server = run_experiment(cfg)
    emit_csv(server.log, out / "metrics.csv")
    emit_plot_csv({cfg.mode: server.log}, out / "plot.csv")
    (out / "manifest.json").write_text(manifest(cfg), encoding="utf-8")
    final = server.log[-1]
    print(f"{cfg.mode}: {cfg.rounds} rounds | final mean acc "
          f"{100.0 * final.mean:.2f}% | lowest {100.0 * final.lowest:.2f}% | "
          f"{final.cum_bytes / 1e6:.2f} MB transferred")
    print(f"wrote {out / 'metrics.csv'}")
    return 0


def _finite_diff(loss_fn, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar loss w.r.t. an array, in place."""
    grad = np.zeros_like(arr)
    flat, gflat = arr.ravel(), grad.ravel()
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        up = loss_fn()
        flat[i] = saved - h
        down = loss_fn()
        flat[i] = saved
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.maximum(np.abs(numeric), GRAD_ABS_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / scale))


def gradcheck_instances(seed: int, trials: int, corrupt: bool = False) -> float:
    """Max relative error of analytic vs central-difference gradients over
    random small instances of both adapter losses."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        d = int(rng.integers(2, 9))
        k = int(rng.integers(2, 6))
        rank = int(rng.integers(1, 4))
        head = FrozenHead(rng.standard_normal((d, d)),
                          rng.standard_normal((k, d)) + 0.1,
                          float(rng.uniform(0.3, 2.0)))
        student = init_adapter(rank, d, d, with_gate=True, seed=int(rng.integers(2**31)))
        teacher = init_adapter(rank, d, d, with_gate=False, seed=int(rng.integers(2**31)))
        for ad in (student, teacher):
            ad.down[:] = rng.standard_normal(ad.down.shape)
            ad.up[:] = rng.standard_normal(ad.up.shape)
        student.gate[:] = rng.uniform(-1.5, 1.5, student.gate.shape)
        x = rng.standard_normal(d)
        y = int(rng.integers(k))
        alpha = float(rng.choice([0.0, 0.5, 2.0]))

        cases = [
            (student, lambda: local_loss(head, student, teacher, x, y, alpha)),
            (teacher, lambda: global_loss(head, teacher, student, x, y)),
        ]
        for adapter_under_test, call in cases:
            _, grads = call()
            pairs = [(grads.d_down, adapter_under_test.down),
                     (grads.d_up, adapter_under_test.up)]
            if adapter_under_test.gate is not None:
                pairs.append((grads.d_gate, adapter_under_test.gate))
            for analytic, arr in pairs:
                if corrupt:
                    analytic = 1.5 * analytic + 0.1
                numeric = _finite_diff(lambda: call()[0], arr)
                worst = max(worst, _rel_err(analytic, numeric))
    return worst


def cmd_gradcheck(seed: int, trials: int, corrupt: bool = False) -> int:
    if trials < 1:
        raise ConfigError(f"trials must be >= 1, got {trials}")
    worst = gradcheck_instances(seed, trials, corrupt)
    status = "OK" if worst < GRAD_TOLERANCE else "FAIL"
    print(f"gradcheck {status}: max relative error {worst:.3e} over {trials} "
          f"trials (tolerance {GRAD_TOLERANCE:.0e})")
    return 0 if worst < GRAD_TOLERANCE else 1


def cmd_partition_inspect(config_path: str) -> int:
    cfg = load_config(config_path)
    dataset = build_dataset(cfg)
    partition = dirichlet_partition(dataset.labels, cfg.n_clients, cfg.beta,
                                    seeding.derive_seed(cfg.seed, seeding.PARTITION))
    hist = class_histogram(partition, dataset.labels, dataset.k)
    print(f"beta={cfg.beta} seed={cfg.seed} n={dataset.n} k={dataset.k} "
          f"clients={cfg.n_clients}")
    for cid, counts in enumerate(hist):
        total = int(counts.sum())
        share = counts.max() / total if total else float("nan")
        print(f"client {cid}: n={total:5d} | " +
              " ".join(f"{c:4d}" for c in counts) +
              f" | max share {share:.3f}")
    print(f"heterogeneity (mean max class share): "
          f"{max_class_share(partition, dataset.labels):.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="feddlp",
        description="Deterministic federated dual-adapter simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a configured experiment")
    p_run.add_argument("config", help="flat key=value config file")
    p_run.add_argument("--out", default="out", help="output directory (default: out)")

    p_grad = sub.add_parser("gradcheck", help="verify analytic gradients")
    p_grad.add_argument("--trials", type=int, default=100)
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--corrupt", action="store_true",
                        help="perturb one gradient to self-test the checker")

    p_part = sub.add_parser("partition-inspect",
                            help="print per-client class histograms")
    p_part.add_argument("config", help="flat key=value config file")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.command == "run":
            return cmd_run(args.config, args.out)
        if args.command == "gradcheck":
            return cmd_gradcheck(args.seed, args.trials, args.corrupt)
        return cmd_partition_inspect(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 3
    except FedDlpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
