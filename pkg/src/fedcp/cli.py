"""Command-line entry points: generate, run, evaluate, budget.

Exit codes: 0 success/converged, 2 epoch or budget limit reached,
1 any error.
"""

import argparse
import math
import os
import sys
from dataclasses import dataclass

from . import data
from .errors import ConfigError
from .federation import RunResult, run_experiment
from .privacy import PrivacyParams, compose_serial, rho_for_target, zcdp_to_dp, zcdp_to_dp_approx
from .solver import SolverParams
from .tensor import FactorizationResult, fms_report, zero_column_count

CSV_HEADER = "epoch,rmse,comm_bytes,comm_seconds,rho_total,eps_exact,eps_approx"


@dataclass
class RunReport:
    """What a run prints: config echo, per-epoch rows, and the final budget."""

    config: data.ExperimentConfig
    result: RunResult
    zero_columns: list
    fms_vs_reference: float | None = None

    def lines(self):
        cfg = self.config
        yield (
            f"run: sites={cfg.sites} rank={cfg.rank} eta={cfg.eta} gamma={cfg.gamma} "
            f"mu={cfg.mu} tau={cfg.tau} clip={cfg.clip} rho={cfg.rho} delta={cfg.delta} "
            f"seed={cfg.seed}"
        )
        yield CSV_HEADER
        for m in self.result.metrics:
            yield _csv_row(m)
        total = self.result.accountant.rho_total
        eps_exact, eps_approx = self.result.accountant.epsilon()
        yield (
            f"total: epochs={len(self.result.metrics)} converged={self.result.converged} "
            f"rho_total={total!r} eps_exact={eps_exact!r} eps_approx={eps_approx!r} "
            f"delta={cfg.delta!r}"
        )
        yield "zero_columns_per_site: " + " ".join(
            f"{t}:{z}" for t, z in enumerate(self.zero_columns)
        )
        if self.fms_vs_reference is not None:
            yield f"fms_vs_reference={self.fms_vs_reference!r}"


def _csv_row(m) -> str:
    return (
        f"{m.epoch},{m.rmse!r},{m.comm_bytes},{m.comm_seconds!r},"
        f"{m.rho_total!r},{m.eps_exact!r},{m.eps_approx!r}"
    )


def write_metrics_csv(metrics, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(CSV_HEADER + "\n")
        for m in metrics:
            fh.write(_csv_row(m) + "\n")


def cmd_generate(cfg: data.ExperimentConfig) -> int:
    spec = data.SynthSpec(
        dims=cfg.dims,
        rank_true=cfg.rank_true,
        sparsity=cfg.sparsity,
        n_sites=cfg.sites,
        heterogeneity=cfg.heterogeneity,
        seed=cfg.seed,
        value_noise_std=cfg.value_noise_std,
        shuffle_rows=cfg.shuffle_rows,
    )
    tensor, shards, truths = data.generate_synthetic(spec)
    os.makedirs(cfg.data_dir, exist_ok=True)
    data.write_coo(tensor, cfg.tensor_path())
    print(f"global: {tensor.nnz} entries -> {cfg.tensor_path()}")
    for t, (shard, truth) in enumerate(zip(shards, truths)):
        data.write_coo(shard, cfg.shard_path(t))
        data.write_factors(truth, cfg.truth_path(t))
        print(f"shard {t}: {shard.nnz} entries -> {cfg.shard_path(t)}")
    return 0


def cmd_run(cfg: data.ExperimentConfig) -> int:
    tensor = data.read_coo(cfg.tensor_path())
    if cfg.shuffle_rows:
        tensor = data.permute_rows(tensor, cfg.seed)
    shards = data.partition_rows(tensor, cfg.sites)
    result = run_experiment(
        shards,
        rank=cfg.rank,
        params=SolverParams(
            eta=cfg.eta,
            gamma=cfg.gamma,
            mu=cfg.mu,
            tau=cfg.tau,
            clip=cfg.clip,
            prox_threshold=cfg.prox_threshold,
        ),
        priv=PrivacyParams(rho=cfg.rho, delta=cfg.delta),
        seed=cfg.seed,
        max_epochs=cfg.max_epochs,
        tol=cfg.tol,
        transfer_rate=cfg.transfer_rate,
        fixed_epochs=cfg.fixed_epochs,
    )
    write_metrics_csv(result.metrics, cfg.metrics_csv)

    os.makedirs(cfg.factors_out, exist_ok=True)
    for site in result.sites:
        data.write_factors(
            FactorizationResult(site.A, site.B, site.C),
            os.path.join(cfg.factors_out, f"site_{site.site_id}.factors"),
        )

    reference_fms = None
    if cfg.reference_factors is not None:
        scores = []
        for site in result.sites:
            ref = data.read_factors(
                os.path.join(cfg.reference_factors, f"site_{site.site_id}.factors")
            )
            mine = FactorizationResult(site.A, site.B, site.C)
            scores.append(fms_report(mine, ref).score)
        reference_fms = sum(scores) / len(scores)

    report = RunReport(
        config=cfg,
        result=result,
        zero_columns=[zero_column_count(s.A) for s in result.sites],
        fms_vs_reference=reference_fms,
    )
    for line in report.lines():
        print(line)
    return 0 if result.converged else 2


def cmd_evaluate(path_a, path_b) -> int:
    x = data.read_factors(path_a)
    y = data.read_factors(path_b)
    report = fms_report(x, y)
    print(f"fms={report.score!r}")
    print("permutation: " + " ".join(str(int(p)) for p in report.permutation))
    for r in range(x.rank):
        xi, xi_bar = float(report.weights_x[r]), float(report.weights_y[r])
        ratio = xi / xi_bar if xi_bar > 0 else math.inf
        flag = " zero-column" if xi == 0 or xi_bar == 0 else ""
        print(
            f"column {r}: match={int(report.permutation[r])} "
            f"cosine_product={float(report.cosine_products[r])!r} "
            f"lambda={xi!r} lambda_ref={xi_bar!r} ratio={ratio!r}{flag}"
        )
    return 0


def cmd_budget(epsilon, rho, delta, epochs) -> int:
    if (epsilon is None) == (rho is None):
        print("budget: give exactly one of --epsilon or --rho", file=sys.stderr)
        return 1
    if not 0 < delta < 1:
        print(f"budget: delta must lie in (0, 1), got {delta}", file=sys.stderr)
        return 1
    if epochs < 1:
        print("budget: --epochs must be at least 1", file=sys.stderr)
        return 1
    if epsilon is not None:
        rho = rho_for_target(epsilon, delta, epochs)
        print(f"rho_b={rho!r}")
    for e in range(1, epochs + 1):
        total = compose_serial([rho] * (2 * e))
        print(
            f"epoch={e} rho_total={total!r} eps_exact={zcdp_to_dp(total, delta)!r} "
            f"eps_approx={zcdp_to_dp_approx(total, delta)!r} delta={delta!r}"
        )
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedcp",
        description="Collaborative sparse CP factorization with private uploads.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic tensor, shards, and truth factors")
    gen.add_argument("--config", required=True)
    gen.add_argument("--seed", type=int, default=None)

    run = sub.add_parser("run", help="run the federated factorization")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--no-noise", action="store_true", help="disable upload perturbation")
    run.add_argument("--fixed-epochs", type=int, default=None, help="run exactly E epochs")
    run.add_argument(
        "--shuffle-rows", action="store_true",
        help="permute patient rows before partitioning (IID shards)",
    )

    ev = sub.add_parser("evaluate", help="factor match score between two factor files")
    ev.add_argument("factors_a")
    ev.add_argument("factors_b")

    bud = sub.add_parser("budget", help="budget calculator")
    bud.add_argument("--epsilon", type=float, default=None)
    bud.add_argument("--rho", type=float, default=None)
    bud.add_argument("--delta", type=float, default=1e-4)
    bud.add_argument("--epochs", type=int, default=20)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "generate":
            cfg = _load(args)
            return cmd_generate(cfg)
        if args.command == "run":
            cfg = _load(args)
            if args.no_noise:
                cfg = data.config_overrides(cfg, rho=math.inf)
            if args.fixed_epochs is not None:
                cfg = data.config_overrides(cfg, fixed_epochs=args.fixed_epochs)
            if args.shuffle_rows:
                cfg = data.config_overrides(cfg, shuffle_rows=True)
            return cmd_run(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(args.factors_a, args.factors_b)
        return cmd_budget(args.epsilon, args.rho, args.delta, args.epochs)
    except (OSError, ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"fedcp: {exc}", file=sys.stderr)
        return 1


def _load(args) -> data.ExperimentConfig:
    try:
        cfg = data.load_config(args.config)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {args.config}") from None
    if args.seed is not None:
        cfg = data.config_overrides(cfg, seed=args.seed)
    return cfg


def main_entry():
    raise SystemExit(main())
