"""Command-line entry points: run, cluster, privacy-eval, comm-model, bound.

Every artifact embeds the resolved config and seed. Output files contain no
wall-clock timestamps, so a re-run with the same config and seed is
byte-identical. Exit codes: 0 success, 2 configuration/usage error,
3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import clustering, codec, fingerprint, metrics, model, protocol
from .config import (ExperimentConfig, build_model_config, build_partition_spec,
                     build_run_config, build_topology, load_config)
from .errors import ConfigError, SimError, UsageError
from .protocol import TrainingLog
from .seeding import derive_salt, derive_seed

ENV_SEED = "ELSA_SIM_SEED"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

SCHEMA_TRAINING = "elsa.training-log.v1"
SCHEMA_ASSIGNMENT = "elsa.assignment.v1"
SCHEMA_DIVERGENCE = "elsa.divergence.v1"
SCHEMA_PRIVACY = "elsa.privacy.v1"
SCHEMA_BOUND = "elsa.bound.v1"


def _fmt(value: float) -> str:
    if isinstance(value, float) and np.isnan(value):
        return "nan"
    return format(value, ".12g")


def _config_line(cfg: ExperimentConfig | None, seed: int) -> str:
    echo = cfg.echo() if cfg is not None else {}
    return json.dumps({"seed": seed, "config": echo}, sort_keys=True,
                      separators=(",", ":"))


def _write_csv(path: Path, schema: str, cfg: ExperimentConfig | None, seed: int,
               header: list[str], rows: list[list]) -> None:
    lines = [f"# schema={schema}", f"# {_config_line(cfg, seed)}", ",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) if isinstance(v, float) else str(v)
                              for v in row))
    path.write_text("\n".join(lines) + "\n")


def _write_json(path: Path, schema: str, cfg: ExperimentConfig | None, seed: int,
                payload: dict) -> None:
    doc = {"schema": schema, "seed": seed,
           "config": cfg.echo() if cfg is not None else {}}
    doc.update(payload)
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _resolve_seed(args, cfg: ExperimentConfig) -> int:
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    env = os.environ.get(ENV_SEED)
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"{ENV_SEED} must be an integer, got {env!r}") from exc
    return int(cfg.get("run", "seed"))


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    out = Path(args.out_dir if args.out_dir else cfg.get("run", "out_dir"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _training_rows(log: TrainingLog) -> list[list]:
    return [[r.round_index, r.train_loss, r.eval_accuracy, r.theta_delta,
             r.comm_bytes, r.comm_time_s, r.elapsed_s, r.bytes_activations,
             r.bytes_gradients] for r in log.records]


_TRAINING_HEADER = ["round", "train_loss", "eval_accuracy", "theta_delta",
                    "comm_bytes", "comm_time_s", "elapsed_s",
                    "bytes_activations", "bytes_gradients"]


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    seed = _resolve_seed(args, cfg)
    out = _out_dir(args, cfg)
    run_config = build_run_config(cfg, seed)
    try:
        if args.baseline == "fedavg":
            log = protocol.run_fedavg(run_config, random_clients=False)
        elif args.baseline == "fedavg-random":
            log = protocol.run_fedavg(run_config, random_clients=True)
        else:
            log = protocol.run_elsa(run_config)
    except SimError as exc:
        partial = getattr(exc, "partial_records", None)
        if partial:
            _write_csv(out / "training_log.csv", SCHEMA_TRAINING, cfg, seed,
                       _TRAINING_HEADER,
                       _training_rows(TrainingLog(partial, False, "partial")))
        raise
    _write_csv(out / "training_log.csv", SCHEMA_TRAINING, cfg, seed,
               _TRAINING_HEADER, _training_rows(log))
    last = log.records[-1]
    _write_json(out / "summary.json", SCHEMA_TRAINING, cfg, seed, {
        "method": log.method,
        "n_rounds": log.n_rounds,
        "converged": log.converged,
        "final_accuracy": log.final_accuracy,
        "final_train_loss": last.train_loss,
        "total_comm_bytes": sum(r.comm_bytes for r in log.records),
        "total_comm_time_s": last.elapsed_s,
    })
    return EXIT_OK


def cmd_cluster(args) -> int:
    cfg = load_config(args.config)
    seed = _resolve_seed(args, cfg)
    out = _out_dir(args, cfg)
    run_config = build_run_config(cfg, seed)
    result = protocol.fingerprint_and_cluster(run_config)
    assignment, fps, div, trust = (result.assignment, result.fingerprints,
                                   result.divergences, result.trust)

    rows = []
    for n in range(run_config.n_clients):
        edge = assignment.edge_of(n)
        status = "assigned" if edge is not None else "excluded"
        reason = assignment.excluded.get(n, "")
        rows.append([n, status, edge if edge is not None else "", reason,
                     float(trust[n]), div.row_mean(n)])
    _write_csv(out / "assignment.csv", SCHEMA_ASSIGNMENT, cfg, seed,
               ["client", "status", "edge", "reason", "trust", "mean_divergence"],
               rows)
    _write_csv(out / "divergence.csv", SCHEMA_DIVERGENCE, cfg, seed,
               [f"c{j}" for j in range(div.n_clients)],
               [[float(v) for v in row] for row in div.values])
    np.savez(out / "fingerprints.npz",
             **{f"mean_{n}": fps[n].mean for n in range(len(fps))},
             **{f"cov_{n}": fps[n].cov for n in range(len(fps))})
    _write_json(out / "summary.json", SCHEMA_ASSIGNMENT, cfg, seed, {
        "clusters": {str(k): sorted(v) for k, v in assignment.clusters.items()},
        "excluded": {str(k): v for k, v in sorted(assignment.excluded.items())},
        "edge_trust": {str(k): v for k, v in sorted(assignment.edge_trust.items())},
        "edge_coherence": {str(k): v for k, v in
                           sorted(assignment.edge_coherence.items())},
    })
    return EXIT_OK


def _privacy_grid(cfg: ExperimentConfig, seed: int):
    """Grid points (mode, rank, rho_target) in a stable order."""
    ranks = cfg.get("privacy", "ranks")
    grid = []
    for rho in cfg.get("privacy", "rho_grid"):
        grid.append(("direct", None, rho))
        grid.append(("gaussian-noise", None, rho))
        grid.append(("sketch-only", None, rho))
        for r in ranks:
            grid.append(("ssop+sketch", r, rho))
    return grid


def cmd_privacy(args) -> int:
    cfg = load_config(args.config)
    seed = _resolve_seed(args, cfg)
    out = _out_dir(args, cfg)
    mcfg = build_model_config(cfg)
    state = model.init_model(mcfg, derive_seed("model", seed))
    n_seq = cfg.get("privacy", "n_sequences")
    victims = metrics.make_synthetic_corpus(derive_seed("privacy-victims", seed),
                                            mcfg.vocab_size, mcfg.seq_len,
                                            mcfg.n_classes, n_seq)
    probes = protocol.build_probes(derive_seed("probe", seed),
                                   cfg.get("clustering", "probe_count"), mcfg)
    emb = model.cls_embeddings(state, probes.inputs)
    salt = derive_salt("ssop-salt", seed)
    sketch_rows = cfg.get("privacy", "sketch_rows")

    def evaluate(point):
        mode, rank, rho = point
        buckets = max(1, round(mcfg.hidden_dim / (sketch_rows * rho)))
        params = codec.SketchParams(sketch_rows, buckets, mcfg.hidden_dim,
                                    salt, 0, 0)
        basis = codec.build_basis(emb, rank, salt, 0) if rank is not None else None
        rho_independent = mode in ("direct", "gaussian-noise")
        if rho_independent:
            # no compression applied; fixed seed material keeps the metrics
            # identical across the rho grid
            params = codec.SketchParams(1, 1, mcfg.hidden_dim, salt, 0, 0)
        report = metrics.run_privacy_attack(state, victims, mode, basis,
                                            params)
        return (mode, rank, rho, params.ratio, rho_independent, report)

    grid = _privacy_grid(cfg, seed)
    if args.jobs and args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(evaluate, grid))
    else:
        results = [evaluate(p) for p in grid]

    rows = []
    for mode, rank, rho, actual_rho, rho_independent, rep in results:
        rows.append([mode, rank if rank is not None else "",
                     float(rho), float("nan") if rho_independent else actual_rho,
                     rep.cos_sim, rep.mse, rep.token_acc,
                     "yes" if rho_independent else "no",
                     rep.n_positions, rep.n_skipped])
    _write_csv(out / "privacy.csv", SCHEMA_PRIVACY, cfg, seed,
               ["mode", "subspace_rank", "rho_target", "rho_actual", "cos_sim",
                "mse", "token_acc", "rho_independent", "n_positions", "n_skipped"],
               rows)
    _write_json(out / "summary.json", SCHEMA_PRIVACY, cfg, seed,
                {"n_grid_points": len(rows)})
    return EXIT_OK


def cmd_comm_model(args) -> int:
    cfg = load_config(args.config)
    seed = _resolve_seed(args, cfg)
    out = _out_dir(args, cfg)
    run_config = build_run_config(cfg, seed)
    mcfg = run_config.model
    state = model.init_model(mcfg, derive_seed("model", seed))
    lora_bytes = state.n_adapter_values((1, 2, 3), run_config.aggregate_head) \
        * run_config.bytes_per_value
    comm = metrics.CommModel(
        bytes_per_value=run_config.bytes_per_value, seq_len=mcfg.seq_len,
        ratio=run_config.wire_ratio,
        bandwidth_bytes_per_s=run_config.topology.bandwidth_bytes_per_s,
        batch_size=run_config.batch_size, lora_bytes=lora_bytes)
    # full participation, clients round-robin across edges
    clusters = {k: frozenset(n for n in range(run_config.n_clients)
                             if n % run_config.n_edges == k)
                for k in range(run_config.n_edges)}
    c_g = metrics.comm_cost(comm, run_config.n_edges, clusters,
                            run_config.rounds_per_global, mcfg.hidden_dim)
    t_client = metrics.comm_time(comm, run_config.rounds_per_global,
                                 run_config.batch_size, mcfg.hidden_dim)
    g = run_config.max_global_rounds
    _write_json(out / "comm_model.json", "elsa.comm-model.v1", cfg, seed, {
        "bytes_per_global_round": c_g,
        "per_client_time_s": t_client,
        "compression_ratio": run_config.wire_ratio,
        "adapter_bytes": lora_bytes,
        "total_time_s_at_max_rounds": metrics.total_time(
            g, [t_client] * run_config.n_clients),
        "n_rounds_assumed": g,
    })
    return EXIT_OK


def cmd_bound(args) -> int:
    rounds = [int(p) for p in str(args.rounds).split(",") if p.strip()]
    if not rounds:
        raise UsageError("bound needs at least one value in --rounds")
    rows = []
    for g in rounds:
        b = metrics.BoundInputs(lipschitz=args.lipschitz, gap=args.gap,
                                sigma_local_sq=args.sigma_local_sq,
                                sigma2_sq=args.sigma2_sq, n_rounds=g)
        rows.append([g, metrics.theorem_bound(b)])
    header = ["rounds", "bound"]
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "bound.csv", SCHEMA_BOUND, None,
                   args.seed if args.seed is not None else 0, header, rows)
    print(",".join(header))
    for row in rows:
        print(f"{row[0]},{_fmt(row[1])}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="elsa-sim",
        description="Desk-scale simulator for trust-clustered hierarchical "
                    "split training with sketch-compressed activation exchange.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="path to INI config")
        p.add_argument("--seed", type=int, default=None,
                       help="override config seed (also: ELSA_SIM_SEED env var)")
        p.add_argument("--out-dir", default=None, help="output directory")
        p.add_argument("--jobs", type=int, default=1,
                       help="parallel workers for independent sweep points")

    p_run = sub.add_parser("run", help="train with the full protocol or a baseline")
    common(p_run)
    p_run.add_argument("--baseline", choices=["fedavg", "fedavg-random"],
                       default=None, help="run a baseline instead of the protocol")
    p_run.set_defaults(func=cmd_run)

    p_cluster = sub.add_parser("cluster", help="fingerprint and cluster only")
    common(p_cluster)
    p_cluster.set_defaults(func=cmd_cluster)

    p_privacy = sub.add_parser("privacy-eval",
                               help="privacy metrics over modes x rho x rank")
    common(p_privacy)
    p_privacy.set_defaults(func=cmd_privacy)

    p_comm = sub.add_parser("comm-model", help="closed-form communication model")
    common(p_comm)
    p_comm.set_defaults(func=cmd_comm_model)

    p_bound = sub.add_parser("bound", help="convergence bound table")
    p_bound.add_argument("--lipschitz", type=float, required=True)
    p_bound.add_argument("--gap", type=float, required=True)
    p_bound.add_argument("--sigma-local-sq", type=float, required=True,
                         dest="sigma_local_sq")
    p_bound.add_argument("--sigma2-sq", type=float, required=True,
                         dest="sigma2_sq")
    p_bound.add_argument("--rounds", required=True,
                         help="comma-separated global round counts")
    p_bound.add_argument("--seed", type=int, default=None)
    p_bound.add_argument("--out-dir", default=None)
    p_bound.set_defaults(func=cmd_bound)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors, matching our config-error code
        return int(exc.code) if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
