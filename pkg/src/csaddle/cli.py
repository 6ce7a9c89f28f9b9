"""Command-line entry point: ``csaddle {run,sweep,verify-compressor,oracle,dump-instance}``.

Exit codes
    0  success
    1  invalid config or arguments (message carries ``file:line:``)
    2  run diverged / every sweep cell failed / a compressor failed its contract
    3  step-size tuning failed
    4  degenerate instance (no unique KKT point)
"""
import argparse
import csv
import io
from pathlib import Path
import sys

import yaml

from . import compressors as comp
from . import engine as eng
from .config import ExperimentConfig, dump_config, load_config, resolve_seeds, to_plain
from .errors import CompressorRejected, ConfigError, DegenerateInstance, Disconnected, InvalidSpec
from .experiment import (
    SUMMARY_COLUMNS,
    build_instance,
    certificate_for,
    execute,
    identity_ratio,
    sweep_cells,
    write_run_artifacts,
    write_text,
    yaml_text,
)
from .problems import check_kkt, kkt_residuals

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_TUNING, EXIT_DEGENERATE = 0, 1, 2, 3, 4


class _Console:
    def __init__(self, quiet):
        self.quiet = quiet

    def info(self, msg):
        if not self.quiet:
            print(msg)

    @staticmethod
    def error(msg):
        print(msg, file=sys.stderr)


def _load(args, console):
    """Resolved config, or ``None`` after reporting why not."""
    if args.config is None:
        console.error("error: --config PATH is required")
        return None
    try:
        cfg = load_config(args.config)
        return resolve_seeds(cfg, master_override=args.seed)
    except ConfigError as exc:
        if exc.path is not None and exc.line is None:
            console.error(f"{args.config}:{_anchor(args.config, exc.path)}: {exc}")
        else:
            console.error(str(exc))
        return None


def _anchor(path, keys):
    from .config import _node_line

    try:
        root = yaml.compose(Path(path).read_text(encoding="utf-8"), Loader=yaml.SafeLoader)
    except (OSError, yaml.YAMLError):
        return 1
    return _node_line(root, keys)


def _out_dir(args, cfg):
    return Path(args.out) if args.out is not None else Path(cfg.output.dir)


def _instance(args, cfg, console):
    try:
        return build_instance(cfg)
    except Disconnected as exc:
        console.error(f"{args.config}:{_anchor(args.config, ('graph',))}: graph: {exc}")
        return EXIT_CONFIG
    except DegenerateInstance as exc:
        console.error(f"degenerate instance: {exc}")
        return EXIT_DEGENERATE
    except InvalidSpec as exc:
        console.error(f"{args.config}:{_anchor(args.config, ('problem',))}: {exc}")
        return EXIT_CONFIG


def cmd_run(args):
    console = _Console(args.quiet)
    cfg = _load(args, console)
    if cfg is None:
        return EXIT_CONFIG
    inst = _instance(args, cfg, console)
    if isinstance(inst, int):
        return inst
    try:
        out = execute(cfg, instance=inst)
    except CompressorRejected as exc:
        console.error(f"{args.config}:{_anchor(args.config, ('compressor',))}: compressor: {exc}")
        return EXIT_CONFIG
    except DegenerateInstance as exc:
        console.error(f"degenerate instance: {exc}")
        return EXIT_DEGENERATE
    paths = write_run_artifacts(cfg, out, _out_dir(args, cfg))
    for p in paths:
        console.info(f"wrote {p}")
    if out.status == "tuning_failed":
        console.error(f"tuning failed: {out.message}")
        return EXIT_TUNING
    if out.status == "diverged":
        console.error(f"diverged: {out.message}")
        return EXIT_DIVERGED
    last = out.trace.rounds[-1]
    console.info(f"rounds={last['k']} residual_sq={last['residual_sq']:.3e} kappa={out.steps.kappa:.4g} "
                 f"eta={out.steps.eta:.4g} wall={out.wall_time:.2f}s")
    if out.rate is not None:
        console.info(f"beta_hat={out.rate.beta_hat:.6f} r_squared={out.rate.r_squared:.4f}")
    return EXIT_OK


def cmd_sweep(args):
    console = _Console(args.quiet)
    cfg = _load(args, console)
    if cfg is None:
        return EXIT_CONFIG
    if cfg.sweep is None:
        console.error(f"{args.config}:1: sweep: a sweep section with axis and values is required")
        return EXIT_CONFIG
    out_dir = _out_dir(args, cfg)
    default_eta = None
    if cfg.sweep.axis == "kappa" and cfg.steps == "auto":
        inst = _instance(args, cfg, console)
        if isinstance(inst, int):
            return inst
        default_eta = eng.default_eta(inst[1])
    rows = []
    for idx, (label, doc) in enumerate(sweep_cells(cfg, default_eta=default_eta)):
        cell_cfg = resolve_seeds(ExperimentConfig.model_validate(doc))
        cell_cfg = cell_cfg.model_copy(update={"output": cell_cfg.output.model_copy(
            update={"trace_name": f"{cfg.output.trace_name}_cell{idx:02d}"})})
        row = dict.fromkeys(SUMMARY_COLUMNS, "")
        row.update(cell=idx, axis=cfg.sweep.axis, value=label)
        try:
            g, p = build_instance(cell_cfg)
            out = execute(cell_cfg, instance=(g, p))
        except (CompressorRejected, DegenerateInstance, Disconnected, InvalidSpec) as exc:
            row.update(status="error", message=str(exc))
            rows.append(row)
            console.info(f"cell {idx} ({label}): error: {exc}")
            continue
        write_run_artifacts(cell_cfg, out, out_dir)
        row["status"] = out.status
        row["message"] = out.message
        if out.steps is not None:
            row["kappa"] = repr(out.steps.kappa)
        if out.trace is not None and out.trace.rounds:
            last = out.trace.rounds[-1]
            row["rounds"] = last["k"]
            row["final_residual_sq"] = repr(last["residual_sq"])
            ent, bits = identity_ratio(out, g, p)
            row["comm_entries_ratio"] = repr(ent)
            row["comm_bits_ratio"] = repr(bits)
        if out.rate is not None:
            row["beta_hat"] = repr(out.rate.beta_hat)
            row["r_squared"] = repr(out.rate.r_squared)
        rows.append(row)
        console.info(f"cell {idx} ({label}): {out.status}")
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    summary = out_dir / f"{cfg.output.trace_name}_summary.csv"
    write_text(summary, buf.getvalue())
    console.info(f"wrote {summary}")
    return EXIT_OK if any(r["status"] == "ok" for r in rows) else EXIT_DIVERGED


def cmd_verify_compressor(args):
    console = _Console(args.quiet)
    dims, horizon, trials, seed = args.dims, args.horizon, args.trials, args.seed
    out_dir = Path(args.out) if args.out is not None else Path("out")
    try:
        if args.config is not None:
            cfg = load_config(args.config)
            spec = cfg.compressor.to_spec(seed=cfg.compressor.seed or 0)
            if cfg.verify is not None:
                dims = dims or cfg.verify.dims
                horizon = horizon or cfg.verify.horizon
                trials = trials or cfg.verify.trials
            seed = seed if seed is not None else (cfg.run.master_seed or 0)
            if args.out is None:
                out_dir = Path(cfg.output.dir)
        elif args.spec is not None:
            overrides = {"kappa0": args.kappa0} if args.kappa0 is not None else {}
            spec = comp.parse_spec(args.spec, **overrides)
        else:
            console.error("error: give a compressor spec (e.g. top_k(1)) or --config PATH")
            return EXIT_CONFIG
        dims = dims or [4]
        reports = [comp.verify_st_contract(spec, d, horizon=horizon or 300, trials=trials or 10, seed=seed or 0)
                   for d in dims]
    except ConfigError as exc:
        console.error(str(exc))
        return EXIT_CONFIG
    except InvalidSpec as exc:
        console.error(f"error: {exc}")
        return EXIT_CONFIG
    path = out_dir / "contract_report.yaml"
    write_text(path, yaml_text({"reports": [r.as_dict() for r in reports]}))
    for r in reports:
        verdict = "pass" if r.passed else "FAIL"
        console.info(f"{r.kind} d={r.dim} kappa0={r.kappa0:g}: {verdict} gamma_hat={r.gamma_hat:.6g} "
                     f"L_c_hat={r.L_c_hat:.4g} (bound {r.L_c_bound:.4g}) {r.diagnostic}".rstrip())
    console.info(f"wrote {path}")
    return EXIT_OK if all(r.passed for r in reports) else EXIT_DIVERGED


def cmd_oracle(args):
    console = _Console(args.quiet)
    cfg = _load(args, console)
    if cfg is None:
        return EXIT_CONFIG
    inst = _instance(args, cfg, console)
    if isinstance(inst, int):
        return inst
    g, p = inst
    eta = cfg.steps.eta if cfg.steps != "auto" else eng.default_eta(p)
    try:
        cert = certificate_for(p, g, eta)
    except DegenerateInstance as exc:
        console.error(f"degenerate instance: {exc}")
        return EXIT_DEGENERATE
    residuals = kkt_residuals(p, cert, g)
    doc = {"kind": p.kind, "eta": eta, "check_kkt": check_kkt(p, cert, g), "residuals": residuals,
           "certificate": cert.to_dict()}
    path = _out_dir(args, cfg) / "oracle.yaml"
    write_text(path, yaml_text(doc))
    console.info(f"x* = {to_plain(cert.x_star)}")
    console.info(f"check_kkt = {doc['check_kkt']:.3e}")
    console.info(f"wrote {path}")
    return EXIT_OK


def cmd_dump_instance(args):
    console = _Console(args.quiet)
    cfg = _load(args, console)
    if cfg is None:
        return EXIT_CONFIG
    inst = _instance(args, cfg, console)
    if isinstance(inst, int):
        return inst
    g, p = inst
    doc = {
        "config": yaml.safe_load(dump_config(cfg)),
        "graph": {"n": g.n, "edges": [[int(i), int(j), float(w)] for i, j, w in g.edges]},
        "problem": p.to_dict(),
    }
    path = _out_dir(args, cfg) / "instance.yaml"
    write_text(path, yaml_text(doc))
    console.info(f"wrote {path}")
    return EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="experiment config (YAML)")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides output.dir)")
    common.add_argument("--seed", metavar="N", type=int, help="override run.master_seed")
    common.add_argument("--quiet", action="store_true", help="suppress progress output")

    parser = argparse.ArgumentParser(prog="csaddle", description="Compressed distributed saddle-point experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="tune, run and report one experiment").set_defaults(func=cmd_run)
    sub.add_parser("sweep", parents=[common], help="run the cells of a sweep axis").set_defaults(func=cmd_sweep)
    v = sub.add_parser("verify-compressor", parents=[common], help="check a compressor's contraction contract")
    v.add_argument("spec", nargs="?", help="compressor such as identity, top_k(1), scaled(2)")
    v.add_argument("--dims", type=int, nargs="+", help="dimensions to test (default 4)")
    v.add_argument("--horizon", type=int, help="rounds per trial (>= 100, default 300)")
    v.add_argument("--trials", type=int, help="random starts (>= 10, default 10)")
    v.add_argument("--kappa0", type=float, help="filter step (default 0.5)")
    v.set_defaults(func=cmd_verify_compressor)
    sub.add_parser("oracle", parents=[common], help="solve the KKT system and report residuals").set_defaults(func=cmd_oracle)
    sub.add_parser("dump-instance", parents=[common], help="write the generated graph and problem").set_defaults(
        func=cmd_dump_instance)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
