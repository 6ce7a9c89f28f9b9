"""Run a validated config end to end and write its artifacts.

Everything written here is a pure function of the resolved config, so reruns
with the same ``master_seed`` produce byte-identical files.  Wall-clock times
are returned to the caller but never written.
"""
from dataclasses import dataclass, field, replace
import csv
import io
import math
from pathlib import Path
import time

import numpy as np
import yaml

from . import engine as eng
from .config import CompressorConfig, ExperimentConfig, dump_config, replicate_seed, to_plain
from .errors import Diverged, InsufficientData, TuningFailed
from .graph import GraphSpec, build_graph
from .metrics import COLUMNS, conservation_check, fit_linear_rate, median_trace
from .problems import generate_clec, generate_dlec, kkt_oracle_clec, kkt_oracle_dlec


def build_instance(cfg: ExperimentConfig):
    """Graph and problem for a seed-resolved config."""
    g = build_graph(GraphSpec(
        kind=cfg.graph.kind,
        n=cfg.graph.n,
        p=cfg.graph.p if cfg.graph.p is not None else 0.5,
        weight_rule=cfg.graph.weight_rule,
        seed=cfg.graph.seed,
        max_retries=cfg.graph.max_retries,
    ))
    pc = cfg.problem
    if pc.kind == "dlec":
        p = generate_dlec(pc.seed, cfg.n, pc.d, pc.q, pc.mu, shared_constraint=pc.shared_constraint)
    else:
        p = generate_clec(pc.seed, cfg.n, pc.d, pc.q, pc.mu, perturb=pc.perturb, shared_constraint=pc.shared_constraint)
    return g, p


def certificate_for(p, g, eta, z0=None):
    if p.kind == "clec":
        return kkt_oracle_clec(p, g, eta=eta, z0=z0)
    return kkt_oracle_dlec(p, g, eta=eta)


def _init_state_z(cfg, p):
    """Initial ``z`` implied by the init spec (pins the coupled certificate's ``sum z``)."""
    if p.kind != "clec" or cfg.init.mode != "random":
        return None
    return eng.initial_state(p, _init_spec(cfg), True)["z"]


def _init_spec(cfg):
    return eng.InitSpec(mode=cfg.init.mode, scale=cfg.init.scale, seed=cfg.init.seed)


@dataclass
class RunOutcome:
    status: str  # ok | diverged | tuning_failed
    steps: object = None
    tuned: bool = False
    traces: list = field(default_factory=list)
    certificate: object = None
    rate: object = None
    rate_error: str = None
    conservation: dict = None
    message: str = ""
    final_x_mean: np.ndarray = None
    wall_time: float = 0.0

    @property
    def trace(self):
        return self.traces[0] if self.traces else None

    @property
    def fit_trace(self):
        if len(self.traces) > 1:
            return median_trace(self.traces)
        return self.trace


def resolve_steps(cfg, p, g, spec):
    if cfg.steps == "auto":
        steps = eng.tune_steps(p, g, spec, budget=cfg.tuning.budget, probe_rounds=cfg.tuning.probe_rounds,
                               master_seed=spec.seed, augmentation=cfg.run.augmentation)
        return steps, True
    s = cfg.steps
    return eng.StepSizes(kappa=s.kappa, kappa0=s.kappa0, eta=s.eta), False


def execute(cfg: ExperimentConfig, instance=None) -> RunOutcome:
    """Tune (if asked), run every replicate and summarise.  ``cfg`` must be seed-resolved."""
    start = time.perf_counter()
    g, p = instance or build_instance(cfg)
    spec = cfg.compressor.to_spec(seed=cfg.compressor.seed)
    out = RunOutcome(status="ok")
    try:
        out.steps, out.tuned = resolve_steps(cfg, p, g, spec)
    except TuningFailed as exc:
        out.status, out.message = "tuning_failed", str(exc)
        out.wall_time = time.perf_counter() - start
        return out
    cert = certificate_for(p, g, out.steps.eta, z0=_init_state_z(cfg, p))
    out.certificate = cert
    init = eng.init_ce if p.kind == "clec" else eng.init_de
    extra = {"augmentation": cfg.run.augmentation} if p.kind == "clec" else {}
    rc = cfg.run
    finals = []
    for r in range(rc.replicates):
        rep_spec = replace(spec, seed=replicate_seed(cfg, r))
        engine = init(p, g, rep_spec, out.steps, init=_init_spec(cfg), certificate=cert,
                      master_seed=rep_spec.seed, **extra)
        meta = {"replicate": r, "compressor_seed": rep_spec.seed}
        try:
            trace, engine = eng.run(engine, rc.max_iters, target_residual=rc.target_residual, record_every=rc.record_every,
                                    certificate=cert, metadata=meta, compiled=rc.compiled)
        except Diverged as exc:
            exc.trace.metadata.update(meta)
            out.traces.append(exc.trace)
            out.status, out.message = "diverged", str(exc)
            out.wall_time = time.perf_counter() - start
            return out
        out.traces.append(trace)
        finals.append(engine.state["x"].mean(axis=0))
    out.final_x_mean = np.mean(finals, axis=0)
    try:
        out.rate = fit_linear_rate(out.fit_trace)
    except InsufficientData as exc:
        out.rate_error = str(exc)
    drifts = [conservation_check(t) for t in out.traces]
    out.conservation = {
        key: (None if all(d[key] is None for d in drifts) else max(d[key] for d in drifts if d[key] is not None))
        for key in ("max_lambda_drift", "max_z_drift")
    }
    out.wall_time = time.perf_counter() - start
    return out


# ---------------------------------------------------------------- writers

def _cell(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return "" if math.isnan(value) else repr(value)
    return str(value)


def trace_csv(trace, cfg, steps=None, tuned=False, status="ok"):
    """CSV text: ``#``-prefixed resolved config and seeds, then the fixed columns."""
    buf = io.StringIO()
    buf.write("# csaddle trace\n")
    buf.write(f"# status: {status}\n")
    for line in dump_config(cfg).splitlines():
        buf.write(f"# config: {line}\n")
    seeds = {
        "master_seed": cfg.run.master_seed,
        "graph": cfg.graph.seed,
        "problem": cfg.problem.seed,
        "compressor": trace.metadata.get("compressor_seed", cfg.compressor.seed),
        "init": cfg.init.seed,
        "replicate": trace.metadata.get("replicate", 0),
    }
    buf.write("# seeds: " + " ".join(f"{k}={v}" for k, v in seeds.items()) + "\n")
    if steps is not None:
        buf.write(f"# steps: kappa={steps.kappa!r} kappa0={steps.kappa0!r} eta={steps.eta!r} tuned={str(tuned).lower()}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for row in trace.rounds:
        w.writerow([_cell(row[c]) for c in COLUMNS])
    return buf.getvalue()


def write_text(path, text):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def yaml_text(doc):
    return yaml.safe_dump(to_plain(doc), sort_keys=False, default_flow_style=False)


def trace_paths(out_dir, name, replicates):
    out_dir = Path(out_dir)
    if replicates == 1:
        return [out_dir / f"{name}.csv"]
    return [out_dir / f"{name}_rep{r}.csv" for r in range(replicates)]


def report_doc(cfg, out: RunOutcome):
    doc = {"status": out.status, "message": out.message or None}
    if out.steps is not None:
        doc["steps"] = {"kappa": out.steps.kappa, "kappa0": out.steps.kappa0, "eta": out.steps.eta, "tuned": out.tuned}
    if out.trace is not None and out.trace.rounds:
        last = out.trace.rounds[-1]
        doc["rounds"] = last["k"]
        doc["final_residual_sq"] = last["residual_sq"]
        doc["comm_entries_cum"] = last["comm_entries_cum"]
        doc["comm_bits_cum"] = last["comm_bits_cum"]
    if out.final_x_mean is not None and out.certificate is not None:
        xs = np.asarray(out.certificate.x_star)
        doc["relative_error_mean_x"] = float(np.linalg.norm(out.final_x_mean - xs) / max(np.linalg.norm(xs), 1e-300))
    return doc


def write_run_artifacts(cfg, out: RunOutcome, out_dir):
    """Trace CSV(s), ``<name>.rate.yaml`` and ``<name>.conservation.yaml``; returns written paths."""
    out_dir = Path(out_dir)
    name = cfg.output.trace_name
    written = []
    for path, trace in zip(trace_paths(out_dir, name, cfg.run.replicates), out.traces):
        write_text(path, trace_csv(trace, cfg, out.steps, out.tuned, out.status))
        written.append(path)
    rate = {"run": report_doc(cfg, out)}
    if out.rate is not None:
        rate["fit"] = out.rate.as_dict()
        rate["fit"]["median_of"] = len(out.traces)
    elif out.rate_error:
        rate["fit"] = {"error": out.rate_error}
    path = out_dir / f"{name}.rate.yaml"
    write_text(path, yaml_text(rate))
    written.append(path)
    if out.conservation is not None:
        path = out_dir / f"{name}.conservation.yaml"
        write_text(path, yaml_text(out.conservation))
        written.append(path)
    return written


# ---------------------------------------------------------------- sweeps

SUMMARY_COLUMNS = ("cell", "axis", "value", "status", "kappa", "rounds", "final_residual_sq", "beta_hat",
                   "r_squared", "comm_entries_ratio", "comm_bits_ratio", "message")


def sweep_cells(cfg, default_eta=None):
    """Per-cell config documents in axis order, each with a printable label.

    A ``kappa`` axis keeps explicit ``steps.eta``; under ``steps: auto`` it
    uses ``default_eta``.
    """

    cells = []
    for value in cfg.sweep.values:
        doc = cfg.model_dump()
        doc["sweep"] = None
        if cfg.sweep.axis == "compressor":
            comp = CompressorConfig.model_validate(value).model_dump()
            comp["seed"] = cfg.compressor.seed
            doc["compressor"] = comp
            label = value if isinstance(value, str) else comp["kind"]
        elif cfg.sweep.axis == "kappa":
            eta = cfg.steps.eta if cfg.steps != "auto" else default_eta
            doc["steps"] = {"kappa": float(value), "kappa0": cfg.compressor.kappa0, "eta": eta}
            label = repr(float(value))
        else:
            doc["run"]["master_seed"] = int(value)
            for part in ("graph", "problem", "compressor", "init"):
                doc[part]["seed"] = None
            label = str(int(value))
        cells.append((label, doc))
    return cells


def identity_ratio(out: RunOutcome, g, p):
    """Cumulative (entries, bits) relative to an identity-compressed run of equal length."""
    from .compressors import CompressorSpec

    if out.trace is None or not out.trace.rounds:
        return None, None
    last = out.trace.rounds[-1]
    rounds = last["k"]
    if rounds == 0:
        return 1.0, 1.0
    ident = CompressorSpec("identity")
    dims = [p.d, p.d] + ([p.q, p.q] if p.kind == "clec" else [])
    arcs = g.directed[0].size
    entries = rounds * arcs * sum(eng.comp.transmit_size(ident, m) for m in dims)
    bits = rounds * arcs * sum(eng.comp.payload_bits(ident, m) for m in dims)
    return last["comm_entries_cum"] / entries, last["comm_bits_cum"] / bits
