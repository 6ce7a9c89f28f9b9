"""Experiment configuration: YAML documents validated into typed models.

Validation errors carry the line of the offending key (or of the enclosing
mapping when a key is missing), taken from the YAML node tree.
"""
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .compressors import KINDS, CompressorSpec, parse_spec
from .errors import ConfigError, InvalidSpec
from .seeding import seed_sequence


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GraphConfig(_Strict):
    kind: Literal["ring", "path", "complete", "star", "erdos_renyi"]
    n: int = Field(ge=2)
    p: Optional[float] = Field(default=None, gt=0, le=1)
    weight_rule: Literal["unit", "uniform"] = "unit"
    seed: Optional[int] = None
    max_retries: int = Field(default=200, ge=1)


class ProblemConfig(_Strict):
    kind: Literal["dlec", "clec"]
    n: Optional[int] = Field(default=None, ge=2)
    d: int = Field(ge=1)
    q: int = Field(ge=1)
    mu: float = Field(default=1.0, gt=0)
    seed: Optional[int] = None
    shared_constraint: bool = False
    perturb: bool = True


class CompressorConfig(_Strict):
    kind: Literal[KINDS] = "identity"
    kappa0: float = Field(default=0.5, gt=0)
    k: int = Field(default=1, ge=1)
    levels: int = Field(default=4, ge=1)
    schedule: Literal["cyclic"] = "cyclic"
    theta0: float = Field(default=1.0, ge=0)
    rho: float = Field(default=0.97, gt=0, lt=1)
    factor: float = 1.0
    seed: Optional[int] = None

    @model_validator(mode="before")
    @classmethod
    def _shorthand(cls, value):
        # "top_k(2)" is accepted as a compact spelling of {kind: top_k, k: 2}
        if isinstance(value, str):
            try:
                spec = parse_spec(value)
            except InvalidSpec as exc:
                raise ValueError(str(exc)) from None
            return {f: getattr(spec, f) for f in ("kind", "kappa0", "k", "levels", "schedule", "theta0", "rho", "factor")}
        return value

    def to_spec(self, seed=0):
        fields = self.model_dump(exclude={"seed"})
        return CompressorSpec(**fields, seed=int(seed))


class StepsConfig(_Strict):
    kappa: float = Field(gt=0)
    kappa0: float = Field(gt=0)
    eta: float = Field(gt=0)


class TuningConfig(_Strict):
    budget: int = Field(default=8, ge=1)
    probe_rounds: int = Field(default=500, ge=10)


class InitConfig(_Strict):
    mode: Literal["zeros", "random", "certificate"] = "zeros"
    scale: float = Field(default=1.0, gt=0)
    seed: Optional[int] = None


class RunConfig(_Strict):
    max_iters: int = Field(default=50_000, ge=1)
    target_residual: Optional[float] = Field(default=1e-12, ge=0)
    record_every: int = Field(default=1, ge=1)
    replicates: int = Field(default=1, ge=1)
    master_seed: Optional[int] = None
    augmentation: Literal["none", "literal"] = "none"
    compiled: bool = True


class OutputConfig(_Strict):
    dir: str = "out"
    trace_name: str = Field(default="trace", min_length=1)

    @field_validator("trace_name")
    @classmethod
    def _plain_name(cls, value):
        if "/" in value or "\\" in value:
            raise ValueError("trace_name must be a bare file stem")
        return value


class SweepConfig(_Strict):
    axis: Literal["compressor", "kappa", "seed"]
    values: list = Field(min_length=1)


class VerifyConfig(_Strict):
    dims: list[int] = Field(default_factory=lambda: [4], min_length=1)
    horizon: int = Field(default=300, ge=100)
    trials: int = Field(default=10, ge=10)


class ExperimentConfig(_Strict):
    graph: GraphConfig
    problem: ProblemConfig
    compressor: CompressorConfig = Field(default_factory=CompressorConfig)
    steps: Union[Literal["auto"], StepsConfig] = "auto"
    tuning: TuningConfig = Field(default_factory=TuningConfig)
    init: InitConfig = Field(default_factory=InitConfig)
    run: RunConfig = Field(default_factory=RunConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)
    sweep: Optional[SweepConfig] = None
    verify: Optional[VerifyConfig] = None

    @property
    def n(self):
        return self.problem.n if self.problem.n is not None else self.graph.n


# ---------------------------------------------------------------- seeds

SEEDED = (("graph",), ("problem",), ("compressor",), ("init",))


def derive_seed(master_seed, label):
    """32-bit component seed split off ``master_seed`` by label."""
    return int(seed_sequence(master_seed, label).generate_state(1)[0])


def _needs_seed(cfg, part):
    if part == "graph":
        return cfg.graph.kind == "erdos_renyi" or cfg.graph.weight_rule == "uniform"
    if part == "problem":
        return True
    if part == "compressor":
        return cfg.compressor.kind == "stochastic_quantizer"
    return cfg.init.mode == "random"


def resolve_seeds(cfg, master_override=None):
    """Copy of ``cfg`` with every component seed filled in.

    Explicit component seeds are kept; the rest derive from ``run.master_seed``
    (or ``master_override``) through :func:`derive_seed`.  Components that
    draw no randomness get seed 0.
    """
    master = cfg.run.master_seed if master_override is None else int(master_override)
    doc = cfg.model_dump()
    doc["run"]["master_seed"] = master
    for (part,) in SEEDED:
        if doc[part]["seed"] is not None:
            continue
        if not _needs_seed(cfg, part):
            doc[part]["seed"] = 0
        elif master is None:
            raise ConfigError(f"{part}.seed is unset and run.master_seed is missing", path=("run",))
        else:
            doc[part]["seed"] = derive_seed(master, part)
    return ExperimentConfig.model_validate(doc)


def replicate_seed(cfg, replicate):
    """Compressor seed for replicate ``replicate`` (replicate 0 uses the resolved seed)."""
    if replicate == 0:
        return cfg.compressor.seed
    return derive_seed(cfg.compressor.seed, f"replicate={replicate}")


# ---------------------------------------------------------------- loading

def _node_line(root, path):
    """1-based line of the deepest node along ``path`` (keys and indices)."""
    node = root
    line = node.start_mark.line + 1 if node is not None else 1
    for key in path:
        nxt = None
        if isinstance(node, yaml.MappingNode):
            for k_node, v_node in node.value:
                if k_node.value == str(key):
                    nxt = v_node
                    line = k_node.start_mark.line + 1
                    break
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            nxt = node.value[key]
            line = nxt.start_mark.line + 1
        if nxt is None:
            break
        node = nxt
    return line


def _cross_checks(cfg):
    """Constraints spanning several sections, as ``(path, message)`` pairs."""
    out = []
    if cfg.problem.n is not None and cfg.problem.n != cfg.graph.n:
        out.append((("problem", "n"), f"problem.n={cfg.problem.n} differs from graph.n={cfg.graph.n}"))
    if cfg.graph.kind == "erdos_renyi" and cfg.graph.p is None:
        out.append((("graph",), "erdos_renyi graphs need an edge probability p"))
    if cfg.problem.q > cfg.problem.d:
        out.append((("problem", "q"), f"q={cfg.problem.q} exceeds d={cfg.problem.d}"))
    if cfg.compressor.kind == "top_k" and cfg.compressor.k > cfg.problem.d:
        out.append((("compressor", "k"), f"top_k k={cfg.compressor.k} exceeds d={cfg.problem.d}"))
    if cfg.sweep is not None:
        for i, value in enumerate(cfg.sweep.values):
            path = ("sweep", "values", i)
            if cfg.sweep.axis == "compressor":
                try:
                    CompressorConfig.model_validate(value)
                except ValidationError as exc:
                    out.append((path, exc.errors()[0]["msg"]))
            elif cfg.sweep.axis == "kappa":
                if isinstance(value, bool) or not isinstance(value, (int, float)) or not value > 0:
                    out.append((path, f"kappa values must be positive numbers, got {value!r}"))
            elif isinstance(value, bool) or not isinstance(value, int):
                out.append((path, f"seed values must be integers, got {value!r}"))
    return out


def _fmt_loc(loc):
    return ".".join(str(p) for p in loc) or "<document>"


def parse_config(text, source="<config>"):
    """Validate YAML ``text``; raises :class:`ConfigError` with ``source:line:`` prefixes."""
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        line = mark.line + 1 if mark is not None else 1
        raise ConfigError(f"{source}:{line}: malformed YAML: {exc.problem}", line=line) from None
    if not isinstance(data, dict):
        raise ConfigError(f"{source}:1: config must be a mapping at top level", line=1)
    try:
        cfg = ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        lines = []
        first = None
        for err in exc.errors():
            loc = tuple(p for p in err["loc"] if not (isinstance(p, str) and ("[" in p or p in ("str", "function-after"))))
            line = _node_line(root, loc)
            first = first or line
            lines.append(f"{source}:{line}: {_fmt_loc(loc)}: {err['msg']}")
        raise ConfigError("\n".join(lines), line=first) from None
    problems = _cross_checks(cfg)
    if problems:
        lines = [f"{source}:{_node_line(root, path)}: {_fmt_loc(path)}: {msg}" for path, msg in problems]
        raise ConfigError("\n".join(lines), line=_node_line(root, problems[0][0]))
    return cfg


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from None
    return parse_config(text, source=str(path))


def dump_config(cfg):
    """YAML text that :func:`parse_config` maps back to an equal config."""
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False, default_flow_style=False)


def to_plain(value):
    """Recursively convert numpy scalars/arrays for YAML output."""
    if isinstance(value, dict):
        return {k: to_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_plain(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    return value
