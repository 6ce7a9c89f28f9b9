"""Compressed distributed saddle-point methods for linearly constrained optimization."""
from .compressors import CompressorSpec, CompressorState, compress, parse_spec, verify_st_contract
from .engine import InitSpec, StepSizes, init_ce, init_de, run, step_ce, step_de, tune_steps
from .graph import GraphSpec, build_graph, laplacian, spectral
from .metrics import RunTrace, comm_savings, conservation_check, fit_linear_rate, residual_sq
from .problems import check_kkt, generate_clec, generate_dlec, kkt_oracle_clec, kkt_oracle_dlec

__all__ = [
    "CompressorSpec", "CompressorState", "compress", "parse_spec", "verify_st_contract",
    "InitSpec", "StepSizes", "init_ce", "init_de", "run", "step_ce", "step_de", "tune_steps",
    "GraphSpec", "build_graph", "laplacian", "spectral",
    "RunTrace", "comm_savings", "conservation_check", "fit_linear_rate", "residual_sq",
    "check_kkt", "generate_clec", "generate_dlec", "kkt_oracle_clec", "kkt_oracle_dlec",
]
