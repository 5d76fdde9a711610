"""Run configuration: YAML file -> validated pydantic model -> library objects.

Every block forbids unknown keys so a typo can never silently change an
experiment.  Vectors (forcing, sigma, marks, initial states) are given either
as a full list or as a sparse ``{index: value}`` mapping.
"""

from __future__ import annotations

import hashlib
import json
import math
from typing import Literal, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .. import models, solver, spaces
from .. import noise as nz


class ConfigError(ValueError):
    """Malformed or inconsistent configuration (exit code 2)."""


Vector = Union[float, list[float], dict[int, float]]


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelBlock(_Block):
    kind: Literal["sabra", "nse2d", "linear"] = "sabra"
    mu: float = Field(1.0, gt=0)
    # sabra
    n_shells: int = Field(16, ge=4)
    k0: float = Field(1.0, gt=0)
    a: float = 1.0
    b: float = -0.5
    c: float = -0.5
    # nse2d
    kmax: int = Field(8, ge=1)
    # linear
    eigenvalues: list[float] | None = None
    certified_C_B3: float | None = Field(None, gt=0)
    certified_c0_B4: float | None = Field(None, gt=0)


class CertificateBlock(_Block):
    Lg: float | None = Field(None, ge=0)
    Lr: float | None = Field(None, ge=0)
    Lg_tilde: float | None = Field(None, ge=0)
    Lgv_hat: float | None = Field(None, ge=0)


class NoiseBlock(_Block):
    family: Literal["none", "additive", "linear_diagonal", "bounded_multiplicative"] = "none"
    sigma: Vector = 0.0
    marks: list[Vector] = []
    weights: list[float] = []
    eps1: float = Field(1.0, gt=0, le=1)
    eps2: float = Field(1.0, gt=0, le=1)
    certificates: CertificateBlock = CertificateBlock()

    @model_validator(mode="after")
    def _atoms(self):
        if len(self.marks) != len(self.weights):
            raise ValueError("marks and weights must have the same length")
        if any(w <= 0 for w in self.weights):
            raise ValueError("jump weights must be positive")
        return self


class ForcingBlock(_Block):
    kind: Literal["constant", "exp_approach"] = "constant"
    f_inf: Vector = 0.0
    g: Vector | None = None
    rate: float = Field(1.0, gt=0)


class SolverBlock(_Block):
    dt: float = Field(1e-3, gt=0)
    T: float = Field(1.0, gt=0)
    tau: float = 0.0
    truncation_radius: float = Field(math.inf, gt=0)
    escalate_truncation: bool = False
    record_stride: int = Field(10, ge=1)
    kappa: float | None = Field(None, gt=0)
    kappa_tilde: float | None = Field(None, gt=0)


class InitBlock(_Block):
    kind: Literal["zero", "fixed", "gaussian"] = "zero"
    state: Vector = 0.0
    scale: float = Field(1.0, ge=0)


class SimulateBlock(_Block):
    save_states: bool = False


class VerifyBlock(_Block):
    samples: int = Field(10_000, ge=1)
    certificate_samples: int = Field(10_000, ge=1)
    lipschitz_radius: float = Field(10.0, gt=0)


class PullbackBlock(_Block):
    times: list[float] = [1.0, 2.0, 4.0, 8.0]
    v_integral_times: list[float] = [1.0, 4.0]


class InvariantBlock(_Block):
    burn_in: float = Field(0.0, ge=0)
    windows: list[float] = [1.0, 2.0, 4.0, 8.0]
    residual_time: float = Field(0.5, gt=0)
    max_atoms: int = Field(400, ge=1)
    paths_per_atom: int = Field(2, ge=1)
    n_test_functions: int = Field(64, ge=1)


class SweepBlock(_Block):
    eps_hat: tuple[float, float] = (0.25, 0.25)
    ladder_j: list[int] = [1, 2, 3, 4, 5]
    T: float | None = Field(None, gt=0)
    dp_atoms: int = Field(200, ge=2)
    n_boot: int = Field(10, ge=0)

    @field_validator("eps_hat")
    @classmethod
    def _range(cls, v):
        if not all(0 <= e <= 1 for e in v):
            raise ValueError("eps_hat components must lie in [0, 1]")
        return v


class AutonomyBlock(_Block):
    tau_ladder: list[float] = [-2.0, -4.0, -8.0]
    t_pullback: float = Field(4.0, gt=0)
    window: float = Field(1.0, gt=0)
    coupled_T: float = Field(1.0, gt=0)
    dp_atoms: int = Field(200, ge=2)
    n_boot: int = Field(10, ge=0)
    stable_factor: float = Field(1.5, gt=1)


class TailBlock(_Block):
    R_ladder: list[float] = [math.e**2, math.e**3, math.e**4]
    window: float = Field(2.0, gt=0)

    @field_validator("R_ladder")
    @classmethod
    def _gt1(cls, v):
        if any(r <= 1 for r in v):
            raise ValueError("every R must exceed 1")
        return v


class ExperimentBlock(_Block):
    n_paths: int = Field(1000, ge=1)
    init: InitBlock = InitBlock()
    simulate: SimulateBlock = SimulateBlock()
    verify: VerifyBlock = VerifyBlock()
    pullback: PullbackBlock = PullbackBlock()
    invariant: InvariantBlock = InvariantBlock()
    sweep: SweepBlock = SweepBlock()
    autonomy: AutonomyBlock = AutonomyBlock()
    tail: TailBlock = TailBlock()


class RunConfig(_Block):
    seed: int = Field(0, ge=0, lt=2**64)
    output_dir: str = "runs"
    model: ModelBlock = ModelBlock()
    noise: NoiseBlock = NoiseBlock()
    forcing: ForcingBlock = ForcingBlock()
    solver: SolverBlock = SolverBlock()
    experiment: ExperimentBlock = ExperimentBlock()

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form, excluding the output location."""
        d = self.model_dump(mode="json", exclude={"output_dir"})
        return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping at the top level")
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


# -- builders ------------------------------------------------------------------

def vector(spec, dim: int, name: str) -> np.ndarray:
    if isinstance(spec, dict):
        out = np.zeros(dim)
        for i, v in spec.items():
            if not 0 <= i < dim:
                raise ConfigError(f"{name}: index {i} outside 0..{dim - 1}")
            out[i] = v
        return out
    arr = np.asarray(spec, dtype=float)
    if arr.ndim == 0:
        return np.full(dim, float(arr))
    if arr.shape != (dim,):
        raise ConfigError(f"{name}: expected {dim} entries, got {arr.size}")
    return arr


def build_model(block: ModelBlock) -> models.ModelSpec:
    certs = {k: v for k, v in (("certified_C_B3", block.certified_C_B3),
                               ("certified_c0_B4", block.certified_c0_B4)) if v is not None}
    try:
        if block.kind == "sabra":
            return models.build_sabra(block.n_shells, block.k0, block.a, block.b, block.c, block.mu, **certs)
        if block.kind == "nse2d":
            return models.build_nse2d(block.kmax, block.mu, **certs)
        if block.eigenvalues is None:
            raise ConfigError("linear model needs eigenvalues")
        m = models.build_linear(block.eigenvalues, block.mu)
        return m
    except (ValueError, spaces.DimensionError) as exc:
        raise ConfigError(f"model: {exc}") from exc


def build_noise(block: NoiseBlock, space) -> nz.NoiseSpec:
    if block.family == "none":
        return nz.no_noise(space)
    c = block.certificates
    overrides = {f"certified_{k}": v for k, v in
                 (("Lg", c.Lg), ("Lr", c.Lr), ("Lg_tilde", c.Lg_tilde), ("Lgv_hat", c.Lgv_hat)) if v is not None}
    sigma = vector(block.sigma, space.dim, "noise.sigma")
    marks = [vector(z, space.dim, "noise.marks") for z in block.marks]
    try:
        return nz.make_noise(space, block.family, sigma, marks, block.weights, block.eps1, block.eps2,
                             **overrides)
    except ValueError as exc:
        raise ConfigError(f"noise: {exc}") from exc


def build_forcing(block: ForcingBlock, dim: int) -> models.ForcingSpec:
    f_inf = vector(block.f_inf, dim, "forcing.f_inf")
    if block.kind == "constant":
        return models.ForcingSpec.constant(f_inf)
    if block.g is None:
        raise ConfigError("exp_approach forcing needs g")
    return models.ForcingSpec.exp_approach(f_inf, vector(block.g, dim, "forcing.g"), block.rate)


def build_solver(block: SolverBlock, model: models.ModelSpec) -> solver.SolverConfig:
    try:
        cfg = solver.SolverConfig(dt=block.dt, truncation_radius=block.truncation_radius,
                                  escalate_truncation=block.escalate_truncation,
                                  record_stride=block.record_stride, kappa=block.kappa,
                                  kappa_tilde=block.kappa_tilde)
        cfg.check_rates(model)
    except ValueError as exc:
        raise ConfigError(f"solver: {exc}") from exc
    return cfg


def init_sampler(block: InitBlock, dim: int):
    """Initial states: ``None`` (zero), a fixed state, or an i.i.d. Gaussian sampler."""
    if block.kind == "zero":
        return None
    if block.kind == "fixed":
        return vector(block.state, dim, "experiment.init.state")
    scale = block.scale
    return lambda rng, n: scale * rng.standard_normal((n, dim))


class Built:
    """Library objects assembled from a validated :class:`RunConfig`."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.model = build_model(cfg.model)
        dim = self.model.dim
        self.noise = build_noise(cfg.noise, self.model.space)
        self.forcing = build_forcing(cfg.forcing, dim)
        self.solver = build_solver(cfg.solver, self.model)
        self.init = init_sampler(cfg.experiment.init, dim)
