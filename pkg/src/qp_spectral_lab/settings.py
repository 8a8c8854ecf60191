import hashlib
import json
import logging
from enum import Enum
from pathlib import Path
from typing import Any

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings

from qp_spectral_lab.constants import SCHEMA_VERSION
from qp_spectral_lab.errors import ValidationFailure
from qp_spectral_lab.greens import terminal_rate
from qp_spectral_lab.operators import OperatorSpec

logger = logging.getLogger(__name__)

HASH_EXCLUDED_FIELDS = {"workers", "output_dir"}


class ScaleSchedule(BaseModel):
    """
    Scales N₁ < N₂ ≤ N and the exponents of the multiscale step, relaxed to
    desk sizes.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    gamma: float = Field(gt=0.0, le=1.0)
    c1: float | None = None
    c3: float | None = None
    c4: float | None = None
    n1: int = Field(default=8, ge=1)
    n2: int = Field(default=32, ge=1)
    n: int = Field(default=64, ge=1)
    rho_bar_per_scale: list[float] | None = None

    @model_validator(mode="before")
    @classmethod
    def _default_exponents(cls, data: Any) -> Any:
        if isinstance(data, dict) and data.get("gamma") is not None:
            gamma = float(data["gamma"])
            data = {
                **data,
                "c1": data.get("c1") if data.get("c1") is not None else 0.05 * gamma,
                "c3": data.get("c3") if data.get("c3") is not None else 0.02 * gamma,
                "c4": data.get("c4") if data.get("c4") is not None else 0.08 * gamma,
            }
        return data

    @model_validator(mode="after")
    def check_ordering(self) -> "ScaleSchedule":
        if not self.n1 < self.n2 <= self.n:
            raise ValueError(f"Scales must satisfy N1 < N2 <= N, got {self.n1}, {self.n2}, {self.n}")
        if not 0 < self.c1 < self.gamma:
            raise ValueError(f"c1 must lie in (0, γ), got {self.c1}")
        if not 0 < self.c3 < self.c4 < self.gamma / 10:
            raise ValueError(f"Annulus exponents must satisfy 0 < c3 < c4 < γ/10, got {self.c3}, {self.c4}")
        if self.rho_bar_per_scale is not None and len(self.rho_bar_per_scale) != 3:
            raise ValueError("rho_bar_per_scale needs one rate for each of N1, N2, N")
        return self

    @classmethod
    def desk(cls, gamma: float, dim: int = 1) -> "ScaleSchedule":
        """Desk defaults (8, 32, 64) at d = 1 and (4, 8, 16) above."""
        if dim == 1:
            return cls(gamma=gamma)
        return cls(gamma=gamma, n1=4, n2=8, n=16)

    @property
    def scales(self) -> tuple[int, int, int]:
        return self.n1, self.n2, self.n

    def rate_at(self, scale: int, rho: float) -> float:
        """ρ̄ at one of the schedule scales, the terminal rate otherwise."""
        if self.rho_bar_per_scale is not None and scale in self.scales:
            return self.rho_bar_per_scale[self.scales.index(scale)]
        return terminal_rate(rho, self.gamma)


class GridSettings(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    theta_count: int = Field(default=1024, ge=1)
    energy_count: int = Field(default=16, ge=1)
    y_count: int = Field(default=512, ge=1)
    line_count: int = Field(default=4096, ge=1)
    section_count: int = Field(default=64, ge=1)
    branch_samples: int = Field(default=512, ge=2)
    phase_count: int = Field(default=64, ge=1)


class ToleranceSettings(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    residual: float = Field(default=1e-10, gt=0.0)
    condition_max: float = Field(default=1e14, gt=1.0)
    hermiticity: float = Field(default=1e-13, gt=0.0)
    eigen_residual: float = Field(default=1e-10, gt=0.0)
    orthonormality: float = Field(default=1e-10, gt=0.0)
    fixed_point: float = Field(default=1e-13, gt=0.0)
    window_floor: float = Field(default=1e-4, ge=0.0)
    localization_floor: float = Field(default=0.2, ge=0.0)
    localization_ceiling: float = Field(default=10.0, gt=0.0)
    poisson_gap: float = Field(default=1e-6, gt=0.0)
    parseval: float = Field(default=1e-12, gt=0.0)
    block_error: float = Field(default=1e-8, gt=0.0)
    poisson_residual: float = Field(default=1e-8, gt=0.0)
    strict_asymptotics: bool = False

    @model_validator(mode="after")
    def check_localization_range(self) -> "ToleranceSettings":
        if self.localization_floor >= self.localization_ceiling:
            raise ValueError("localization_floor must be below localization_ceiling")
        return self


class CalibrationSettings(BaseModel):
    """Constants the theory leaves unspecified; `calibrate` refreshes them."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    c_res2: float = Field(default=1.0, ge=0.0)
    c5: float = Field(default=1.0, ge=0.0)
    c1_branch: float = Field(default=1.0, ge=0.0)
    localization_factor: float = Field(default=0.9, ge=0.0)
    duality_tolerance: float = Field(default=0.05, ge=0.0)
    quasimode_threshold: float | None = Field(default=None, ge=0.0)
    ldt_failing_fraction: dict[int, float] = Field(default_factory=dict)
    continuity_factor: float = Field(default=10.0, gt=0.0)
    branch_coupling_max: float = Field(default=0.05, gt=0.0)
    msa_norm_factor: float = Field(default=8.0, ge=1.0)


class GreenParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    size: int = Field(default=16, ge=0)
    energy: float = 0.5
    epsilon: float = Field(default=0.0, ge=0.0)


class LdtScanParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    scales: list[int] = Field(default_factory=lambda: [8, 32], min_length=1)
    energies: list[float] | None = None
    initial_delta: float = Field(default=0.1, gt=0.0)
    initial_size: int = Field(default=8, ge=0)
    resonance_size: int = Field(default=16, ge=1)
    resonance_samples: int = Field(default=20, ge=0)
    heatmap: bool = True


class MsaParams(BaseModel):
    """
    With good_only, theta_count seeded good phases are drawn (at most
    max_draws candidates); otherwise the uniform phase grid is used.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    theta_count: int = Field(default=100, ge=1)
    energy: float = 0.5
    good_only: bool = True
    max_draws: int | None = Field(default=None, ge=1)


class LocalizeParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    size: int = Field(default=64, ge=1)
    theta_count: int = Field(default=32, ge=1)


class MeasureMode(str, Enum):
    BRANCH = "branch"
    DIRECT = "direct"


class BranchParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    size: int = Field(default=32, ge=1)
    truncation: int = Field(default=16, ge=0)
    big_size: int = Field(default=96, ge=2)
    refine_rounds: int = Field(default=2, ge=0)
    resample_factor: int = Field(default=1, ge=1)
    measure_mode: MeasureMode = MeasureMode.BRANCH

    @model_validator(mode="after")
    def check_boxes(self) -> "BranchParams":
        if self.truncation >= self.size:
            raise ValueError("Quasimode truncation radius must be below the branch box size")
        if self.big_size <= self.size:
            raise ValueError("The residual box must strictly contain the branch box")
        return self


class DualityParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    direct_size: int = Field(default=256, ge=1)
    dual_size: int = Field(default=256, ge=1)
    doublings: int = Field(default=0, ge=0)


class PoissonParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    big_size: int = Field(default=64, ge=2)
    sub_size: int = Field(default=32, ge=0)
    pairs: int = Field(default=20, ge=1)
    delyon_scales: list[int] = Field(default_factory=lambda: [16, 32, 64], min_length=1)

    @model_validator(mode="after")
    def check_boxes(self) -> "PoissonParams":
        if self.sub_size >= self.big_size:
            raise ValueError("Poisson sub-box must lie strictly inside the big box")
        return self


class BenchParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    sizes: list[int] = Field(default_factory=lambda: [64, 128, 256, 512], min_length=1)
    block_size: int = Field(default=16, ge=1)
    energy: float = 2.5
    repeats: int = Field(default=1, ge=1)


class CommandSettings(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    green: GreenParams = Field(default_factory=GreenParams)
    ldt_scan: LdtScanParams = Field(default_factory=LdtScanParams)
    msa_verify: MsaParams = Field(default_factory=MsaParams)
    localize: LocalizeParams = Field(default_factory=LocalizeParams)
    branch: BranchParams = Field(default_factory=BranchParams)
    duality: DualityParams = Field(default_factory=DualityParams)
    poisson: PoissonParams = Field(default_factory=PoissonParams)
    bench: BenchParams = Field(default_factory=BenchParams)


class SweepAxis(str, Enum):
    THETA = "theta"
    ENERGY = "E"
    COUPLING = "lambda"
    FREQUENCY = "omega_t"


class SweepSettings(BaseModel):
    """Grid of a one-parameter sweep: explicit values or a linspace."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    command: str = "green"
    values: list[float] | None = None
    start: float = 0.0
    stop: float = 1.0
    count: int = Field(default=8, ge=0)

    def grid(self) -> list[float]:
        if self.values is not None:
            return [float(v) for v in self.values]
        if self.count == 0:
            return []
        if self.count == 1:
            return [float(self.start)]
        step = (self.stop - self.start) / (self.count - 1)
        return [float(self.start + k * step) for k in range(self.count)]


class ExperimentConfig(BaseModel):
    """
    Versioned experiment configuration. Every tolerance and constant used by
    a command has a default here; the seed is mandatory.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    schema_version: str
    seed: int
    operator: OperatorSpec
    schedule: ScaleSchedule | None = None
    grids: GridSettings = Field(default_factory=GridSettings)
    tolerances: ToleranceSettings = Field(default_factory=ToleranceSettings)
    calibration: CalibrationSettings = Field(default_factory=CalibrationSettings)
    commands: CommandSettings = Field(default_factory=CommandSettings)
    sweep: SweepSettings = Field(default_factory=SweepSettings)
    output_dir: Path | None = None
    workers: int = Field(default=1, ge=1)
    failure_fraction_max: float = Field(default=0.1, ge=0.0, le=1.0)

    @field_validator("schema_version")
    @classmethod
    def check_schema_version(cls, value: str) -> str:
        if value != SCHEMA_VERSION:
            raise ValueError(f"Unsupported schema version {value!r}, expected {SCHEMA_VERSION!r}")
        return value

    @model_validator(mode="after")
    def check_schedule_gamma(self) -> "ExperimentConfig":
        if self.schedule is not None and abs(self.schedule.gamma - self.operator.gamma) > 1e-12:
            raise ValueError(
                f"Schedule γ={self.schedule.gamma} differs from the symbol's γ={self.operator.gamma}"
            )
        return self

    @property
    def scale_schedule(self) -> ScaleSchedule:
        if self.schedule is not None:
            return self.schedule
        return ScaleSchedule.desk(self.operator.gamma, self.operator.lattice_dim)

    @property
    def rho_bar(self) -> float:
        return terminal_rate(self.operator.rho, self.operator.gamma)

    @classmethod
    def load(cls, path: Path | str) -> "ExperimentConfig":
        """
        Read a config from a JSON file.
        :raises ValidationFailure: If the file is unreadable or invalid
        """
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ValidationFailure(f"Cannot read config {path}: {exc}", path=str(path)) from exc
        except json.JSONDecodeError as exc:
            raise ValidationFailure(f"Config {path} is not valid JSON: {exc}", path=str(path)) from exc
        try:
            return cls.model_validate(raw)
        except ValidationError as exc:
            raise ValidationFailure(
                f"Config {path} failed validation",
                path=str(path),
                errors=[{"loc": list(map(str, e["loc"])), "msg": e["msg"]} for e in exc.errors()],
            ) from exc

    def canonical_json(self) -> str:
        payload = self.model_dump(mode="json", by_alias=True, exclude=HASH_EXCLUDED_FIELDS)
        return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=True)

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def with_operator(self, operator: OperatorSpec) -> "ExperimentConfig":
        return self.model_copy(update={"operator": operator})

    def with_calibration_lock(self, path: Path | str) -> "ExperimentConfig":
        """
        Replace calibration constants by those frozen in a lockfile written
        by the calibrate command.
        :raises ValidationFailure: If the lockfile is unreadable or invalid
        """
        path = Path(path)
        try:
            lock = json.loads(path.read_text(encoding="utf-8"))
            frozen = {**self.calibration.model_dump(), **lock["calibration"]}
            calibration = CalibrationSettings.model_validate(frozen)
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ValidationFailure(f"Cannot use calibration lock {path}: {exc}", path=str(path)) from exc
        except ValidationError as exc:
            raise ValidationFailure(
                f"Calibration lock {path} failed validation",
                path=str(path),
                errors=[{"loc": list(map(str, e["loc"])), "msg": e["msg"]} for e in exc.errors()],
            ) from exc
        logger.info(f"Loaded calibration lock {path}")
        return self.model_copy(update={"calibration": calibration})


class RunSettings(BaseSettings):
    """
    Environment overrides. Only the output directory can be set this way.
    """

    out_dir: Path | None = Field(default=None, validation_alias="QPLAB_OUT_DIR")
