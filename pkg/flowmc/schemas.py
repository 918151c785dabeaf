from typing import Any, Dict, List, Literal, Optional
import math
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from flowmc.errors import InvalidConfigError
from flowmc.models import GuidingVariant, LossKind, PartitionScheme, Precision, ProposalKind, TransformKind


def coverage_minimum(dim: int) -> int:
    """Fewest coupling layers for which every dimension can influence every other"""
    return min(max(dim, 1), 4)


class ConditioningFeature(BaseModel):
    name: str
    low: float = 0.0
    high: float = 1.0

    @model_validator(mode="after")
    def check_range(self):
        if not self.high > self.low:
            raise ValueError(f"conditioning feature {self.name}: high must exceed low")
        return self


class FlowSpec(BaseModel):
    dim: int = Field(default=2, ge=1)
    n_layers: int = Field(default=2, ge=1)
    kind: TransformKind = TransformKind.PIECEWISE_QUADRATIC
    bins: int = Field(default=32, ge=1)
    partition: PartitionScheme = PartitionScheme.HALF
    one_blob: Optional[bool] = None  # None: one-blob except for affine/additive
    one_blob_bins: int = Field(default=32, ge=2)
    outer_width: int = Field(default=64, ge=1)
    nesting: int = Field(default=4, ge=1)
    skips: bool = True
    precision: Precision = Precision.FLOAT64
    enforce_coverage: bool = True
    conditioning: List[ConditioningFeature] = []

    @property
    def uses_one_blob(self) -> bool:
        if self.one_blob is None:
            return self.kind not in (TransformKind.AFFINE, TransformKind.ADDITIVE)
        return self.one_blob

    @property
    def encoding_bins(self) -> Optional[int]:
        return self.one_blob_bins if self.uses_one_blob else None

    @model_validator(mode="after")
    def check_layout(self):
        if self.partition == PartitionScheme.EVEN_ODD and self.dim < 2:
            raise ValueError("even/odd partitioning needs at least 2 dimensions")
        minimum = coverage_minimum(self.dim)
        if self.enforce_coverage and self.n_layers < minimum:
            raise ValueError(
                f"{self.n_layers} coupling layers cannot couple all {self.dim} dimensions: "
                f"alternating partitions need at least {minimum} layers for D={self.dim}"
            )
        names = [f.name for f in self.conditioning]
        if len(set(names)) != len(names):
            raise ValueError("conditioning feature names must be unique")
        return self


class TrainConfig(BaseModel):
    loss: LossKind = LossKind.KL
    batch_size: int = Field(default=4096, ge=1)
    buffer_capacity: int = Field(default=65536, ge=1)
    steps_per_batch: int = Field(default=1, ge=0)
    grad_clip_norm: Optional[float] = Field(default=None, gt=0)
    learning_rate: float = Field(default=1e-3, gt=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    epsilon: float = Field(default=1e-8, gt=0)
    max_rejected_fraction: float = Field(default=0.01, ge=0, le=1)

    @model_validator(mode="after")
    def default_clip(self):
        if self.loss == LossKind.CHI2 and self.grad_clip_norm is None:
            self.grad_clip_norm = 50.0
        return self


class ScheduleSpec(BaseModel):
    budget: int = Field(default=1023, ge=1)
    proposal: ProposalKind = ProposalKind.FLOW
    train: bool = True
    grid_resolution: int = Field(default=64, ge=2)
    eval_samples: int = Field(default=65536, ge=2)

    def iteration_counts(self) -> List[int]:
        """Power-of-two sample counts 1, 2, 4, ... whose total does not exceed the budget"""
        iterations = int(math.floor(math.log2(self.budget + 1)))
        return [2 ** i for i in range(iterations)]


class TargetSpec(BaseModel):
    image: Optional[str] = None
    procedural: Optional[str] = None
    resolution: int = Field(default=64, ge=2)

    @model_validator(mode="after")
    def check_source(self):
        if self.image is not None and self.procedural is not None:
            raise ValueError("target: give either image or procedural, not both")
        return self


class MixtureComponent(BaseModel):
    weight: float = Field(gt=0)
    mean: List[float]
    sigma: List[float]

    @field_validator("sigma")
    @classmethod
    def positive_sigma(cls, v):
        if any(s <= 0 for s in v):
            raise ValueError("mixture sigmas must be positive")
        return v

    @model_validator(mode="after")
    def check_lengths(self):
        if len(self.mean) != len(self.sigma):
            raise ValueError("mixture mean and sigma need the same length")
        return self


class ScenarioSpec(BaseModel):
    name: str
    lobe_u: float = Field(ge=0, le=1)
    lobe_v: float = Field(ge=0, le=1)
    lobe_sigma: float = Field(gt=0, le=0.5)
    radiance: List[MixtureComponent]
    atom_probability: float = Field(default=0.0, ge=0, lt=1)

    @field_validator("radiance")
    @classmethod
    def two_dimensional(cls, v):
        if not v:
            raise ValueError("radiance needs at least one mixture component")
        if any(len(c.mean) != 2 for c in v):
            raise ValueError("radiance components must be two-dimensional")
        return v


class MisSpec(BaseModel):
    scenarios: List[ScenarioSpec] = []
    variants: List[GuidingVariant] = list(GuidingVariant)
    fixed_selection: float = Field(default=0.5, gt=0, lt=1)
    selection_outer_width: int = Field(default=32, ge=1)
    selection_nesting: int = Field(default=2, ge=1)
    eval_samples: int = Field(default=65536, ge=2)

    @model_validator(mode="after")
    def unique_names(self):
        names = [s.name for s in self.scenarios]
        if len(set(names)) != len(names):
            raise ValueError("scenario names must be unique")
        return self


class PssSpec(BaseModel):
    dim: int = 4
    eval_samples: int = Field(default=65536, ge=2)

    @field_validator("dim")
    @classmethod
    def even_dim(cls, v):
        if v % 2 or not 4 <= v <= 8:
            raise ValueError(f"synthetic primary-sample-space target needs an even D in [4, 8], got {v}")
        return v


class DiagnoseSpec(BaseModel):
    q1: float = Field(default=1.0, gt=0)
    q2: float = Field(default=3.0, gt=0)
    target: Literal["uniform", "step", "ramp"] = "uniform"
    theta_min: float = Field(default=0.01, gt=0, lt=1)
    theta_max: float = Field(default=0.99, gt=0, lt=1)
    theta_count: int = Field(default=99, ge=1)

    @model_validator(mode="after")
    def ordered_grid(self):
        if self.theta_max < self.theta_min:
            raise ValueError("theta_max must not be below theta_min")
        return self


Command = Literal["train-image", "guiding-bench", "diagnose-appendix-b", "pss-bench"]


class RunConfig(BaseModel):
    command: Command
    seed: int = Field(default=0, ge=0)
    out_dir: Optional[str] = None
    target: TargetSpec = TargetSpec()
    flow: FlowSpec = FlowSpec()
    train: TrainConfig = TrainConfig()
    schedule: ScheduleSpec = ScheduleSpec()
    mis: MisSpec = MisSpec()
    pss: PssSpec = PssSpec()
    diagnose: DiagnoseSpec = DiagnoseSpec()

    @model_validator(mode="after")
    def check_command(self):
        if self.command == "train-image":
            if self.flow.dim != 2:
                raise ValueError("train-image needs flow.dim = 2")
            if self.target.image is None and self.target.procedural is None:
                raise ValueError("train-image needs target.image or target.procedural")
        elif self.command == "guiding-bench":
            if self.flow.dim != 2:
                raise ValueError("guiding-bench needs flow.dim = 2")
            if not self.mis.scenarios:
                raise ValueError("guiding-bench needs at least one [[mis.scenarios]] entry")
        elif self.command == "pss-bench":
            if self.flow.dim != self.pss.dim:
                raise ValueError(f"pss-bench needs flow.dim = pss.dim = {self.pss.dim}")
        return self


class TrainRecord(BaseModel):
    x: List[float]
    conditioning: List[float] = []
    f_est: float = Field(ge=0, allow_inf_nan=False)
    proposal_pdf: float = Field(gt=0, allow_inf_nan=False)
    analytic_pdf: float = Field(default=0.0, ge=0, allow_inf_nan=False)
    atom: bool = False


class StepMetrics(BaseModel):
    loss: float
    grad_norm: float
    raw_grad_norm: float
    clipped: bool
    rejected: bool = False


class IterationRecord(BaseModel):
    iteration: int
    samples: int
    loss: float
    estimate: float
    variance: float
    weight_p9999: float
    wallclock_ms: float = 0.0
    context_estimates: List[float] = []
    context_variances: List[float] = []


class ExperimentReport(BaseModel):
    iterations: List[IterationRecord] = []
    combined_estimate: Optional[float] = None
    total_steps: int = 0
    rejected_steps: int = 0
    aborted: bool = False
    error: Optional[str] = None

    @property
    def rejected_fraction(self) -> float:
        if self.total_steps == 0:
            return 0.0
        return self.rejected_steps / self.total_steps


class MetricSet(BaseModel):
    estimator_mean: float
    estimator_variance: float
    weight_quantiles: Dict[str, float] = {}
    mape: Optional[float] = None
    cross_entropy: Optional[float] = None
    clamped_inputs: int = 0

    def as_rows(self) -> List[Dict[str, Any]]:
        rows = [
            {"key": "estimator_mean", "value": self.estimator_mean},
            {"key": "estimator_variance", "value": self.estimator_variance},
        ]
        for name, value in self.weight_quantiles.items():
            rows.append({"key": f"weight_{name}", "value": value})
        if self.mape is not None:
            rows.append({"key": "mape", "value": self.mape})
        if self.cross_entropy is not None:
            rows.append({"key": "cross_entropy", "value": self.cross_entropy})
        rows.append({"key": "clamped_inputs", "value": self.clamped_inputs})
        return rows


class AppendixBGradients(BaseModel):
    theta: float
    density_norm_grad: float
    mass_norm_grad: float
    exact_grad: float

    @property
    def density_norm_grad_sign(self) -> int:
        return int(math.copysign(1, self.density_norm_grad)) if self.density_norm_grad else 0


def parse_model(model_cls, data: Dict[str, Any]):
    """Validate `data` into `model_cls`, reporting failures as InvalidConfigError"""
    try:
        return model_cls.model_validate(data)
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or model_cls.__name__}: {err['msg']}" for err in e.errors()
        )
        raise InvalidConfigError(f"invalid {model_cls.__name__}: {problems}")
