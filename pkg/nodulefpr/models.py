from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

Regime = Literal["ae", "dae", "r", "a", "s"]
REGIMES: tuple[str, ...] = ("ae", "dae", "r", "a", "s")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataConfig(_Section):
    # None means `<out>/data`, the phantom command's output.
    data_dir: str | None = None


class FoldsConfig(_Section):
    fold_count: int = Field(default=8, ge=2)
    validation_fraction: float = Field(default=0.1, ge=0.0, lt=1.0)


class AutoencoderConfig(_Section):
    hidden_widths: list[int] = Field(default_factory=lambda: [1024, 512, 384], min_length=3, max_length=3)
    code_dim: int = Field(default=256, ge=1)
    init_std: float = Field(default=0.05, gt=0.0)
    learning_rate: float = Field(default=0.001, gt=0.0)
    decay_rate: float = Field(default=0.04, ge=0.0, lt=1.0)
    decay_every: int = Field(default=1000, ge=1)
    batch_size: int = Field(default=64, ge=1)
    iterations: int = Field(default=2000, ge=1)
    noise_level: float = Field(default=0.25, ge=0.0, lt=1.0)
    eval_every: int = Field(default=100, ge=1)
    log_every: int = Field(default=100, ge=1)

    @field_validator("hidden_widths")
    @classmethod
    def validate_widths(cls, value: list[int]) -> list[int]:
        if any(width < 1 for width in value):
            raise ValueError("hidden widths must be positive")
        return value


class CategorizerConfig(_Section):
    k: int = Field(default=5, ge=1)
    restarts: int = Field(default=10, ge=1)
    max_iter: int = Field(default=300, ge=1)
    zero_eps: float = Field(default=1e-9, ge=0.0)
    sweep_k: list[int] = Field(default_factory=lambda: [3, 5, 7, 10], min_length=1)


class ClassifierConfig(_Section):
    kernels: list[int] = Field(default_factory=lambda: [5, 3, 3], min_length=3, max_length=3)
    channels: list[int] = Field(default_factory=lambda: [64, 128, 16], min_length=3, max_length=3)
    hidden_units: int = Field(default=48, ge=1)
    conv_init_std: float = Field(default=0.05, gt=0.0)
    dense_init_std: float = Field(default=0.04, gt=0.0)
    learning_rate: float = Field(default=0.001, gt=0.0)
    decay_rate: float = Field(default=0.04, ge=0.0, lt=1.0)
    decay_every: int = Field(default=500, ge=1)
    dropout: float = Field(default=0.5, ge=0.0, lt=1.0)
    dropout_layers: Literal["hidden", "all"] = "hidden"
    batch_size: int = Field(default=32, ge=2)
    iterations: int = Field(default=1000, ge=1)
    eval_every: int = Field(default=200, ge=1)
    patience: int = Field(default=5, ge=1)
    max_translation: int = Field(default=4, ge=0)
    log_every: int = Field(default=100, ge=1)

    @model_validator(mode="after")
    def validate_kernels(self) -> "ClassifierConfig":
        if any(size < 1 or size % 2 == 0 for size in self.kernels):
            raise ValueError("kernel sizes must be odd")
        if any(later > earlier for earlier, later in zip(self.kernels, self.kernels[1:])):
            raise ValueError("kernel sizes must be non-increasing")
        if any(count < 1 for count in self.channels):
            raise ValueError("channel counts must be positive")
        return self


class EvaluationConfig(_Section):
    fp_levels: list[float] = Field(default_factory=lambda: [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0], min_length=1)
    bootstrap_resamples: int = Field(default=1000, ge=1)
    # Hit radius as a multiple of the annotated radius.
    hit_radius_scale: float = Field(default=1.0, gt=0.0)
    plot: bool = True

    @field_validator("fp_levels")
    @classmethod
    def validate_levels(cls, value: list[float]) -> list[float]:
        if any(level <= 0 for level in value):
            raise ValueError("FP levels must be positive")
        return sorted(value)


class PhantomSpec(_Section):
    scan_count: int = Field(default=16, ge=1)
    dims: list[int] = Field(default_factory=lambda: [32, 32, 16], min_length=3, max_length=3)
    spacing_mm: list[float] = Field(default_factory=lambda: [1.0, 1.0, 1.0], min_length=3, max_length=3)
    origin_mm: list[float] = Field(default_factory=lambda: [0.0, 0.0, 0.0], min_length=3, max_length=3)
    background_hu_mean: float = -850.0
    background_hu_std: float = Field(default=40.0, ge=0.0)
    nodules_per_scan: int = Field(default=4, ge=0)
    nodule_radius_vox: list[float] = Field(default_factory=lambda: [2.0, 6.0], min_length=2, max_length=2)
    nodule_hu: list[float] = Field(default_factory=lambda: [-100.0, 100.0], min_length=2, max_length=2)
    non_nodules_per_scan: int = Field(default=12, ge=0)
    vessel_fraction: float = Field(default=1 / 3, ge=0.0, le=1.0)
    wall_fraction: float = Field(default=1 / 3, ge=0.0, le=1.0)
    blob_fraction: float = Field(default=1 / 3, ge=0.0, le=1.0)
    jitter_mm: float = Field(default=0.5, ge=0.0)
    seed: int = 0

    @model_validator(mode="after")
    def validate_geometry(self) -> "PhantomSpec":
        if any(dim < 1 for dim in self.dims):
            raise ValueError("dims must be positive")
        if any(step <= 0 for step in self.spacing_mm):
            raise ValueError("spacing must be positive")
        low, high = self.nodule_radius_vox
        if not 0 < low <= high:
            raise ValueError("nodule radius range must satisfy 0 < low <= high")
        if 2 * high + 1 > min(self.dims):
            raise ValueError("largest nodule does not fit inside dims")
        if self.nodule_hu[0] > self.nodule_hu[1]:
            raise ValueError("nodule HU range is inverted")
        total = self.vessel_fraction + self.wall_fraction + self.blob_fraction
        if abs(total - 1.0) > 1e-6:
            raise ValueError("morphology fractions must sum to 1")
        return self


class RunConfig(_Section):
    master_seed: int = 0
    fold: int = Field(default=0, ge=0)
    regime: Regime = "ae"


class PipelineConfig(_Section):
    data: DataConfig = Field(default_factory=DataConfig)
    folds: FoldsConfig = Field(default_factory=FoldsConfig)
    autoencoder: AutoencoderConfig = Field(default_factory=AutoencoderConfig)
    categorizer: CategorizerConfig = Field(default_factory=CategorizerConfig)
    classifier: ClassifierConfig = Field(default_factory=ClassifierConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    phantom: PhantomSpec = Field(default_factory=PhantomSpec)
    run: RunConfig = Field(default_factory=RunConfig)

    @model_validator(mode="after")
    def validate_run(self) -> "PipelineConfig":
        if self.run.fold >= self.folds.fold_count:
            raise ValueError("run.fold must be below folds.fold_count")
        # A single network is one member no matter what K says.
        if self.run.regime == "s":
            self.categorizer.k = 1
        return self


class FoldSplit(BaseModel):
    test: list[str]
    train: list[str]
    validation: list[str]


class FoldPlan(BaseModel):
    fold_count: int
    seed: int
    folds: list[FoldSplit]

    @model_validator(mode="after")
    def validate_partition(self) -> "FoldPlan":
        if not self.folds or len(self.folds) != self.fold_count:
            raise ValueError("fold count does not match folds")
        everything = set(self.folds[0].test) | set(self.folds[0].train) | set(self.folds[0].validation)
        seen_as_test: list[str] = []
        for split in self.folds:
            test, train, validation = set(split.test), set(split.train), set(split.validation)
            if test & train or test & validation or train & validation:
                raise ValueError("fold sets overlap")
            if test | train | validation != everything:
                raise ValueError("fold sets do not cover all scans")
            seen_as_test.extend(split.test)
        if sorted(seen_as_test) != sorted(everything):
            raise ValueError("every scan must be a test scan exactly once")
        return self


class RegimeSets(BaseModel):
    regime: Regime
    k: int
    nodules: list[int]
    non_nodules: list[list[int]]
    validation: list[int]
    seed: int


class EnsembleManifest(BaseModel):
    regime: Regime
    k: int
    members: list[str]
    seeds: list[int]
    cluster_model: str | None = None
    config_hash: str
    iterations: list[int]


class EvalSummary(BaseModel):
    fp_levels: list[float]
    sensitivities: list[float]
    cpm: float
    ci_low: list[float]
    ci_high: list[float]
    total_nodules: int
    scan_count: int
    candidate_count: int
    resamples: int


class ModelStatsRecord(BaseModel):
    members: int
    member_parameters: int
    member_flops: int
    parameters: int
    flops: int
    reference_parameters: int
    reference_flops: int
    parameter_ratio: float
    flops_ratio: float


class RunManifest(BaseModel):
    command: str
    version: str
    config_hash: str
    seeds: dict[str, int] = Field(default_factory=dict)
    inputs: dict[str, str] = Field(default_factory=dict)
    outputs: list[str] = Field(default_factory=list)
    duration_s: float
