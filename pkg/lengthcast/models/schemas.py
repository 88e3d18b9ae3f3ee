from __future__ import annotations

import math
from enum import Enum
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field, root_validator, validator


class PoolingMode(str, Enum):
    EGTP = "egtp"
    MEAN = "mean"
    MAX = "max"
    LAST = "last"


class BinScheme(str, Enum):
    EQUAL_WIDTH = "equal-width"
    QUANTILE = "quantile"


class TargetSpace(str, Enum):
    LINEAR = "linear"
    LOG = "log"


class SchedulingPolicy(str, Enum):
    FCFS = "fcfs"
    RANDOM = "random"
    SJF_ORACLE = "sjf_oracle"
    SJF_PREDICTED = "sjf_predicted"


# Run configuration


class TrainConfig(BaseModel):
    """Head training recipe; defaults follow the published setup."""

    learning_rate: float = Field(default=2e-5, description="AdamW learning rate (published setting: 2e-5)")
    epochs: int = Field(default=10, description="Maximum epochs (published setting: 10)")
    batch_size: int = Field(default=16, description="Mini-batch size (published setting: 16)")
    seed: int = Field(default=42, description="Shuffle seed (published setting: 42)")
    loss_lambda: float = Field(default=0.95, description="CE weight in the joint loss (published setting: 0.95)")
    num_bins: int = Field(default=20, description="Length bins K (published setting: 20)")
    beta1: float = Field(default=0.9, description="AdamW first-moment decay")
    beta2: float = Field(default=0.999, description="AdamW second-moment decay")
    epsilon: float = Field(default=1e-8, description="AdamW denominator epsilon")
    weight_decay: float = Field(default=0.01, description="AdamW decoupled weight decay")
    pooling: PoolingMode = Field(default=PoolingMode.EGTP, description="Prompt pooling mode")
    alpha: float = Field(default=1.0, description="EGTP softmax temperature")
    bin_scheme: BinScheme = Field(default=BinScheme.QUANTILE, description="Bin edge placement")
    normalize_mse: bool = Field(
        default=True,
        description="Divide the MSE error by the largest training target (deviation from the raw-length MSE)",
    )
    log_scale: bool = Field(default=False, description="Regress ln(length) instead of length")
    standardize: bool = Field(
        default=True,
        description="Train on inputs standardized with training statistics; folded into the saved head",
    )
    max_plp_steps: int = Field(default=256, description="Per-sequence step budget for PLP training")

    class Config:
        extra = "forbid"

    @validator("alpha")
    def validate_positive(cls, value: float) -> float:
        if not value > 0:
            raise ValueError("must be positive.")
        return value

    @validator("learning_rate")
    def validate_learning_rate(cls, value: float) -> float:
        if not (value >= 0 and math.isfinite(value)):
            raise ValueError("must be a finite non-negative number.")
        return value

    @validator("epochs", "batch_size", "num_bins", "max_plp_steps")
    def validate_positive_int(cls, value: int) -> int:
        if value < 1:
            raise ValueError("must be >= 1.")
        return value

    @validator("seed")
    def validate_seed(cls, value: int) -> int:
        if value < 0 or value >= 2**64:
            raise ValueError("must be a 64-bit unsigned integer.")
        return value

    @validator("loss_lambda")
    def validate_lambda(cls, value: float) -> float:
        if not 0.0 <= value <= 1.0:
            raise ValueError("must lie in [0, 1].")
        return value

    @validator("beta1", "beta2")
    def validate_beta(cls, value: float) -> float:
        if not 0.0 <= value < 1.0:
            raise ValueError("must lie in [0, 1).")
        return value

    @validator("epsilon", "weight_decay")
    def validate_non_negative(cls, value: float) -> float:
        if value < 0:
            raise ValueError("must be non-negative.")
        return value


class SynthConfig(BaseModel):
    """Planted-signal synthetic dataset parameters."""

    num_records: int = Field(default=2500, description="Records to generate")
    d: int = Field(default=16, description="Hidden dimension (>= 2)")
    prompt_len_min: int = Field(default=16, description="Shortest prompt in tokens")
    prompt_len_max: int = Field(default=48, description="Longest prompt in tokens")
    length_mu: float = Field(default=5.0, description="Lognormal mu of response lengths")
    length_sigma: float = Field(default=0.8, description="Lognormal sigma of response lengths")
    max_length: int = Field(default=1024, description="Truncation bound L_max")
    signal_fraction: float = Field(default=0.25, description="Fraction of informative prompt tokens")
    signal_entropy_hi: float = Field(default=2.0, description="Entropy of informative tokens (nats)")
    signal_entropy_lo: float = Field(default=0.1, description="Entropy of uninformative tokens (nats)")
    noise_sigma: float = Field(default=0.05, description="Std of the noise on the signal coordinate")
    include_response: bool = Field(default=True, description="Record response activations")
    seed: int = Field(default=42, description="Generator seed")

    class Config:
        extra = "forbid"

    @validator("num_records", "prompt_len_min", "max_length")
    def validate_positive_int(cls, value: int) -> int:
        if value < 1:
            raise ValueError("must be >= 1.")
        return value

    @validator("d")
    def validate_dimension(cls, value: int) -> int:
        if value < 2:
            raise ValueError("must be >= 2 (coordinate 0 carries the length signal, 1 the position).")
        return value

    @validator("length_sigma")
    def validate_sigma(cls, value: float) -> float:
        if not value > 0:
            raise ValueError("must be positive.")
        return value

    @validator("signal_fraction")
    def validate_fraction(cls, value: float) -> float:
        if not 0.0 < value <= 1.0:
            raise ValueError("must lie in (0, 1].")
        return value

    @validator("signal_entropy_hi", "signal_entropy_lo", "noise_sigma")
    def validate_non_negative(cls, value: float) -> float:
        if value < 0:
            raise ValueError("must be non-negative.")
        return value

    @validator("seed")
    def validate_seed(cls, value: int) -> int:
        if value < 0 or value >= 2**64:
            raise ValueError("must be a 64-bit unsigned integer.")
        return value

    @root_validator(skip_on_failure=True)
    def validate_ranges(cls, values: Dict[str, Any]) -> Dict[str, Any]:
        if values["prompt_len_max"] < values["prompt_len_min"]:
            raise ValueError("prompt_len_max must be >= prompt_len_min.")
        return values


class CostModel(BaseModel):
    """Linear padded-batch cost: prefill per prompt token plus one decode step per output token."""

    t_prefill_per_token: float = Field(default=1e-4, description="Seconds per padded prompt token")
    t_decode_per_step: float = Field(default=2e-3, description="Seconds per padded decode step")

    class Config:
        extra = "forbid"

    @validator("t_prefill_per_token", "t_decode_per_step")
    def validate_positive(cls, value: float) -> float:
        if not value > 0:
            raise ValueError("must be positive.")
        return value


# Prediction results


class EpochRecord(BaseModel):
    """One row of the training history."""

    epoch: int
    train_loss: float
    val_mae: float
    val_loss: Optional[float] = None


class PredictionRow(BaseModel):
    id: str
    y_true: int
    y_hat: float


class PredictionReport(BaseModel):
    """Per-example predictions with aggregate MAE/RMSE."""

    rows: List[PredictionRow]
    mae: float
    rmse: float
    config: Dict[str, Any] = Field(default_factory=dict)

    @root_validator(skip_on_failure=True)
    def validate_metrics(cls, values: Dict[str, Any]) -> Dict[str, Any]:
        if values["mae"] > values["rmse"] * (1.0 + 1e-12) + 1e-12:
            raise ValueError("mae must not exceed rmse.")
        return values

    @property
    def count(self) -> int:
        return len(self.rows)


class PlpCheckpoint(BaseModel):
    fraction: float
    mae: float

    @validator("fraction")
    def validate_fraction(cls, value: float) -> float:
        if not 0.0 <= value <= 1.0:
            raise ValueError("fraction must lie in [0, 1].")
        return value

    @validator("mae")
    def validate_mae(cls, value: float) -> float:
        if value < 0:
            raise ValueError("mae must be non-negative.")
        return value


class PlpCurve(BaseModel):
    """Remaining-length MAE at increasing fractions of the response."""

    checkpoints: List[PlpCheckpoint]

    @validator("checkpoints")
    def validate_order(cls, value: List[PlpCheckpoint]) -> List[PlpCheckpoint]:
        fractions = [point.fraction for point in value]
        if any(b <= a for a, b in zip(fractions, fractions[1:])):
            raise ValueError("fractions must be strictly increasing.")
        return value


class ImportanceBin(BaseModel):
    entropy_lo: float
    entropy_hi: float
    count: int
    mean_importance: Optional[float] = None


class ImportanceReport(BaseModel):
    """Entropy/importance association over pooled token pairs."""

    pearson_r: float
    bins: List[ImportanceBin]
    num_tokens: int

    def populated_means(self) -> List[float]:
        return [b.mean_importance for b in self.bins if b.mean_importance is not None]


# Scheduling


class Job(BaseModel):
    """A request with its true and predicted output length."""

    id: str
    prompt_len: int
    true_out: int
    predicted_out: int
    submit_time: float = 0.0

    @validator("prompt_len", "true_out")
    def validate_length(cls, value: int) -> int:
        if value < 1:
            raise ValueError("lengths must be >= 1.")
        return value

    @validator("predicted_out", pre=True)
    def clamp_prediction(cls, value: Any) -> int:
        value = float(value)
        if not math.isfinite(value):
            raise ValueError("predicted_out must be finite.")
        return max(1, int(round(value)))

    @validator("submit_time")
    def validate_submit_time(cls, value: float) -> float:
        if value < 0:
            raise ValueError("submit_time must be non-negative.")
        return value


class JobOutcome(BaseModel):
    id: str
    completion_time: float
    jct: float


class SimReport(BaseModel):
    """Outcome of one scheduling policy over a job set."""

    policy: str
    batch_size: int
    jobs: List[JobOutcome]
    throughput: float
    mean_jct: float
    padding_ratio: float
    total_time: float
    batches: List[List[str]]


# Dump manifest


class DumpHeader(BaseModel):
    magic: str
    version: int
    d: int
    note: Optional[str] = None


class DumpManifestEntry(BaseModel):
    id: str
    byte_offset: int
    n: int
    T: int
    y: int
