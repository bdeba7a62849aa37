"""Run configuration: one JSON document covering every knob of the detector.

Every run is reproducible from its echoed config; `print-config` on the CLI
dumps the defaults below.
"""

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigurationError

STREAM_CHOICES = ("both", "motion", "sampling", "none")
FLOW_CHOICES = ("exact", "flo", "block")
OFFSET_CHOICES = ("predictor", "oracle")


@dataclass
class AggregationConfig:
    """Temporal aggregation window bookkeeping."""

    spanning_range: int = 12        # K: supports drawn from t-K..t+K
    buffer_capacity: int = 25       # sliding pyramid cache, must equal 2K+1
    supports_at_inference: int = 6  # uniformly spaced, symmetric, excludes t
    train_supports: int = 2         # temporal dropout draws exactly two

    def validate(self) -> None:
        k = self.spanning_range
        if k < 1:
            raise ConfigurationError(f"spanning_range must be >= 1, got {k}")
        if self.buffer_capacity != 2 * k + 1:
            raise ConfigurationError(
                f"buffer_capacity must be 2K+1 = {2 * k + 1}, got {self.buffer_capacity}"
            )
        s = self.supports_at_inference
        if not 0 <= s <= 2 * k:
            raise ConfigurationError(f"supports_at_inference must be in [0, {2 * k}], got {s}")
        if s % 2 != 0:
            raise ConfigurationError(f"supports_at_inference must be even, got {s}")
        if self.train_supports != 2:
            raise ConfigurationError(f"train_supports is fixed at 2, got {self.train_supports}")


@dataclass
class PipelineConfig:
    """Everything the pipeline needs: seeds, model shape, thresholds, toggles."""

    seed: int = 2
    channels: int = 32
    num_classes: int = 3
    aggregation: AggregationConfig = field(default_factory=AggregationConfig)

    # anchor matching
    fg_iou: float = 0.5
    bg_iou: float = 0.4

    # loss
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    # decode / suppression
    score_threshold: float = 0.05
    topk_per_level: int = 1000
    nms_iou: float = 0.45
    seqnms: bool = False
    link_iou: float = 0.5
    suppress_iou: float = 0.45

    # streams and their inputs
    streams: str = "both"
    flow_provider: str = "exact"
    block_patch_radius: int = 3
    block_search_radius: int = 8
    offset_source: str = "predictor"
    clamp_radius: float = 8.0

    def validate(self) -> None:
        self.aggregation.validate()
        if self.channels < 4 or self.channels % 4 != 0:
            raise ConfigurationError(
                f"channels must be a positive multiple of 4 (deformable groups), got {self.channels}"
            )
        if self.num_classes < 1:
            raise ConfigurationError(f"num_classes must be >= 1, got {self.num_classes}")
        if not 0.0 <= self.bg_iou <= self.fg_iou <= 1.0:
            raise ConfigurationError(
                f"need 0 <= bg_iou <= fg_iou <= 1, got bg={self.bg_iou} fg={self.fg_iou}"
            )
        if not 0.0 < self.score_threshold < 1.0:
            raise ConfigurationError(f"score_threshold must be in (0, 1), got {self.score_threshold}")
        if self.topk_per_level < 1:
            raise ConfigurationError(f"topk_per_level must be >= 1, got {self.topk_per_level}")
        for name in ("nms_iou", "link_iou", "suppress_iou"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"{name} must be in [0, 1], got {v}")
        if self.streams not in STREAM_CHOICES:
            raise ConfigurationError(f"streams must be one of {STREAM_CHOICES}, got {self.streams!r}")
        if self.flow_provider not in FLOW_CHOICES:
            raise ConfigurationError(
                f"flow_provider must be one of {FLOW_CHOICES}, got {self.flow_provider!r}"
            )
        if self.offset_source not in OFFSET_CHOICES:
            raise ConfigurationError(
                f"offset_source must be one of {OFFSET_CHOICES}, got {self.offset_source!r}"
            )
        if self.clamp_radius <= 0:
            raise ConfigurationError(f"clamp_radius must be > 0, got {self.clamp_radius}")
        if self.block_patch_radius < 1 or self.block_search_radius < 1:
            raise ConfigurationError("block matcher radii must be >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d

    @staticmethod
    def from_dict(d: dict) -> "PipelineConfig":
        d = dict(d)
        agg_d = d.pop("aggregation", {})
        unknown = set(d) - {f.name for f in dataclasses.fields(PipelineConfig)}
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        unknown_agg = set(agg_d) - {f.name for f in dataclasses.fields(AggregationConfig)}
        if unknown_agg:
            raise ConfigurationError(f"unknown aggregation keys {sorted(unknown_agg)}")
        cfg = PipelineConfig(aggregation=AggregationConfig(**agg_d), **d)
        cfg.validate()
        return cfg

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as f:
                f.write(text + "\n")
        return text

    @staticmethod
    def from_json(path) -> "PipelineConfig":
        with open(path) as f:
            try:
                d = json.load(f)
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"{path}: not valid JSON ({exc})") from exc
        return PipelineConfig.from_dict(d)


def default_config() -> PipelineConfig:
    cfg = PipelineConfig()
    cfg.validate()
    return cfg
