"""Hierarchical temporal memory used as a per-VM anomaly detector."""

from .encoders import (
    DateEncoderConfig,
    EncodingError,
    SampleEncoder,
    ScalarEncoderConfig,
    encode_date,
    encode_sample,
    encode_scalar,
)
from .region import (
    AnomalyResult,
    AnomalySource,
    HtmConfig,
    HtmRegion,
    NullAnomalySource,
    anomaly_score,
    clone_region,
)

__all__ = [
    "AnomalyResult",
    "AnomalySource",
    "DateEncoderConfig",
    "EncodingError",
    "HtmConfig",
    "HtmRegion",
    "NullAnomalySource",
    "SampleEncoder",
    "ScalarEncoderConfig",
    "anomaly_score",
    "clone_region",
    "encode_date",
    "encode_sample",
    "encode_scalar",
]
