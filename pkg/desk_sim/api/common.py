from __future__ import annotations

import json
from dataclasses import asdict, is_dataclass
from typing import Any

import numpy as np


class SimError(Exception):
    """
    Base class for every error raised by the framework. The CLI reports
    these as structured JSON on standard error; anything else is a bug.
    """


class ShapeError(SimError):
    pass


class NonFiniteError(SimError):
    pass


class TapeError(SimError):
    pass


class GeometryError(SimError):
    pass


class MaskError(SimError):
    pass


class ConfigError(SimError):
    def __init__(self, key: str, description: str):
        super().__init__(f"{key}: {description}")
        self.key = key


class DatasetError(SimError):
    pass


class CheckpointError(SimError):
    pass


class LossError(SimError):
    pass


class OptimizerError(SimError):
    pass


class _Encoder(json.JSONEncoder):
    def default(self, o: Any) -> Any:
        if is_dataclass(o) and not isinstance(o, type):
            return asdict(o)
        if isinstance(o, np.integer):
            return int(o)
        if isinstance(o, np.floating):
            return float(o)
        if isinstance(o, np.ndarray):
            return o.tolist()
        return super().default(o)


DEFAULT_ENCODER = _Encoder(sort_keys=False, allow_nan=False)


def json_line(data: Any) -> str:
    return DEFAULT_ENCODER.encode(data) + "\n"


def error_record(ex: BaseException) -> str:
    return json_line({"error": type(ex).__name__, "message": str(ex)})
