"""Pipeline configuration: one flat record, loadable from ``key = value`` text.

Keys use the long CLI flag names with dashes turned into underscores
(``--min-points`` is ``min_points``). Command-line flags override file values.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping, Optional

from .errors import ParameterError
from .layout import LayoutParams
from .preprocess import PreprocessParams
from .segment import DbscanParams, SpectralParams

__all__ = ["PipelineConfig", "parse_config_text", "load_config"]


@dataclass(frozen=True)
class PipelineConfig:
    input: str = ""
    out_dir: str = "out"
    epsilon: float = 0.8
    min_points: int = 1300
    voxel: float = 0.1
    alpha: float = 0.9
    max_cluster_size: int = 45_000
    knn_k: int = 10
    embed_sample_cap: int = 5_000
    kmeans_max_iters: int = 100
    kmeans_tol: float = 1e-6
    enable_split: bool = True
    trunk_band: float = 0.8
    ransac_iters: int = 500
    ransac_threshold: float = 0.15
    row_threshold: float = 2.0
    reference_y: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            object.__setattr__(self, f.name, _coerce(f.name, f.type, getattr(self, f.name)))
        if not self.voxel > 0:
            raise ParameterError(f"voxel must be positive, got {self.voxel}")
        if not self.alpha > 0:
            raise ParameterError(f"alpha must be positive, got {self.alpha}")
        # constructing the stage parameters runs their own validation
        self.preprocess_params()
        self.dbscan_params()
        self.spectral_params()
        self.layout_params()

    def preprocess_params(self) -> PreprocessParams:
        return _named(lambda: PreprocessParams(
            ransac_iterations=self.ransac_iters,
            ransac_distance_threshold=self.ransac_threshold,
            trunk_band_height=self.trunk_band,
            seed=self.seed,
        ), {"ransac_iterations": "ransac_iters", "ransac_distance_threshold": "ransac_threshold",
            "trunk_band_height": "trunk_band"})

    def dbscan_params(self) -> DbscanParams:
        return DbscanParams(epsilon=self.epsilon, min_points=self.min_points)

    def spectral_params(self) -> SpectralParams:
        return SpectralParams(
            max_cluster_size=self.max_cluster_size,
            knn_k=self.knn_k,
            embed_sample_cap=self.embed_sample_cap,
            kmeans_max_iters=self.kmeans_max_iters,
            kmeans_tol=self.kmeans_tol,
            seed=self.seed,
        )

    def layout_params(self) -> LayoutParams:
        return _named(lambda: LayoutParams(row_distance_threshold=self.row_threshold,
                                           reference_y=self.reference_y),
                      {"row_distance_threshold": "row_threshold"})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_mapping(cls, values: Mapping[str, object], base: Optional["PipelineConfig"] = None):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ParameterError(f"unknown config key(s): {', '.join(unknown)}")
        start = base.to_dict() if base is not None else {}
        start.update(values)
        return cls(**start)

    def to_text(self) -> str:
        lines = []
        for key, val in self.to_dict().items():
            if isinstance(val, bool):
                val = "true" if val else "false"
            elif isinstance(val, float):
                val = repr(val)
            lines.append(f"{key} = {val}")
        return "\n".join(lines) + "\n"


def _named(build, renames):
    # report config key names, not the stage parameter names
    try:
        return build()
    except ParameterError as exc:
        msg = str(exc)
        for inner, outer in renames.items():
            msg = msg.replace(inner, outer)
        raise ParameterError(msg) from None


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(name, typ, value):
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            if isinstance(value, bool):
                return value
            s = str(value).strip().lower()
            if s in _TRUE:
                return True
            if s in _FALSE:
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if typ == "int":
            if isinstance(value, bool):
                raise ValueError(f"not an integer: {value!r}")
            if isinstance(value, float):
                if not value.is_integer():
                    raise ValueError(f"not an integer: {value!r}")
                return int(value)
            return int(str(value).strip())
        if typ == "float":
            return float(value)
        return str(value)
    except ValueError as exc:
        raise ParameterError(f"{name}: {exc}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines to a dict of strings; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"{source}: line {lineno}: expected 'key = value'")
        key, val = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key in out:
            raise ParameterError(f"{source}: line {lineno}: duplicate key {key!r}")
        out[key] = val
    return out


def load_config(path=None, overrides: Optional[Mapping[str, object]] = None) -> PipelineConfig:
    """Config from an optional file, then ``overrides`` on top."""
    values = {}
    if path is not None:
        path = Path(path)
        values = parse_config_text(path.read_text(encoding="utf-8"), str(path))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return PipelineConfig.from_mapping(values)
