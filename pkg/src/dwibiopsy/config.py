"""Pipeline configuration with lossless JSON round-trip."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields, replace

from .errors import InvalidArgument
from .needle import NeedleConstraints
from .partition import REF_MIN_BOUNDARY_MM, REF_SUPERPIXEL_MM2, REF_SUPERVOXEL_MM3, PERCENTILES
from .simulate import REF_SIGMA_NOISE, PhantomSpec

SEED_ENV = "BIOPSY_PLANNER_SEED"


@dataclass(frozen=True)
class PipelineConfig:
    constraints: NeedleConstraints = field(default_factory=NeedleConstraints)
    n_biopsy: int = 4
    U: int = 20
    superpixel_area_mm2: float = REF_SUPERPIXEL_MM2
    supervoxel_volume_mm3: float = REF_SUPERVOXEL_MM3
    percentiles: tuple = PERCENTILES
    exclusion_boundary_mm: float = REF_MIN_BOUNDARY_MM
    sigma_noise: float = REF_SIGMA_NOISE
    seed: int = 0
    n_reps: int = 20000
    max_interventions: int = 2_000_000
    target_mode: str = "auto"
    guidance: str = "auto"
    gate: float = 0.25
    phantom: PhantomSpec = field(default_factory=PhantomSpec)

    def __post_init__(self):
        if not isinstance(self.n_biopsy, int) or self.n_biopsy < 1:
            raise InvalidArgument("n_biopsy must be a positive integer")
        if not isinstance(self.U, int) or self.U < 1:
            raise InvalidArgument("U must be a positive integer")
        if self.superpixel_area_mm2 <= 0 or self.supervoxel_volume_mm3 <= 0:
            raise InvalidArgument("superpixel area and supervoxel volume must be > 0")
        p = tuple(float(v) for v in self.percentiles)
        if len(p) != 2 or not 0 <= p[0] < p[1] <= 100:
            raise InvalidArgument("percentiles must be (low, high) with 0 <= low < high <= 100")
        object.__setattr__(self, "percentiles", p)
        if self.exclusion_boundary_mm < 0 or self.sigma_noise < 0:
            raise InvalidArgument("exclusion_boundary_mm and sigma_noise must be >= 0")
        if self.n_reps < 1 or self.max_interventions < 1:
            raise InvalidArgument("n_reps and max_interventions must be >= 1")
        if self.target_mode not in ("auto", "symmetric", "asymmetric"):
            raise InvalidArgument(f"unknown target_mode {self.target_mode!r}")
        if self.guidance not in ("auto", "global", "reachable"):
            raise InvalidArgument(f"unknown guidance {self.guidance!r}")
        if self.gate <= 0:
            raise InvalidArgument("gate must be > 0")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "constraints":
                v = v.to_dict()
            elif f.name == "phantom":
                v = v.to_dict()
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise InvalidArgument(f"unknown config keys: {sorted(extra)}")
        kw = dict(d)
        if "constraints" in kw:
            kw["constraints"] = NeedleConstraints.from_dict(kw["constraints"])
        if "phantom" in kw:
            kw["phantom"] = PhantomSpec.from_dict(kw["phantom"])
        if "percentiles" in kw:
            kw["percentiles"] = tuple(kw["percentiles"])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise InvalidArgument(str(exc)) from exc

    @classmethod
    def from_json(cls, text: str) -> "PipelineConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidArgument(f"config is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise InvalidArgument("config must be a JSON object")
        return cls.from_dict(d)

    def with_env(self, environ=None) -> "PipelineConfig":
        """Apply the seed override from the environment, if set."""
        env = os.environ if environ is None else environ
        raw = env.get(SEED_ENV)
        if raw is None or raw == "":
            return self
        try:
            seed = int(raw)
        except ValueError as exc:
            raise InvalidArgument(f"{SEED_ENV} must be an integer, got {raw!r}") from exc
        return replace(self, seed=seed, phantom=replace(self.phantom, seed=seed))


def load_config(path=None, environ=None) -> PipelineConfig:
    if path is None:
        cfg = PipelineConfig()
    else:
        with open(path, encoding="utf-8") as fh:
            cfg = PipelineConfig.from_json(fh.read())
    return cfg.with_env(environ)


__all__ = ["PipelineConfig", "SEED_ENV", "load_config"]
