"""Run configuration: JSON document with explicit defaults, strict keys."""

from __future__ import annotations

import copy
import hashlib
import json

from .errors import ValidationError
from .model import PriorConfig, SearchConfig

DEFAULTS = {
    "meshes": {
        # arena as [x0, y0, x1, y1]; null means the session bounding box
        "arena": None,
        "max_edge": 6.0,
        # null margin means 20% of the arena width
        "margin": None,
        "p_theta": 12,
        "temporal_spacing": 5.0,
    },
    "priors": {
        "mu_omega": 20.0,
        "sigma_omega": 0.4,
        "a_omega": 2.0,
        "b_omega": 20.0,
        "nu_omega": 0.5,
        "nu_theta": 1.0,
        "nu_time": 1.0 / 3.0,
        "eta_theta": 1.0 / (2.0 * 3.141592653589793),
        "eta_time": 0.01,
        "beta_mean": 0.0,
        "beta_std": 10.0,
    },
    "inference": {
        "newton_tol": 1e-6,
        "newton_max_iter": 100,
        "restarts": 3,
        "max_evals": 200,
        "jitter": 0.3,
        "k_draws": 2000,
        "j_permutations": 1_000_000,
    },
    "seeds": {
        "fit": 0,
        "crossval": 0,
        "simulate": 0,
    },
}


def _merge_strict(defaults: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ValidationError(f"unknown config key: {where}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ValidationError(f"config key {where} must be a section")
            out[key] = _merge_strict(defaults[key], value, where)
        else:
            out[key] = value
    return out


class RunConfig:
    """Validated configuration with every default explicit."""

    def __init__(self, document: dict | None = None):
        self.doc = _merge_strict(DEFAULTS, document or {})

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as f:
            try:
                doc = json.load(f)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
        return cls(doc)

    def dump(self) -> str:
        return json.dumps(self.doc, indent=2, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(
            json.dumps(self.doc, sort_keys=True).encode()
        ).hexdigest()[:16]

    def prior_config(self) -> PriorConfig:
        return PriorConfig(**self.doc["priors"])

    def search_config(self, seed: int | None = None) -> SearchConfig:
        inf = self.doc["inference"]
        return SearchConfig(
            seed=self.doc["seeds"]["fit"] if seed is None else seed,
            restarts=inf["restarts"],
            max_evals=inf["max_evals"],
            jitter=inf["jitter"],
        )

    def section(self, name: str) -> dict:
        return self.doc[name]
