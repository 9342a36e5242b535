"""Merge recipes: method + hyperparameters + file references, stored as JSON."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

METHODS = ("average", "slerp", "mlerp", "task_arithmetic", "dare", "ties", "fisher", "regmean", "mats")

NEEDS_BASE = frozenset({"task_arithmetic", "dare", "ties", "mats"})
NEEDS_STATISTICS = frozenset({"fisher", "regmean", "mats"})

# What each method needs before it can run, used in error messages.
PREREQUISITES = {
    "average": "constituent parameters only",
    "slerp": "constituent parameters only",
    "mlerp": "constituent parameters only",
    "task_arithmetic": "the pretrained base model",
    "dare": "the pretrained base model",
    "ties": "the pretrained base model (trim statistics optional, computed if absent)",
    "fisher": "per-model statistics: diagonal Fisher ('fisher/<tensor>')",
    "regmean": "per-model statistics: input-activation Gram matrices ('gram/<tensor>')",
    "mats": "the pretrained base model (initialization) and per-model Gram statistics ('gram/<tensor>')",
}


class RecipeError(ValueError):
    """The recipe is malformed or has out-of-range hyperparameters."""


class MissingPrerequisiteError(RuntimeError):
    """A file or statistic the method depends on is absent."""


@dataclass
class MergeRecipe:
    method: str
    constituents: list[str]
    base: str | None = None
    statistics: list[str] | None = None
    lam: float = 1.0
    p: float = 0.0
    k_fraction: float = 0.2
    lam_offdiag: float = 1.0
    n_iter: int | None = None
    seed: int = 0
    slerp_t: float = 0.5
    linear_layer_names: list[str] | None = None
    output: str | None = None
    extra: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, data: dict, root: str | os.PathLike | None = None) -> "MergeRecipe":
        """Build a recipe; relative paths resolve against ``root`` when given."""
        if not isinstance(data, dict):
            raise RecipeError("recipe must be a JSON object")
        known = {f.name for f in fields(cls)} - {"extra"}
        unknown = sorted(set(data) - known)
        if unknown:
            raise RecipeError(f"unknown recipe field(s): {', '.join(unknown)}")
        for key in ("method", "constituents"):
            if key not in data:
                raise RecipeError(f"recipe is missing {key!r}")
        kwargs = dict(data)

        def _resolve(p):
            if p is None or root is None:
                return p
            return str(Path(root) / p) if not os.path.isabs(p) else p

        if not isinstance(kwargs["constituents"], list):
            raise RecipeError("'constituents' must be a list of paths")
        kwargs["constituents"] = [_resolve(p) for p in kwargs["constituents"]]
        kwargs["base"] = _resolve(kwargs.get("base"))
        if kwargs.get("statistics") is not None:
            if not isinstance(kwargs["statistics"], list):
                raise RecipeError("'statistics' must be a list of paths")
            kwargs["statistics"] = [_resolve(p) for p in kwargs["statistics"]]
        recipe = cls(**kwargs)
        recipe.validate()
        return recipe

    @classmethod
    def load(cls, path: str | os.PathLike) -> "MergeRecipe":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise RecipeError(f"{path}: malformed JSON: {exc}") from None
        return cls.from_dict(data, root=path.parent)

    def to_dict(self) -> dict:
        data = asdict(self)
        data.pop("extra")
        return data

    def dump(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding="utf-8")

    @property
    def effective_method(self) -> str:
        """SLERP over more than two models runs as MLERP."""
        if self.method == "slerp" and len(self.constituents) > 2:
            return "mlerp"
        return self.method

    def validate(self) -> None:
        if self.method not in METHODS:
            raise RecipeError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if not self.constituents:
            raise RecipeError("recipe needs at least one constituent")
        M = len(self.constituents)
        method = self.effective_method
        if method == "slerp" and M != 2:
            raise RecipeError("slerp interpolates exactly two models")
        if method == "mlerp" and M < 3:
            raise RecipeError("mlerp needs more than two models")
        if method in ("task_arithmetic", "dare", "ties", "mats") and not self.lam > 0:
            raise RecipeError(f"lambda must be > 0, got {self.lam}")
        if method == "dare" and not 0.0 <= self.p < 1.0:
            raise RecipeError(f"dropout probability must be in [0, 1), got {self.p}")
        if method == "ties" and not 0.0 < self.k_fraction <= 1.0:
            raise RecipeError(f"k_fraction must be in (0, 1], got {self.k_fraction}")
        if method in ("regmean", "mats") and not 0.0 <= self.lam_offdiag <= 1.0:
            raise RecipeError(f"lam_offdiag must be in [0, 1], got {self.lam_offdiag}")
        if method == "mats":
            if self.n_iter is None:
                raise RecipeError("mats needs n_iter (number of CG iterations)")
            if not isinstance(self.n_iter, int) or self.n_iter < 0:
                raise RecipeError(f"n_iter must be a non-negative integer, got {self.n_iter}")
        if not 0.0 <= self.slerp_t <= 1.0:
            raise RecipeError(f"slerp_t must be in [0, 1], got {self.slerp_t}")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise RecipeError("seed must be an unsigned 64-bit integer")
        if self.statistics is not None and len(self.statistics) != M:
            raise RecipeError(f"need one statistics file per constituent ({M}), got {len(self.statistics)}")

    def check_prerequisites(self) -> None:
        """Raise MissingPrerequisiteError if a required file is absent."""
        method = self.effective_method
        need = PREREQUISITES[method]
        if method in NEEDS_BASE and not self.base:
            raise MissingPrerequisiteError(f"{method}: base model required ({need})")
        if method in NEEDS_STATISTICS and not self.statistics:
            raise MissingPrerequisiteError(f"{method}: statistics required ({need})")
        paths = list(self.constituents)
        if self.base and method in NEEDS_BASE:
            paths.append(self.base)
        if self.statistics and (method in NEEDS_STATISTICS or method == "ties"):
            paths.extend(self.statistics)
        for p in paths:
            if not Path(p).is_file():
                raise MissingPrerequisiteError(f"{method}: required file not found: {p}")
