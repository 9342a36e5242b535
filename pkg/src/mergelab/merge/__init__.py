"""The eight merging methods, as per-block kernels and model-level drivers."""

from mergelab.merge.cg import CGResult, NegativeCurvatureError, conjugate_gradient
from mergelab.merge.driver import MemorySource, MergePlan, StreamingSource, merge_models, run_merge
from mergelab.merge.kernels import (
    apply_dare,
    compute_task_vector,
    compute_trim_statistic,
    merge_average,
    merge_fisher,
    merge_mats,
    merge_mlerp,
    merge_regmean,
    merge_slerp,
    merge_task_arithmetic,
    merge_ties,
)
from mergelab.merge.recipe import METHODS, MergeRecipe, MissingPrerequisiteError, RecipeError

__all__ = [
    "CGResult",
    "METHODS",
    "MemorySource",
    "MergePlan",
    "MergeRecipe",
    "MissingPrerequisiteError",
    "NegativeCurvatureError",
    "RecipeError",
    "StreamingSource",
    "apply_dare",
    "compute_task_vector",
    "compute_trim_statistic",
    "conjugate_gradient",
    "merge_average",
    "merge_fisher",
    "merge_mats",
    "merge_mlerp",
    "merge_models",
    "merge_regmean",
    "merge_slerp",
    "merge_task_arithmetic",
    "merge_ties",
    "run_merge",
]
