"""CSV tables and run manifests for benchmark outputs."""

from __future__ import annotations

import csv
import io
import json
import math
from typing import Sequence

from mergelab.bench.scaling import ScalingRow
from mergelab.bench.sweep import SweepResult

SWEEP_COLUMNS = ("method", "param", "index", "value", "val_heldin", "test_heldin", "test_generalization", "selected")
SCALING_COLUMNS = ("M", "method", "heldin_mean", "generalization_mean", "n_chains")


def _num(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return "nan" if math.isnan(x) else repr(x)
    return str(x)


def sweep_csv(results: Sequence[SweepResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for res in results:
        for pt in res.curve:
            w.writerow(
                (
                    res.method,
                    res.param or "",
                    pt.index,
                    _num(pt.value),
                    _num(pt.val_heldin),
                    _num(pt.test_heldin),
                    _num(pt.test_generalization),
                    int(pt.index == res.best_index),
                )
            )
    return buf.getvalue()


def scaling_csv(rows: Sequence[ScalingRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCALING_COLUMNS)
    for row in rows:
        w.writerow((row.M, row.method, _num(row.heldin_mean), _num(row.generalization_mean), row.n_chains))
    return buf.getvalue()


def manifest_json(config: dict) -> str:
    return json.dumps(config, indent=2, sort_keys=True) + "\n"
