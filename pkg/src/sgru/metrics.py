from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

DEFAULT_MAPE_THRESHOLD = 1e-3


class MetricError(ValueError):
    pass


@dataclass
class MetricsReport:
    mae: float
    rmse: float
    mape: float                      # percent
    per_horizon_mae: dict[int, float] = field(default_factory=dict)
    n_evaluated: int = 0
    n_masked: int = 0

    def to_json(self) -> str:
        d = asdict(self)
        d["per_horizon_mae"] = {str(k): v for k, v in self.per_horizon_mae.items()}
        return json.dumps(d, indent=2)

    def csv_header(self) -> str:
        cols = ["mae", "rmse", "mape"] + [f"mae_h{h}" for h in self.per_horizon_mae]
        return ",".join(cols + ["n_evaluated", "n_masked"])

    def csv_row(self) -> str:
        vals = [self.mae, self.rmse, self.mape] + list(self.per_horizon_mae.values())
        return ",".join([repr(float(v)) for v in vals] + [str(self.n_evaluated), str(self.n_masked)])


def compute_metrics(pred, target, mape_threshold: float = DEFAULT_MAPE_THRESHOLD,
                    horizons=(), horizon_axis: int = -3) -> MetricsReport:
    """MAE, RMSE and masked MAPE over all entries.

    MAPE skips entries whose |target| is below `mape_threshold`; those count
    toward `n_masked` and still enter MAE and RMSE. `horizons` adds MAE over
    the first h steps along `horizon_axis` for each h.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise MetricError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(target))):
        raise MetricError("non-finite values in pred or target")
    err = pred - target
    abs_err = np.abs(err)
    keep = np.abs(target) >= mape_threshold
    if not keep.any():
        raise MetricError("MAPE undefined: every target is below the threshold")
    per_h = {}
    for h in horizons:
        h = int(h)
        n_steps = pred.shape[horizon_axis]
        if not 1 <= h <= n_steps:
            raise MetricError(f"horizon {h} outside 1..{n_steps}")
        per_h[h] = float(np.take(abs_err, np.arange(h), axis=horizon_axis).mean())
    return MetricsReport(
        mae=float(abs_err.mean()),
        rmse=float(np.sqrt(np.mean(err * err))),
        mape=float(100.0 * np.mean(abs_err[keep] / np.abs(target[keep]))),
        per_horizon_mae=per_h,
        n_evaluated=int(keep.sum()),
        n_masked=int((~keep).sum()),
    )
