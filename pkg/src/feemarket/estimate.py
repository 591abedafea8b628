"""Two-stage estimator: delay stage feeding the fee regression."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import pandas as pd

from .delay.stage import DelayFit, ForestConfig, SlopeConfig, fit_delay
from .fee.model import FeeFit, FeeSpec, fit_fee_model


@dataclass(frozen=True)
class TwoStageConfig:
    forest: ForestConfig = field(default_factory=ForestConfig)
    slopes: SlopeConfig = field(default_factory=SlopeConfig)
    fee: FeeSpec = field(default_factory=FeeSpec)

    def to_dict(self) -> dict:
        return {"forest": asdict(self.forest), "slopes": asdict(self.slopes), "fee": asdict(self.fee)}

    @classmethod
    def from_dict(cls, d: dict) -> TwoStageConfig:
        fee = dict(d.get("fee", {}))
        for k in ("controls", "states", "knot_probs"):
            if k in fee:
                fee[k] = tuple(fee[k])
        return cls(ForestConfig(**d.get("forest", {})), SlopeConfig(**d.get("slopes", {})), FeeSpec(**fee))


@dataclass
class TwoStageFit:
    delay: DelayFit
    fee: FeeFit


def fit_two_stage(frame: pd.DataFrame, cfg: TwoStageConfig = TwoStageConfig()) -> TwoStageFit:
    """Cross-fit the delay stage on ``frame`` and regress fees on its slopes."""
    delay = fit_delay(frame, cfg.forest, cfg.slopes)
    return TwoStageFit(delay, fit_fee_model(frame, delay, cfg.fee))
