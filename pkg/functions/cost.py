"""Parameter and FLOPs-per-token cost of adapter fine-tuning versus a single
down-projection re-solve.

The adapter baseline trains rank-r adapters on every module of every layer and pays a
full forward and backward pass per epoch. The re-solve pays one forward pass to collect
activations, then trains a single rank-r-sized update.
"""

import logging
from dataclasses import asdict, dataclass

from functions.errors import ConfigError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CostInputs:
    n_model: float
    layers: int
    modules_per_layer: int
    lora_rank: int
    module_dim: int
    n_epoch: int

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 1:
                raise ConfigError(f"cost input {name} must be >= 1, got {value}")


@dataclass(frozen=True)
class CostReport:
    n_baseline: int
    n_lunar: int
    c_baseline: float
    c_lunar: float
    ratio: float

    def to_dict(self) -> dict:
        return asdict(self)


# m = 7: q, k, v, o and three MLP projections per layer
PRESETS = {
    "llama2-7b": CostInputs(n_model=6.74e9, layers=32, modules_per_layer=7, lora_rank=8,
                            module_dim=4096, n_epoch=20),
    # n_model is the parameter count of the default toy model (d=64, L=4, p=256, vocab 128)
    "toy": CostInputs(n_model=213_568, layers=4, modules_per_layer=6, lora_rank=8,
                      module_dim=64, n_epoch=20),
}


def estimate(inputs: CostInputs) -> CostReport:
    n_baseline = inputs.layers * inputs.modules_per_layer * inputs.lora_rank * 2 * inputs.module_dim
    n_lunar = inputs.lora_rank * 2 * inputs.module_dim
    c_baseline = (2 * inputs.n_model + 4 * n_baseline) * inputs.n_epoch
    c_lunar = 2 * inputs.n_model + 6 * n_lunar * inputs.n_epoch
    report = CostReport(n_baseline=n_baseline, n_lunar=n_lunar, c_baseline=float(c_baseline),
                        c_lunar=float(c_lunar), ratio=float(c_baseline / c_lunar))
    logger.info("cost: baseline %d params %.3e FLOPs/token, re-solve %d params %.3e FLOPs/token, ratio %.2f",
                n_baseline, c_baseline, n_lunar, c_lunar, report.ratio)
    return report


def preset(name: str) -> CostInputs:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown cost_preset {name!r} (expected one of {sorted(PRESETS)})") from None
