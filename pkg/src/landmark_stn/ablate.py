"""Component ablations: the incremental chain, the lambda sweep, and aggregation."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable, Optional

from .config import dump_config
from .model import ModelConfig, build_model
from .synth import SplitArrays
from .train import TrainConfig, evaluate, train, write_csv

log = logging.getLogger(__name__)

# each row switches on one more component, in this order
CHAIN = (
    ("plain", dict(use_stn=False, use_selective=False, use_hrst=False, use_scale_reg=False)),
    ("+stn", dict(use_stn=True, use_selective=False, use_hrst=False, use_scale_reg=False)),
    ("+selective", dict(use_stn=True, use_selective=True, use_hrst=False, use_scale_reg=False)),
    ("+hrst", dict(use_stn=True, use_selective=True, use_hrst=True, use_scale_reg=False)),
    ("+scale_reg", dict(use_stn=True, use_selective=True, use_hrst=True, use_scale_reg=True)),
)
LAMBDA_GRID = ("off", 0.8, 0.4, 0.2, 0.1)
AGGREGATION_GRID = ("max", "avg")
FULL = CHAIN[-1][1]

CSV_HEADER = [
    "group", "variant", "use_stn", "use_selective", "use_hrst", "use_scale_reg", "lam", "aggregation",
    "test_pdl", "final_train_total", "final_val_total",
]


@dataclass
class AblationRow:
    group: str
    variant: str
    cfg: ModelConfig
    test_pdl: float
    per_step: dict
    final_train_total: float
    final_val_total: float
    seconds: float

    def csv_row(self) -> list:
        c = self.cfg
        return [
            self.group, self.variant, int(c.use_stn), int(c.use_selective), int(c.use_hrst),
            int(c.use_scale_reg), c.lam if c.use_scale_reg else "off", c.aggregation, self.test_pdl,
            self.final_train_total, self.final_val_total,
        ]


def chain_configs(base: ModelConfig) -> list:
    return [(name, base.replace(**flags)) for name, flags in CHAIN]


def lambda_configs(base: ModelConfig) -> list:
    out = []
    for lam in LAMBDA_GRID:
        if lam == "off":
            out.append(("off", base.replace(**{**FULL, "use_scale_reg": False})))
        else:
            out.append((str(lam), base.replace(**FULL, lam=float(lam))))
    return out


def aggregation_configs(base: ModelConfig) -> list:
    return [(agg, base.replace(**FULL, aggregation=agg)) for agg in AGGREGATION_GRID]


class Runner:
    """Trains and scores variants, reusing results for identical configurations.

    Every variant starts from the same seed, so two configs that differ only
    in one flag differ in nothing else.
    """

    def __init__(self, train_data: SplitArrays, test_data: SplitArrays, tcfg: TrainConfig,
                 val_data: Optional[SplitArrays] = None, threshold_px: Optional[float] = None,
                 on_result: Optional[Callable[[AblationRow], None]] = None):
        self.train_data, self.test_data, self.val_data = train_data, test_data, val_data
        self.tcfg, self.threshold_px, self.on_result = tcfg, threshold_px, on_result
        self._cache: dict = {}
        self.states: dict = {}

    def run(self, group: str, variant: str, cfg: ModelConfig) -> AblationRow:
        key = dump_config(cfg)
        if key not in self._cache:
            t0 = time.perf_counter()
            state = train(build_model(cfg, self.tcfg.seed), cfg, self.train_data, self.tcfg, val=self.val_data)
            rep = evaluate(state.params, cfg, self.test_data, self.threshold_px)
            last = state.history[-1] if state.history else None
            self._cache[key] = (rep, last, time.perf_counter() - t0)
            self.states[key] = state
        rep, last, secs = self._cache[key]
        row = AblationRow(
            group, variant, cfg, rep.pdl, dict(rep.per_step),
            last.train_total if last else float("nan"), last.val_total if last else float("nan"), secs,
        )
        log.info("%s %s: PDL %.2f (%.0f s)", group, variant, row.test_pdl, secs)
        if self.on_result is not None:
            self.on_result(row)
        return row

    def chain(self, base: ModelConfig) -> list:
        return [self.run("chain", n, c) for n, c in chain_configs(base)]

    def lambda_sweep(self, base: ModelConfig) -> list:
        return [self.run("lambda", n, c) for n, c in lambda_configs(base)]

    def aggregation(self, base: ModelConfig) -> list:
        return [self.run("aggregation", n, c) for n, c in aggregation_configs(base)]


def ablate(base: ModelConfig, train_data: SplitArrays, test_data: SplitArrays, tcfg: TrainConfig,
           val_data: Optional[SplitArrays] = None, groups=("chain", "lambda", "aggregation")) -> list:
    runner = Runner(train_data, test_data, tcfg, val_data)
    rows = []
    for g in groups:
        if g == "chain":
            rows += runner.chain(base)
        elif g == "lambda":
            rows += runner.lambda_sweep(base)
        elif g == "aggregation":
            rows += runner.aggregation(base)
        else:
            raise ValueError(f"unknown ablation group {g!r}")
    return rows


def write_ablation_csv(rows, path) -> None:
    write_csv(path, [CSV_HEADER] + [r.csv_row() for r in rows])
