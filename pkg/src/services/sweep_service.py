"""
Sweep Service for AMOC Lab
Handles sensitivity sweeps of one config value across seeds
"""

import json

import structlog

from src.models.config import ExperimentConfig, apply_overrides, reseed
from src.services.evaluation_service import linear_eval
from src.services.training_service import pretrain

log = structlog.get_logger()


def sensitivity_sweep(base_config, param, values, seeds, train, test):
    """Pre-train and linearly evaluate once per (value, seed); one record per run"""
    records = []
    for value in values:
        for seed in seeds:
            data = apply_overrides(base_config.to_dict(), [f"{param}={_literal(value)}"])
            data = reseed(data, seed)
            config = ExperimentConfig.from_dict(data)
            service, _ = pretrain(config, train)
            _, report = linear_eval(service.pair.query, train, test, config.eval,
                                    fingerprint=config.fingerprint(), label=f"{param}={value}")
            record = {
                'param': param,
                'value': value,
                'seed': int(seed),
                'clean': report.clean,
                'robust': next(iter(report.attacks.values()), report.clean),
                'report': report.to_dict(),
            }
            log.info("sweep_point", param=param, value=value, seed=seed,
                     clean=record['clean'], robust=record['robust'])
            records.append(record)
    return records


def _literal(value):
    """TOML literal for an override value"""
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, bool):
        return 'true' if value else 'false'
    return repr(value)
