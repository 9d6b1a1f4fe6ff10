"""Loading, validating and canonicalizing experiment configs."""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources

import jsonschema

from .errors import ConfigError, ParameterError
from .experiments import GRID_DEFAULTS, GRID_KEYS, CHECKS, ExperimentConfig
from .rng import DEFAULT_SEED
from .sbm_core import SbmParams, derived_params
from .tree_core import BroadcastConfig

DEFAULT_TRIALS = 1000

REQUIRED = {
    "conjecture": ("eta", "p"),
    "tree_recovery": ("a", "b", "k", "depth", "method"),
    "sbm_recovery": ("n", "a", "b", "k", "p", "depth", "method"),
    "sanity": ("n", "a", "b", "k"),
    "lemmas": ("check",),
}

CHECK_REQUIRED = {
    "percolation_census": ("a", "b", "k", "p", "B"),
    "mutation_pair": ("D", "ell", "k", "eta"),
    "two_cluster_bound": ("a", "b", "p", "depth"),
    "census_moment": ("a", "b", "k", "ell"),
    "survival": ("a", "b", "k", "depth"),
    "martingale": ("a", "b", "k", "depth"),
}

CHECK_DEFAULTS = {
    "percolation_census": {"ell": [None]},
    "two_cluster_bound": {"k": [2]},
    "census_moment": {"delta": [0.0], "root_label": [1]},
}


@lru_cache(maxsize=1)
def schema():
    return json.loads(resources.files("lsbm").joinpath("data/config.schema.json").read_text())


def data_path(name):
    """Path of a shipped fixture under ``lsbm/data``."""
    return str(resources.files("lsbm").joinpath("data", name))


def _fill_defaults(experiment, grid):
    grid = {k: list(v) for k, v in grid.items()}
    defaults = dict(GRID_DEFAULTS[experiment])
    if experiment == "lemmas":
        for check in grid.get("check", []):
            defaults.update(CHECK_DEFAULTS.get(check, {}))
    for key, val in defaults.items():
        grid.setdefault(key, list(val))
    return {k: grid[k] for k in GRID_KEYS if k in grid}


def _need(cell, keys, what):
    for key in keys:
        if cell.get(key) is None:
            raise ConfigError(f"grid key {key!r} required for {what}")


def validate_cell(experiment, cell):
    """Raise ConfigError if ``cell`` violates a module precondition."""
    try:
        _need(cell, REQUIRED[experiment], experiment)
        if experiment == "conjecture":
            if cell["k"] != 2:
                raise ConfigError("conjecture cells require k = 2")
            BroadcastConfig(k=2, eta=cell["eta"], p=cell["p"], reveal_scope=cell["reveal"])
        elif experiment == "tree_recovery":
            tp = derived_params(cell["a"], cell["b"], cell["k"])
            BroadcastConfig(k=cell["k"], eta=tp.eta, p=cell["p"], delta=cell["delta"])
            if cell["evidence"] == "noisy" and not cell["delta"] > 0:
                raise ConfigError("evidence 'noisy' requires delta > 0")
        elif experiment == "sbm_recovery":
            SbmParams(n=cell["n"], k=cell["k"], a=cell["a"], b=cell["b"], p=cell["p"])
            if cell["evidence"] == "noisy":
                raise ConfigError("sbm_recovery supports evidence 'revealed' or 'boundary'")
        elif experiment == "sanity":
            if cell["p"] != 0:
                raise ConfigError("sanity cells must be unlabeled (p = 0)")
            SbmParams(n=cell["n"], k=cell["k"], a=cell["a"], b=cell["b"], p=0.0)
        else:
            check = cell["check"]
            if check not in CHECKS:
                raise ConfigError(f"check must be one of {list(CHECKS)}, got {check!r}")
            _need(cell, CHECK_REQUIRED[check], check)
            if check == "mutation_pair":
                BroadcastConfig(k=cell["k"], eta=cell["eta"])
            else:
                tp = derived_params(cell["a"], cell["b"], cell["k"])
                if check == "two_cluster_bound" and cell["k"] != 2:
                    raise ConfigError("two_cluster_bound cells require k = 2")
                if check == "census_moment":
                    BroadcastConfig(k=cell["k"], eta=tp.eta, delta=cell["delta"])
                    if not 1 <= cell["root_label"] <= cell["k"]:
                        raise ConfigError("root_label must lie in 1..k")
    except ConfigError:
        raise
    except ParameterError as exc:
        raise ConfigError(f"invalid cell {cell}: {exc}") from exc


def config_from_dict(obj) -> ExperimentConfig:
    """Schema-check ``obj``, fill defaults and validate every cell."""
    try:
        jsonschema.validate(obj, schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config key {where}: {exc.message}") from None
    if not obj["grid"]:
        raise ConfigError("grid nonempty required")
    experiment = obj["experiment"]
    cfg = ExperimentConfig(
        experiment=experiment,
        grid=_fill_defaults(experiment, obj["grid"]),
        trials=obj.get("trials", DEFAULT_TRIALS),
        seed=obj.get("seed", DEFAULT_SEED),
        out=obj.get("out"),
    )
    for cell in cfg.cells():
        validate_cell(experiment, cell)
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return config_from_dict(obj)


def canonical_json(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


def override(cfg: ExperimentConfig, trials=None, seed=None, out=None, **grid) -> ExperimentConfig:
    """Copy of ``cfg`` with scalar fields or whole grid axes replaced;
    ``None`` leaves a field unchanged."""
    obj = cfg.to_dict()
    if trials is not None:
        obj["trials"] = trials
    if seed is not None:
        obj["seed"] = seed
    if out is not None:
        obj["out"] = out
    for key, val in grid.items():
        if val is not None:
            obj["grid"][key] = list(val) if isinstance(val, (list, tuple)) else [val]
    return config_from_dict(obj)
