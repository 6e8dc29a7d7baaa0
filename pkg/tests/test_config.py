import json

import pytest

from bmclab.config import DEFAULT_CONFIG, ConfigError, ExperimentConfig, RunConfig, from_dict, load
from bmclab.rng import derived_seed


def base(**exp):
    raw = json.loads(json.dumps(DEFAULT_CONFIG))
    raw["experiment"].update(exp)
    return raw


@pytest.mark.parametrize(
    "mutate,field",
    [
        (lambda r: r["branching"].pop("offspring"), "branching.offspring"),
        (lambda r: r["state_space"].pop("degree"), "state_space.degree"),
        (lambda r: r["experiment"].update(horizon=-1), "experiment.horizon"),
        (lambda r: r["experiment"].update(bogus=1), "experiment.bogus"),
        (lambda r: r["branching"]["offspring"].update(kind="poisson"), "branching.offspring.kind"),
        (lambda r: r.update(seed=-3), "seed"),
    ],
)
def test_errors_name_the_field(mutate, field):
    raw = base()
    mutate(raw)
    with pytest.raises(ConfigError) as ei:
        from_dict(raw)
    assert ei.value.field == field
    assert f"'{field}'" in str(ei.value)


def test_seed_range_checked():
    with pytest.raises(ConfigError) as ei:
        from_dict(base(), seed=2**64)
    assert ei.value.field == "seed"


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        load(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    with pytest.raises(ConfigError) as ei:
        load(bad)
    assert ei.value.field == "--config"


def test_defaults_and_echo_round_trip():
    cfg = from_dict(base(), study="martingale", seed=11, fmt="csv")
    assert cfg.experiment.horizon == 12 and cfg.experiment.sigma == ExperimentConfig().sigma
    echo = cfg.echo()
    again = from_dict(echo)
    assert again == cfg
    assert again.echo() == echo


def test_single_run_keeps_seed():
    cfg = from_dict(base(), seed=4)
    assert cfg.sweep() == [cfg]


def test_sweep_is_cartesian_with_derived_seeds():
    cfg = from_dict(base(horizon=[3, 4], epsilon=[1e-3, 1e-2, 1e-1]), seed=9)
    runs = cfg.sweep()
    assert len(runs) == 6
    assert [(r.experiment.horizon, r.experiment.epsilon) for r in runs][:3] == [(3, 1e-3), (3, 1e-2), (3, 1e-1)]
    assert [r.seed for r in runs] == [derived_seed(9, i) for i in range(6)]
    assert all(isinstance(r, RunConfig) for r in runs)


def test_committed_configs_validate(configs):
    files = sorted(configs.glob("*.json"))
    assert len(files) >= 10
    for f in files:
        load(f)
