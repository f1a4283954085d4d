import pytest

from dfquant.config import ConfigError, ExperimentConfig, parse_config, with_overrides
from dfquant.pipeline import VARIANTS


def test_empty_config_gives_defaults():
    cfg = parse_config(env={})
    assert (cfg.loss.alpha1, cfg.loss.alpha2, cfg.loss.alpha3, cfg.loss.gamma) == (0.1, 0.9, 0.6, 1.0)
    assert cfg.fda.beta_fd == 0.2
    assert (cfg.de.lambda_mu, cfg.de.lambda_sigma) == (0.3, 0.15)
    assert (cfg.total_epochs, cfg.warmup_epochs) == (20, 3)


def test_paper_scale():
    cfg = parse_config(overrides={"paper_scale": True}, env={})
    assert (cfg.total_epochs, cfg.warmup_epochs) == (400, 50)
    cfg = parse_config(overrides={"paper_scale": "true", "schedule.total_epochs": 60}, env={})
    assert (cfg.total_epochs, cfg.warmup_epochs) == (60, 50)


def test_every_problem_is_reported():
    with pytest.raises(ConfigError) as e:
        parse_config(overrides={"fda.beta_fd": 1.5, "loss.alpha3": -1, "quant.weight_bits": 1}, env={})
    text = str(e.value)
    for key in ("fda.beta_fd", "loss.alpha3", "quant.weight_bits"):
        assert key in text
    assert len(e.value.problems) == 3


def test_unknown_keys_and_bad_types():
    with pytest.raises(ConfigError) as e:
        parse_config(overrides={"fda.bogus": 1, "nope": 2, "quant.weight_bits": "four"}, env={})
    assert len(e.value.problems) == 3 and "unknown key" in e.value.problems[0]


def test_file_env_and_override_precedence(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("seed: 3\nquant:\n  weight-bits: 8\nschedule: {total_epochs: 5, warmup_epochs: 1}\n")
    cfg = parse_config(p, env={})
    assert cfg.seed == 3 and cfg.quant.weight_bits == 8 and cfg.total_epochs == 5
    assert parse_config(p, env={"DFQ_SEED": "11"}).seed == 11
    assert parse_config(p, overrides={"seed": "12"}, env={"DFQ_SEED": "11"}).seed == 12
    with pytest.raises(FileNotFoundError):
        parse_config(tmp_path / "missing.yaml", env={})
    p.write_text("- 1\n")
    with pytest.raises(ConfigError):
        parse_config(p, env={})


def test_warmup_cannot_exceed_total():
    with pytest.raises(ConfigError):
        parse_config(overrides={"schedule.total_epochs": 2, "schedule.warmup_epochs": 3}, env={})


def test_with_overrides_copies():
    base = ExperimentConfig()
    new = with_overrides(base, loss__alpha3=0.0)
    assert base.loss.alpha3 == 0.6 and new.loss.alpha3 == 0.0
    assert new.fingerprint() != base.fingerprint()
    no_de = with_overrides(base, **{k.replace(".", "__"): v for k, v in VARIANTS["no_DE"].items()})
    assert no_de.loss.alpha3 == 0.0 and no_de.fda.beta_fd == 0.2
