"""Config loading: defaults, section validation, sweeps, fingerprints."""

from __future__ import annotations

import pytest

import adaptkt.config as cfg_mod
from adaptkt.config import (
    ADAPT_WIDTHS,
    LAMBDA_SWEEP,
    VARIANT_FLAGS,
    VARIANTS,
    RunConfig,
    from_dict,
    load_config,
    single,
)
from adaptkt.errors import UsageError


def write_toml(tmp_path, text: str) -> str:
    path = tmp_path / "run.toml"
    path.write_text(text, encoding="utf-8")
    return str(path)


# ---------------------------------------------------------------------------
# defaults and parsing
# ---------------------------------------------------------------------------

def test_empty_config_is_all_defaults(tmp_path):
    cfg = load_config(write_toml(tmp_path, ""))
    assert cfg == RunConfig()
    assert cfg.run.variant == "akt"
    assert cfg.autoenc.lam == (0.5,)
    assert cfg.adapt.gamma == (0.5,)
    assert cfg.ktmodel.d_a == 256
    assert cfg.adapt.kernel == "rbf"
    assert cfg.eval.folds == 5


def test_sections_override_defaults(tmp_path):
    cfg = load_config(write_toml(tmp_path, """
[run]
variant = "dkt"
seed = 7

[corpus]
questions = 12
students = 30

[adapt]
gamma = 0.25
kernel = "linear"
"""))
    assert cfg.run.variant == "dkt"
    assert cfg.run.seed == 7
    assert cfg.corpus.questions == 12
    assert cfg.adapt.gamma == (0.25,)
    assert cfg.adapt.kernel == "linear"
    assert cfg.autoenc.d_embed == 100


def test_d_q_is_twice_encoder_hidden():
    cfg = from_dict({"autoenc": {"enc_hidden": 50}})
    assert cfg.d_q == 100


def test_variant_flags_table():
    assert set(VARIANT_FLAGS) == set(VARIANTS)
    assert VARIANT_FLAGS["akt"].text and VARIANT_FLAGS["akt"].transfer
    assert not VARIANT_FLAGS["akt-tx"].text
    assert VARIANT_FLAGS["akt-tx"].transfer
    assert VARIANT_FLAGS["akt-tr"].text
    assert not VARIANT_FLAGS["akt-tr"].transfer
    assert not VARIANT_FLAGS["akt-tx-tr"].text
    assert not VARIANT_FLAGS["akt-tx-tr"].transfer
    assert VARIANT_FLAGS["akt-tx-tr"].slip_guess
    dkt = VARIANT_FLAGS["dkt"]
    assert not (dkt.text or dkt.slip_guess or dkt.adapt_layer or dkt.transfer)


def test_lambda_sweep_constant_matches_published_grid():
    assert LAMBDA_SWEEP == (0.0, 0.25, 0.5, 0.75, 1.0)


# ---------------------------------------------------------------------------
# rejection of bad input
# ---------------------------------------------------------------------------

def test_unknown_table_is_rejected():
    with pytest.raises(UsageError, match="unknown config table"):
        from_dict({"runn": {}})


def test_unknown_key_is_rejected():
    with pytest.raises(UsageError, match="unknown key"):
        from_dict({"adapt": {"gamm": 0.5}})


def test_bad_variant_is_rejected():
    with pytest.raises(UsageError, match="variant"):
        from_dict({"run": {"variant": "akt-xx"}})


def test_d_a_must_be_a_supported_width():
    for width in ADAPT_WIDTHS:
        assert from_dict({"ktmodel": {"d_a": width}}).ktmodel.d_a == width
    with pytest.raises(UsageError, match="d_a"):
        from_dict({"ktmodel": {"d_a": 100}})


def test_gamma_outside_unit_interval_is_rejected():
    with pytest.raises(UsageError):
        from_dict({"adapt": {"gamma": 1.5}})
    with pytest.raises(UsageError):
        from_dict({"autoenc": {"lam": [-0.1]}})


def test_bad_kernel_is_rejected():
    with pytest.raises(UsageError, match="kernel"):
        from_dict({"adapt": {"kernel": "poly"}})


def test_type_errors_are_usage_errors():
    with pytest.raises(UsageError):
        from_dict({"run": {"seed": "zero"}})
    with pytest.raises(UsageError):
        from_dict({"adapt": {"unfreeze": 1}})
    with pytest.raises(UsageError):
        from_dict({"corpus": {"students": 2.5}})


def test_guess_plus_slip_cap():
    with pytest.raises(UsageError, match="guess"):
        from_dict({"corpus": {"guess": 0.7, "slip": 0.5}})


def test_invalid_toml_is_a_usage_error(tmp_path):
    with pytest.raises(UsageError, match="TOML"):
        load_config(write_toml(tmp_path, "run = {"))


def test_missing_file_is_a_usage_error():
    with pytest.raises(UsageError, match="cannot read"):
        load_config("/nonexistent/run.toml")


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

def test_scalar_and_array_sweep_forms():
    one = from_dict({"autoenc": {"lam": 0.25}})
    assert one.autoenc.lam == (0.25,)
    many = from_dict({"autoenc": {"lam": [0.0, 0.25, 0.5, 0.75, 1.0]}})
    assert many.autoenc.lam == LAMBDA_SWEEP


def test_single_guards_sweeps():
    assert single("lam", (0.5,)) == 0.5
    with pytest.raises(UsageError, match="sweep"):
        single("lam", (0.0, 0.5))


def test_empty_sweep_is_rejected():
    with pytest.raises(UsageError, match="empty"):
        from_dict({"adapt": {"gamma": []}})


# ---------------------------------------------------------------------------
# fingerprint
# ---------------------------------------------------------------------------

def test_fingerprint_is_stable_and_value_sensitive():
    a = from_dict({"run": {"seed": 1}})
    b = from_dict({"run": {"seed": 1}})
    c = from_dict({"run": {"seed": 2}})
    assert a.fingerprint() == b.fingerprint()
    assert a.fingerprint() != c.fingerprint()
    assert len(a.fingerprint()) == 64


def test_to_dict_round_trips_through_from_dict():
    cfg = from_dict({
        "run": {"variant": "akt-tr", "seed": 3},
        "autoenc": {"lam": [0.0, 0.5]},
        "adapt": {"gamma": 0.75, "mmd_steps": 4},
    })
    again = from_dict(cfg.to_dict())
    assert again == cfg
    assert again.fingerprint() == cfg.fingerprint()
