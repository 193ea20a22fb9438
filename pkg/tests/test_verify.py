import numpy as np
import pytest

from src import tensorcore as tc
from src.errors import ConfigError
from src.mixers import MixerKind
from src.verify import (
    SCAN_LENGTHS,
    inject_gradient_fault,
    registry,
    run_check,
    run_checks,
    scan_oracle_gap,
)


def _names(checks):
    return [check.name for check in checks]


def test_registry_covers_every_kind():
    names = _names(registry.select())
    for kind in MixerKind:
        assert f"grad.{kind.value}" in names
    assert {"grad.encoder", "scan.recurrence", "quantizer.scale", "params.matching"} <= set(names)
    assert "equivariance.mamba" not in names


def test_select_by_tag_and_name():
    assert _names(registry.select(["quantizer"])) == ["quantizer.scale", "quantizer.bruteforce"]
    assert _names(registry.select(["grad.mhsa"])) == ["grad.mhsa"]
    mamba = set(_names(registry.select(["mamba"])))
    assert {"grad.mamba", "scan.recurrence", "mamba.reversal", "equivariance.mamba_order"} <= mamba


def test_unknown_filter_suggests_tag():
    with pytest.raises(ConfigError) as excinfo:
        registry.select(["quantiser"])
    assert "quantizer" in str(excinfo.value)


@pytest.mark.parametrize("steps", SCAN_LENGTHS)
def test_scan_gap_is_tiny(steps):
    assert scan_oracle_gap(0, steps) <= 1e-10


def test_quantizer_checks_pass():
    results = run_checks(["quantizer"])
    assert [r.passed for r in results] == [True, True]


def test_gradient_checks_pass_and_fault_is_caught():
    check = registry.select(["grad.summarymixing"])[0]
    assert run_check(check).passed
    with inject_gradient_fault(lambda grad: grad * 1.01):
        faulty = run_check(check)
    assert not faulty.passed
    assert "errore relativo" in faulty.detail
    assert run_check(check).passed


def test_run_checks_restores_precision():
    tc.set_default_dtype(32)
    run_checks(["grad.fastformer"])
    assert tc.default_dtype() == np.float32


@pytest.mark.slow
def test_full_suite_passes():
    failed = [r.name for r in run_checks() if not r.passed]
    assert failed == []
