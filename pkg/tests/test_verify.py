
from rainbow_rf import equivalents as eq
from rainbow_rf.verify import (
    CHECKS,
    BatteryConfig,
    Equivalents,
    format_table,
    mc_agrees,
    run_battery,
)

def test_check_names_and_order():
    assert list(CHECKS) == [
        "solver",
        "mp-scaling",
        "equiv-gxz",
        "equiv-gagb",
        "equiv-xgomgx",
        "equiv-zxgomgxz",
        "linearization-decay",
        "kappa-oracles",
        "ridge",
        "null-predictor",
    ]

def test_mc_agrees_uses_looser_band():
    assert mc_agrees(1.0, 1.04, 0.001)
    assert mc_agrees(1.0, 1.2, 0.1)
    assert not mc_agrees(1.0, 1.2, 0.01)

def test_flipped_sign_is_caught():
    flipped = Equivalents(gxz=lambda *a, **k: -eq.equiv_gxz(*a, **k))
    [row] = run_battery(BatteryConfig(equivalents=flipped), ["equiv-gxz"])
    assert not row.passed

def test_crashing_check_is_a_failed_row():
    def broken(*a, **k):
        raise RuntimeError("boom")

    [row] = run_battery(BatteryConfig(equivalents=Equivalents(zxgomgxz=broken)), ["equiv-zxgomgxz"])
    assert not row.passed and "boom" in row.detail

def test_fast_checks_pass_and_format():
    results = run_battery(BatteryConfig(), ["solver", "kappa-oracles", "ridge"])
    assert all(r.passed for r in results), format_table(results)
    table = format_table(results)
    assert table.splitlines()[0].startswith("check")
    assert len(table.splitlines()) == 4
