import itertools

import numpy as np
import pytest
from pydantic import ValidationError

from src import bench
from src.bench import (
    CSV_HEADER,
    BenchmarkRecord,
    ScalingReport,
    SweepScope,
    SweepSpec,
    bootstrap_ci,
    build_report,
    classify_growth,
    emit_csv,
    fit_exponent,
    read_csv,
    run_scaling_sweep,
)
from src.encoder import ParamBudget, build_matched_configs, preset
from src.errors import ContractError, OutputWriteError
from src.mixers import MixerKind
from tests.conftest import small_encoder

LENGTHS = [1000, 2000, 4000, 8000]


def _record(kind, length, time_s, peak, macs, repeats=5):
    return BenchmarkRecord(
        kind=kind,
        length_frames=length,
        wall_times=[time_s] * repeats,
        peak_bytes=[peak] * repeats,
        mac_count=macs,
    )


def _synthetic_records():
    records = []
    for length in LENGTHS:
        records.append(_record(MixerKind.MHSA, length, 1e-8 * length ** 2, 10 * length ** 2, length ** 2))
        records.append(_record(MixerKind.SUMMARYMIXING, length, 5e-5 * length, 3600 * length, 50 * length))
    return records


def _ticking_clock(step=0.25):
    ticks = itertools.count()
    return lambda: next(ticks) * step


# ---------------------------------------------------------------------------
# Statistiche
# ---------------------------------------------------------------------------

def test_bootstrap_constant_samples_collapse():
    assert bootstrap_ci([0.3] * 7) == (0.3, 0.3, 0.3)


def test_bootstrap_single_sample():
    assert bootstrap_ci([2.5]) == (2.5, 2.5, 2.5)


def test_bootstrap_empty_rejected():
    with pytest.raises(ContractError):
        bootstrap_ci([])


def test_bootstrap_brackets_the_mean():
    samples = np.random.default_rng(0).normal(1.0, 0.2, size=20)
    low, mean, high = bootstrap_ci(samples, rng=np.random.default_rng(1))
    assert low <= mean <= high
    assert mean == pytest.approx(samples.mean())
    assert low < high


def test_bootstrap_is_reproducible_with_seeded_rng():
    samples = [1.0, 1.2, 0.9, 1.1, 1.05]
    first = bootstrap_ci(samples, rng=np.random.default_rng(3))
    second = bootstrap_ci(samples, rng=np.random.default_rng(3))
    assert first == second


@pytest.mark.slow
def test_bootstrap_coverage():
    rng = np.random.default_rng(42)
    covered = 0
    trials = 300
    for _ in range(trials):
        low, _, high = bootstrap_ci(rng.normal(1.0, 0.1, size=30), rng=rng)
        covered += low <= 1.0 <= high
    assert covered / trials >= 0.88


@pytest.mark.parametrize("power", [1.0, 2.0])
def test_fit_exponent_exact(power):
    points = [(length, 3.0 * length ** power) for length in LENGTHS]
    assert fit_exponent(points) == pytest.approx(power, abs=1e-9)


def test_fit_exponent_needs_three_points():
    with pytest.raises(ContractError):
        fit_exponent([(1000, 1.0), (2000, 2.0)])


def test_fit_exponent_rejects_non_positive():
    with pytest.raises(ContractError):
        fit_exponent([(1000, 1.0), (2000, 0.0), (4000, 4.0)])


@pytest.mark.parametrize("exponent, basis, expected", [
    (2.0, "time", "quadratic"),
    (1.0, "time", "linear"),
    (1.4, "time", "superlinear"),
    (1.8, "macs", "superlinear"),
    (1.05, "macs", "linear"),
])
def test_classify_growth(exponent, basis, expected):
    assert classify_growth(exponent, basis) == expected


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

def test_report_exponents_and_growth():
    report = build_report(_synthetic_records())
    assert report.time_exponents[MixerKind.MHSA] == pytest.approx(2.0)
    assert report.time_exponents[MixerKind.SUMMARYMIXING] == pytest.approx(1.0)
    assert report.memory_exponents[MixerKind.SUMMARYMIXING] == pytest.approx(1.0)
    assert report.growth[MixerKind.MHSA] == "quadratic"
    assert report.growth[MixerKind.SUMMARYMIXING] == "linear"
    assert report.memory_ratio[MixerKind.MHSA] == pytest.approx(4.0)


def test_report_deltas_against_mhsa():
    report = build_report(_synthetic_records())
    assert report.cell(MixerKind.MHSA, 8000).time_delta == 0.0
    cell = report.cell(MixerKind.SUMMARYMIXING, 1000)
    # 3600·1000 contro 10·1000²
    assert cell.memory_delta == pytest.approx(-0.64)
    assert cell.time_delta == pytest.approx(4.0)


def test_crossover_is_first_length_where_alternatives_win():
    report = build_report(_synthetic_records())
    assert report.crossover_length == 8000
    assert report.fastest[8000] == MixerKind.SUMMARYMIXING
    assert report.fastest[1000] == MixerKind.MHSA


def test_report_without_baseline_warns():
    records = [r for r in _synthetic_records() if r.kind != MixerKind.MHSA]
    report = build_report(records)
    assert report.missing_baseline
    assert report.warnings
    assert all(c.time_delta is None for c in report.cells)
    assert report.crossover_length is None


def test_noisy_timings_fall_back_to_macs():
    records = _synthetic_records()
    for record in records:
        if record.kind == MixerKind.SUMMARYMIXING:
            record.wall_times = [t * f for t, f in zip(record.wall_times, [0.2, 1.0, 2.5, 1.0, 0.3])]
    report = build_report(records)
    assert report.growth_basis[MixerKind.SUMMARYMIXING] == "macs"
    assert report.growth_basis[MixerKind.MHSA] == "time"
    assert report.growth[MixerKind.SUMMARYMIXING] == "linear"


def test_two_lengths_give_no_exponents():
    records = [r for r in _synthetic_records() if r.length_frames <= 2000]
    report = build_report(records)
    assert not report.time_exponents
    assert any("3 lunghezze" in w for w in report.warnings)


def test_failed_record_is_listed_not_summarized():
    records = _synthetic_records()
    records[0] = BenchmarkRecord(kind=MixerKind.MHSA, length_frames=1000, failed=True, error="memoria esaurita")
    report = build_report(records)
    assert report.cell(MixerKind.MHSA, 1000) is None
    assert report.failed == [(MixerKind.MHSA, 1000, "memoria esaurita")]


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def test_empty_report_writes_header_only(tmp_path):
    path = emit_csv(ScalingReport(), tmp_path / "bench.csv")
    assert path.read_text(encoding="utf-8") == ",".join(CSV_HEADER) + "\n"


def test_csv_rows_and_summary(tmp_path):
    report = build_report(_synthetic_records())
    path = emit_csv(report, tmp_path / "out" / "bench.csv")
    lines = path.read_text(encoding="utf-8").splitlines()
    data = [line for line in lines[1:] if not line.startswith("#")]
    assert len(data) == len(LENGTHS) * 2
    assert all(len(line.split(",")) == 7 for line in data)
    assert any(line.startswith("# hop_ms=10") for line in lines)
    assert any("kind=mhsa" in line and "growth=quadratic(time)" in line for line in lines)
    assert "# crossover_length=8000" in lines


def test_csv_read_back_exactly(tmp_path):
    report = build_report(_synthetic_records())
    cells = read_csv(emit_csv(report, tmp_path / "bench.csv"))
    assert [(c.kind, c.length_frames) for c in cells] == [(c.kind, c.length_frames) for c in report.cells]
    for written, original in zip(cells, report.cells):
        assert written.mean_time_s == original.mean_time_s
        assert written.time_lo == original.time_lo
        assert written.peak_bytes == original.peak_bytes


def test_csv_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OutputWriteError) as excinfo:
        emit_csv(ScalingReport(), blocker / "bench.csv")
    assert excinfo.value.path == blocker / "bench.csv"


# ---------------------------------------------------------------------------
# Sweep
# ---------------------------------------------------------------------------

def _tiny_spec(**overrides):
    values = dict(
        lengths=[16, 32, 64], batch_size=1, repeats=3, warmup=0,
        kinds=[MixerKind.MHSA, MixerKind.SUMMARYMIXING], scope=SweepScope.MIXER,
    )
    values.update(overrides)
    return SweepSpec(**values)


def test_sweep_cardinality_and_stable_peaks():
    records = run_scaling_sweep(_tiny_spec(), small_encoder, clock=_ticking_clock())
    assert [(r.kind, r.length_frames) for r in records] == [
        (kind, length) for kind in (MixerKind.MHSA, MixerKind.SUMMARYMIXING) for length in (16, 32, 64)
    ]
    for record in records:
        assert len(record.wall_times) == 3
        assert len(set(record.peak_bytes)) == 1
        assert record.peak_bytes[0] > 0
        assert record.mac_count > 0
    report = build_report(records)
    assert len(report.cells) == 6
    assert report.cell(MixerKind.MHSA, 64).time_lo == report.cell(MixerKind.MHSA, 64).time_hi


def test_sweep_encoder_scope():
    spec = _tiny_spec(scope=SweepScope.ENCODER, kinds=[MixerKind.MAMBA])
    records = run_scaling_sweep(spec, small_encoder, clock=_ticking_clock())
    assert len(records) == 3
    assert all(not r.failed for r in records)


def test_memory_error_marks_cell_failed(monkeypatch):
    original = bench._run_cell

    def exhausted(model, spec, config, record, clock):
        if record.length_frames == 32:
            raise MemoryError("simulata")
        original(model, spec, config, record, clock)

    monkeypatch.setattr(bench, "_run_cell", exhausted)
    records = run_scaling_sweep(_tiny_spec(kinds=[MixerKind.FASTFORMER]), small_encoder, clock=_ticking_clock())
    failed = [r for r in records if r.failed]
    assert [r.length_frames for r in failed] == [32]
    assert failed[0].wall_times == []
    assert "simulata" in failed[0].error


@pytest.mark.parametrize("overrides", [
    dict(lengths=[]),
    dict(lengths=[32, 16]),
    dict(lengths=[2, 8]),
    dict(repeats=2),
    dict(kinds=[]),
])
def test_invalid_sweep_spec(overrides):
    with pytest.raises(ValidationError):
        _tiny_spec(**overrides)


def test_sweep_spec_deduplicates_kinds():
    spec = _tiny_spec(kinds=[MixerKind.MAMBA, MixerKind.MAMBA, MixerKind.MHSA])
    assert spec.kinds == [MixerKind.MAMBA, MixerKind.MHSA]


# ---------------------------------------------------------------------------
# Scalabilità reale dei mixer
# ---------------------------------------------------------------------------

ALTERNATIVES = [k for k in MixerKind if k != MixerKind.MHSA]


def test_mixer_peak_memory_scaling():
    spec = SweepSpec(lengths=[2000, 4000, 8000], batch_size=1, repeats=3, warmup=0, scope=SweepScope.MIXER)
    records = run_scaling_sweep(spec, lambda kind: preset("bench").with_kind(kind), clock=_ticking_clock())
    report = build_report(records)
    assert not report.failed

    assert 3.0 <= report.memory_ratio[MixerKind.MHSA] <= 4.5
    for kind in ALTERNATIVES:
        assert 1.6 <= report.memory_ratio[kind] <= 2.4, kind
        longest = report.cell(kind, 8000)
        shortest = report.cell(kind, 2000)
        assert longest.peak_bytes < report.cell(MixerKind.MHSA, 8000).peak_bytes, kind
        # il vantaggio in memoria cresce con la lunghezza
        assert longest.memory_delta < shortest.memory_delta, kind


@pytest.mark.slow
def test_mixer_sweep_separates_complexity_classes():
    matched = build_matched_configs(ParamBudget(target_params=3_000_000), preset("bench"))
    spec = SweepSpec(lengths=LENGTHS, batch_size=6, repeats=10, warmup=2, scope=SweepScope.MIXER)
    report = build_report(run_scaling_sweep(spec, lambda kind: matched[kind]))

    assert report.growth[MixerKind.MHSA] == "quadratic"
    for kind in ALTERNATIVES:
        assert report.growth[kind] == "linear", (kind, report.growth_basis[kind])
        longest = report.cell(kind, LENGTHS[-1])
        assert longest.time_delta < 0, kind
        assert longest.memory_delta < 0, kind
        assert longest.memory_delta < report.cell(kind, LENGTHS[0]).memory_delta, kind
