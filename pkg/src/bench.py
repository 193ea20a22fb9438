"""
Sweep di scalabilità: tempo di forward e picco di memoria per tipo di mixer al
crescere della lunghezza, intervalli di confidenza bootstrap ed esponenti di
crescita stimati su scala log-log.

La memoria è il picco di byte di payload dei tensori sopra il livello d'ingresso
(parametri e input esclusi); i MAC contati dal meter fanno da testimone della
complessità indipendente dalla macchina.
"""
import csv
import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from . import tensorcore as tc
from .encoder import SUBSAMPLE_FACTOR, Encoder, EncoderConfig
from .errors import ContractError, OutputWriteError
from .layers import make_rng
from .mixers import MixerKind, build_mixer
from .structured_logging import log_with_context

logger = logging.getLogger(__name__)

CSV_HEADER = ["kind", "length_frames", "mean_time_s", "time_lo", "time_hi", "peak_bytes", "mac_count"]
HOP_MS = 10
BASELINE = MixerKind.MHSA

# Soglie di classificazione degli esponenti (tempo; MAC come fallback)
QUADRATIC_TIME = 1.6
LINEAR_TIME = 1.25
QUADRATIC_MACS = 1.9
LINEAR_MACS = 1.1
NOISY_CV = 0.2


class SweepScope(str, Enum):
    ENCODER = "encoder"
    MIXER = "mixer"


class SweepSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    lengths: List[int] = Field(default_factory=lambda: list(range(1000, 8001, 1000)))
    batch_size: int = Field(6, ge=1)
    repeats: int = Field(10, ge=3)
    warmup: int = Field(2, ge=0)
    kinds: List[MixerKind] = Field(default_factory=lambda: list(MixerKind))
    scope: SweepScope = SweepScope.ENCODER
    seed: int = 0

    @field_validator("lengths")
    @classmethod
    def _increasing(cls, value: List[int]) -> List[int]:
        if not value:
            raise ValueError("serve almeno una lunghezza")
        if any(length < SUBSAMPLE_FACTOR for length in value):
            raise ValueError(f"ogni lunghezza deve essere almeno {SUBSAMPLE_FACTOR} frame")
        if any(b <= a for a, b in zip(value, value[1:])):
            raise ValueError("le lunghezze devono essere strettamente crescenti")
        return value

    @field_validator("kinds")
    @classmethod
    def _distinct(cls, value: List[MixerKind]) -> List[MixerKind]:
        if not value:
            raise ValueError("serve almeno un tipo di mixer")
        return list(dict.fromkeys(value))


@dataclass
class BenchmarkRecord:
    kind: MixerKind
    length_frames: int
    wall_times: List[float] = field(default_factory=list)
    peak_bytes: List[int] = field(default_factory=list)
    mac_count: int = 0
    param_bytes: int = 0
    failed: bool = False
    error: Optional[str] = None

    @property
    def time_cv(self) -> float:
        times = np.asarray(self.wall_times)
        if times.size < 2 or times.mean() == 0:
            return 0.0
        return float(times.std(ddof=1) / times.mean())


# ---------------------------------------------------------------------------
# Sweep
# ---------------------------------------------------------------------------

def _build_model(config: EncoderConfig, scope: SweepScope):
    if scope == SweepScope.MIXER:
        return build_mixer(config.resolved_mixer())
    return Encoder(config)


def _bench_input(spec: SweepSpec, config: EncoderConfig, length: int) -> tc.Tensor:
    # stesso ingresso per tutti i tipi alla stessa lunghezza
    rng = make_rng(spec.seed, "bench", spec.scope.value, length)
    if spec.scope == SweepScope.MIXER:
        shape = (spec.batch_size, length // SUBSAMPLE_FACTOR, config.d_model)
    else:
        shape = (spec.batch_size, length, config.d_feat)
    return tc.Tensor(rng.standard_normal(shape))


def _timed_forward(model, x: tc.Tensor, clock: Callable[[], float]) -> Tuple[float, int, int]:
    meter = tc.current_meter()
    started = clock()
    reading = meter.measure(lambda: model(x))
    elapsed = clock() - started
    return max(elapsed, 1e-9), reading.activation_bytes, reading.macs


def _run_cell(model, spec: SweepSpec, config: EncoderConfig, record: BenchmarkRecord,
              clock: Callable[[], float]) -> None:
    x = _bench_input(spec, config, record.length_frames)
    for _ in range(spec.warmup):
        model(x)
    for _ in range(spec.repeats):
        elapsed, peak, macs = _timed_forward(model, x, clock)
        record.wall_times.append(elapsed)
        record.peak_bytes.append(peak)
        record.mac_count = macs


def run_scaling_sweep(
    spec: SweepSpec,
    config_builder: Callable[[MixerKind], EncoderConfig],
    clock: Callable[[], float] = time.perf_counter,
) -> List[BenchmarkRecord]:
    """
    Esegue lo sweep (tipo × lunghezza) con registrazione del grafo disabilitata.

    Args:
        spec: lunghezze, batch, ripetizioni, warmup, tipi e scope
        config_builder: config dell'encoder (a parametri allineati) per ogni tipo
        clock: orologio monotono in secondi

    Returns:
        Un record per cella; le celle andate in MemoryError sono marcate `failed`
    """
    records: List[BenchmarkRecord] = []
    with tc.no_grad():
        for kind in spec.kinds:
            config = config_builder(kind)
            model = _build_model(config, spec.scope)
            param_bytes = sum(p.nbytes for p in model.parameters())
            logger.info(f"[BENCH] {kind.value}: {model.param_count():,} parametri (scope={spec.scope.value})")
            for length in spec.lengths:
                record = BenchmarkRecord(kind=kind, length_frames=length, param_bytes=param_bytes)
                try:
                    _run_cell(model, spec, config, record, clock)
                except MemoryError as e:
                    record.failed = True
                    record.error = f"memoria esaurita: {e}"
                    record.wall_times.clear()
                    record.peak_bytes.clear()
                    logger.warning(f"[BENCH] ⚠️ {kind.value} T={length}: cella fallita ({record.error})")
                else:
                    log_with_context(
                        "info",
                        f"[BENCH] {kind.value} T={length}",
                        mean_s=f"{np.mean(record.wall_times):.4f}",
                        peak_bytes=record.peak_bytes[0],
                        macs=record.mac_count,
                    )
                records.append(record)
    return records


# ---------------------------------------------------------------------------
# Statistiche
# ---------------------------------------------------------------------------

def bootstrap_ci(
    samples: Sequence[float],
    level: float = 0.95,
    resamples: int = 1000,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[float, float, float]:
    """
    Intervallo bootstrap (metodo dei percentili) della media.

    Returns:
        (low, mean, high) con low ≤ mean ≤ high
    """
    values = np.asarray(samples, dtype=np.float64)
    if values.size == 0:
        raise ContractError("bootstrap_ci richiede almeno un campione")
    if not 0.0 < level < 1.0:
        raise ContractError(f"livello di confidenza fuori da (0, 1): {level}")
    mean = float(values.mean())
    if values.size == 1 or np.all(values == values[0]):
        return mean, mean, mean
    rng = rng if rng is not None else np.random.default_rng(0)
    picks = rng.integers(values.size, size=(resamples, values.size))
    means = values[picks].mean(axis=1)
    tail = (1.0 - level) / 2.0 * 100.0
    low, high = np.percentile(means, [tail, 100.0 - tail])
    return min(float(low), mean), mean, max(float(high), mean)


def fit_exponent(points: Sequence[Tuple[float, float]]) -> float:
    """Pendenza ai minimi quadrati di log(misura) contro log(lunghezza)."""
    if len(points) < 3:
        raise ContractError(f"servono almeno 3 punti per stimare l'esponente, ricevuti {len(points)}")
    lengths = np.array([p[0] for p in points], dtype=np.float64)
    measures = np.array([p[1] for p in points], dtype=np.float64)
    if np.any(lengths <= 0) or np.any(measures <= 0):
        raise ContractError("lunghezze e misure devono essere positive")
    slope, _ = np.polyfit(np.log(lengths), np.log(measures), 1)
    return float(slope)


def classify_growth(exponent: float, basis: str = "time") -> str:
    quadratic, linear = (QUADRATIC_MACS, LINEAR_MACS) if basis == "macs" else (QUADRATIC_TIME, LINEAR_TIME)
    if exponent >= quadratic:
        return "quadratic"
    if exponent <= linear:
        return "linear"
    return "superlinear"


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

@dataclass
class CellSummary:
    kind: MixerKind
    length_frames: int
    mean_time_s: float
    time_lo: float
    time_hi: float
    peak_bytes: int
    mac_count: int
    time_delta: Optional[float] = None
    memory_delta: Optional[float] = None


@dataclass
class ScalingReport:
    cells: List[CellSummary] = field(default_factory=list)
    time_exponents: Dict[MixerKind, float] = field(default_factory=dict)
    memory_exponents: Dict[MixerKind, float] = field(default_factory=dict)
    mac_exponents: Dict[MixerKind, float] = field(default_factory=dict)
    growth: Dict[MixerKind, str] = field(default_factory=dict)
    growth_basis: Dict[MixerKind, str] = field(default_factory=dict)
    memory_ratio: Dict[MixerKind, float] = field(default_factory=dict)
    crossover_length: Optional[int] = None
    fastest: Dict[int, MixerKind] = field(default_factory=dict)
    lightest: Dict[int, MixerKind] = field(default_factory=dict)
    failed: List[Tuple[MixerKind, int, str]] = field(default_factory=list)
    missing_baseline: bool = False
    warnings: List[str] = field(default_factory=list)

    @property
    def kinds(self) -> List[MixerKind]:
        return list(dict.fromkeys(cell.kind for cell in self.cells))

    @property
    def lengths(self) -> List[int]:
        return sorted({cell.length_frames for cell in self.cells})

    def cell(self, kind: MixerKind, length: int) -> Optional[CellSummary]:
        for cell in self.cells:
            if cell.kind == kind and cell.length_frames == length:
                return cell
        return None

    def cells_for(self, kind: MixerKind) -> List[CellSummary]:
        return sorted((c for c in self.cells if c.kind == kind), key=lambda c: c.length_frames)


def _relative(value: float, baseline: float) -> Optional[float]:
    return (value - baseline) / baseline if baseline > 0 else None


def _fill_deltas(report: ScalingReport) -> None:
    for cell in report.cells:
        base = report.cell(BASELINE, cell.length_frames)
        if base is None:
            continue
        cell.time_delta = _relative(cell.mean_time_s, base.mean_time_s)
        cell.memory_delta = _relative(cell.peak_bytes, base.peak_bytes)


def _fill_exponents(report: ScalingReport, noisy: Dict[MixerKind, bool]) -> None:
    for kind in report.kinds:
        cells = report.cells_for(kind)
        if len(cells) < 3:
            report.warnings.append(f"{kind.value}: meno di 3 lunghezze, esponenti non stimati")
            continue
        report.time_exponents[kind] = fit_exponent([(c.length_frames, c.mean_time_s) for c in cells])
        if all(c.peak_bytes > 0 for c in cells):
            report.memory_exponents[kind] = fit_exponent([(c.length_frames, c.peak_bytes) for c in cells])
        if all(c.mac_count > 0 for c in cells):
            report.mac_exponents[kind] = fit_exponent([(c.length_frames, c.mac_count) for c in cells])
        basis = "macs" if noisy.get(kind) and kind in report.mac_exponents else "time"
        exponent = report.mac_exponents[kind] if basis == "macs" else report.time_exponents[kind]
        report.growth[kind] = classify_growth(exponent, basis)
        report.growth_basis[kind] = basis


def _fill_memory_ratio(report: ScalingReport) -> None:
    for kind in report.kinds:
        cells = report.cells_for(kind)
        if len(cells) >= 2 and cells[-2].peak_bytes > 0:
            report.memory_ratio[kind] = cells[-1].peak_bytes / cells[-2].peak_bytes


def _fill_rankings(report: ScalingReport) -> None:
    for length in report.lengths:
        at_length = [c for c in report.cells if c.length_frames == length]
        report.fastest[length] = min(at_length, key=lambda c: c.mean_time_s).kind
        report.lightest[length] = min(at_length, key=lambda c: c.peak_bytes).kind
    if report.missing_baseline:
        return
    alternatives = [k for k in report.kinds if k != BASELINE]
    for length in report.lengths:
        base = report.cell(BASELINE, length)
        others = [report.cell(k, length) for k in alternatives]
        if base is None or not others or any(c is None for c in others):
            continue
        if all(c.mean_time_s < base.mean_time_s and c.peak_bytes < base.peak_bytes for c in others):
            report.crossover_length = length
            break


def build_report(
    records: Sequence[BenchmarkRecord],
    level: float = 0.95,
    resamples: int = 1000,
    seed: int = 0,
) -> ScalingReport:
    """
    Aggrega i record: IC per cella, esponenti per tipo, delta relativi rispetto a MHSA.

    Senza la baseline MHSA i delta restano None e il report porta `missing_baseline`.
    """
    report = ScalingReport()
    noisy: Dict[MixerKind, bool] = {}
    for record in records:
        if record.failed or not record.wall_times:
            report.failed.append((record.kind, record.length_frames, record.error or "nessuna misura"))
            continue
        rng = make_rng(seed, "bootstrap", record.kind.value, record.length_frames)
        low, mean, high = bootstrap_ci(record.wall_times, level=level, resamples=resamples, rng=rng)
        report.cells.append(CellSummary(
            kind=record.kind,
            length_frames=record.length_frames,
            mean_time_s=mean,
            time_lo=low,
            time_hi=high,
            peak_bytes=int(max(record.peak_bytes)),
            mac_count=int(record.mac_count),
        ))
        noisy[record.kind] = noisy.get(record.kind, False) or record.time_cv > NOISY_CV

    if not report.cells:
        return report
    report.missing_baseline = BASELINE not in report.kinds
    if report.missing_baseline:
        report.warnings.append("baseline MHSA assente: delta relativi omessi")
        logger.warning("[BENCH] ⚠️ Baseline MHSA assente, delta relativi omessi")
    else:
        _fill_deltas(report)
    _fill_exponents(report, noisy)
    _fill_memory_ratio(report)
    _fill_rankings(report)
    return report


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    return format(value, ".17g") if isinstance(value, float) else str(value)


def _summary_lines(report: ScalingReport) -> List[str]:
    lines = [f"# hop_ms={HOP_MS}: seconds = length_frames * {HOP_MS} / 1000"]
    for kind in report.kinds:
        parts = [f"kind={kind.value}"]
        for label, exponents in (("time", report.time_exponents),
                                 ("memory", report.memory_exponents),
                                 ("macs", report.mac_exponents)):
            if kind in exponents:
                parts.append(f"{label}_exponent={_fmt(exponents[kind])}")
        if kind in report.growth:
            parts.append(f"growth={report.growth[kind]}({report.growth_basis[kind]})")
        if kind in report.memory_ratio:
            parts.append(f"memory_ratio={_fmt(report.memory_ratio[kind])}")
        lines.append("# " + " ".join(parts))
    if report.crossover_length is not None:
        lines.append(f"# crossover_length={report.crossover_length}")
    for kind, length, error in report.failed:
        lines.append(f"# failed kind={kind.value} length_frames={length} error={error}")
    for warning in report.warnings:
        lines.append(f"# warning {warning}")
    return lines


def emit_csv(report: ScalingReport, path) -> Path:
    """
    Una riga per cella con intestazione fissa, seguita dal riepilogo in righe `#`.

    Raises:
        OutputWriteError: percorso non scrivibile
    """
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for cell in report.cells:
                writer.writerow([
                    cell.kind.value,
                    cell.length_frames,
                    _fmt(cell.mean_time_s),
                    _fmt(cell.time_lo),
                    _fmt(cell.time_hi),
                    cell.peak_bytes,
                    cell.mac_count,
                ])
            if report.cells or report.failed:
                handle.write("\n".join(_summary_lines(report)) + "\n")
    except OSError as e:
        raise OutputWriteError(path, f"scrittura CSV fallita: {e}") from None
    logger.info(f"[BENCH] ✅ CSV scritto in {path} ({len(report.cells)} righe)")
    return path


def read_csv(path) -> List[CellSummary]:
    """Legge le righe dati di un CSV prodotto da `emit_csv` (i commenti sono ignorati)."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise OutputWriteError(path, f"lettura CSV fallita: {e}") from None
    rows = list(csv.reader(line for line in lines if line and not line.startswith("#")))
    if not rows or rows[0] != CSV_HEADER:
        raise ContractError(f"{path}: intestazione CSV inattesa")
    cells = []
    for row in rows[1:]:
        if len(row) != len(CSV_HEADER):
            raise ContractError(f"{path}: riga con {len(row)} colonne invece di {len(CSV_HEADER)}")
        cells.append(CellSummary(
            kind=MixerKind(row[0]),
            length_frames=int(row[1]),
            mean_time_s=float(row[2]),
            time_lo=float(row[3]),
            time_hi=float(row[4]),
            peak_bytes=int(row[5]),
            mac_count=int(row[6]),
        ))
    return cells
