"""
Template testuali stampati a fine comando: riepilogo del benchmark, tabella di
verify e riepilogo del pre-training. Testo semplice per il terminale.
"""
from typing import Optional, Sequence

from .bench import BASELINE, ScalingReport
from .training import TrainingResult
from .verify import CheckResult

SEPARATOR = "━" * 30


def _percent(value: Optional[float]) -> str:
    return f"{value * 100:+.1f}%" if value is not None else "n/d"


def _exponent(value: Optional[float]) -> str:
    return f"{value:.2f}" if value is not None else "n/d"


def format_bench_summary(report: ScalingReport, csv_path: Optional[str] = None) -> str:
    """
    Esponenti di crescita per tipo e delta rispetto a MHSA alla lunghezza massima.
    """
    if not report.cells:
        return f"📊 Benchmark vuoto\n{SEPARATOR}\nNessuna cella completata.\n{SEPARATOR}"

    lines = ["📊 Scalabilità dei mixer", SEPARATOR]
    lines.append(f"{'tipo':<14}{'tempo':>8}{'memoria':>9}{'MAC':>7}  crescita")
    for kind in report.kinds:
        growth = report.growth.get(kind, "n/d")
        if kind in report.growth_basis and report.growth_basis[kind] == "macs":
            growth += " (MAC)"
        lines.append(
            f"{kind.value:<14}"
            f"{_exponent(report.time_exponents.get(kind)):>8}"
            f"{_exponent(report.memory_exponents.get(kind)):>9}"
            f"{_exponent(report.mac_exponents.get(kind)):>7}  {growth}"
        )

    longest = report.lengths[-1]
    lines.append(SEPARATOR)
    if report.missing_baseline:
        lines.append("⚠️ Baseline MHSA assente: delta non calcolati")
    else:
        lines.append(f"Delta vs {BASELINE.value} a {longest} frame ({longest * 10 / 1000:.0f} s):")
        for kind in report.kinds:
            cell = report.cell(kind, longest)
            if kind == BASELINE or cell is None:
                continue
            lines.append(f"  {kind.value:<14} tempo {_percent(cell.time_delta):>8}  memoria {_percent(cell.memory_delta):>8}")
        if report.crossover_length is not None:
            lines.append(f"Crossover: da {report.crossover_length} frame tutte le alternative battono MHSA")

    for kind, length, error in report.failed:
        lines.append(f"❌ {kind.value} T={length}: {error}")
    for warning in report.warnings:
        lines.append(f"⚠️ {warning}")
    if csv_path:
        lines.append(f"📁 CSV: {csv_path}")
    lines.append(SEPARATOR)
    return "\n".join(lines)


def format_verify_table(results: Sequence[CheckResult]) -> str:
    if not results:
        return f"🔎 Verify\n{SEPARATOR}\nNessun controllo selezionato.\n{SEPARATOR}"
    width = max(len(r.name) for r in results) + 2
    lines = ["🔎 Verify", SEPARATOR]
    for result in results:
        status = "✅ ok  " if result.passed else "❌ FAIL"
        lines.append(f"{status} {result.name:<{width}}{result.elapsed_s:7.2f}s  {result.detail}")
    failed = [r.name for r in results if not r.passed]
    lines.append(SEPARATOR)
    if failed:
        lines.append(f"❌ {len(failed)}/{len(results)} falliti: {', '.join(failed)}")
    else:
        lines.append(f"✅ {len(results)}/{len(results)} superati")
    return "\n".join(lines)


def format_pretrain_summary(result: TrainingResult, mixer: str) -> str:
    lines = [f"🏋️ Pre-training {mixer}", SEPARATOR]
    if not result.losses:
        lines.append("Nessun passo eseguito (checkpoint già al passo finale).")
    else:
        last = result.first_step + len(result.losses)
        tail = min(100, len(result.losses))
        lines.append(f"Passi: {result.first_step} → {last} in {result.elapsed_s:.1f}s")
        lines.append(f"Loss iniziale: {result.losses[0]:.4f}")
        lines.append(f"Loss media ultimi {tail} passi: {result.mean_loss(last - tail, last):.4f}")
    if result.loss_log_path:
        lines.append(f"📁 Log loss: {result.loss_log_path}")
    if result.checkpoint_path:
        lines.append(f"💾 Checkpoint: {result.checkpoint_path}")
    lines.append(SEPARATOR)
    return "\n".join(lines)
