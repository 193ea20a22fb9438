from pathlib import Path

from src.bench import BenchmarkRecord, build_report
from src.mixers import MixerKind
from src.report_templates import SEPARATOR, format_bench_summary, format_pretrain_summary, format_verify_table
from src.training import TrainingResult
from src.verify import CheckResult


def _report():
    records = [
        BenchmarkRecord(kind=kind, length_frames=length, wall_times=[scale * length] * 3,
                        peak_bytes=[int(scale * 1e6) * length] * 3, mac_count=length)
        for kind, scale in ((MixerKind.MHSA, 2.0), (MixerKind.MAMBA, 1.0))
        for length in (1000, 2000, 4000)
    ]
    return build_report(records)


def test_bench_summary_is_plain_text():
    text = format_bench_summary(_report(), "runs/bench.csv")
    assert "**" not in text
    assert text.startswith("📊 Scalabilità dei mixer")
    assert "mamba" in text
    assert "📁 CSV: runs/bench.csv" in text
    assert text.endswith(SEPARATOR)


def test_verify_table_counts_failures():
    results = [
        CheckResult(name="scan.recurrence", tags=("scan",), passed=True, detail="gap 1e-15", elapsed_s=0.1),
        CheckResult(name="grad.mhsa", tags=("grad",), passed=False, detail="errore 3e-2", elapsed_s=0.2),
    ]
    text = format_verify_table(results)
    assert "**" not in text
    assert "1/2 falliti: grad.mhsa" in text


def test_pretrain_summary_is_plain_text():
    result = TrainingResult(losses=[6.2, 6.0, 5.9], first_step=2, checkpoint_path=Path("c.brqc"),
                            loss_log_path=Path("loss.csv"), elapsed_s=1.5)
    text = format_pretrain_summary(result, "summarymixing")
    assert "**" not in text
    assert text.startswith("🏋️ Pre-training summarymixing")
    assert "Passi: 2 → 5" in text
    assert "💾 Checkpoint: c.brqc" in text
