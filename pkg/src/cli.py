"""
Riga di comando: `bench`, `pretrain` e `verify`.

Codici di uscita: 0 successo, 2 errore d'uso o di configurazione, 1 qualsiasi
altro fallimento. La config effettiva viene scritta in `<out>/<comando>.config`
prima di eseguire il comando.
"""
import argparse
import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional

from . import tensorcore as tc
from .bench import SweepScope, build_report, emit_csv, run_scaling_sweep
from .config import (
    LOG_LEVEL,
    SERVICE_NAME,
    RunConfig,
    config_items,
    parse_config,
    validate_config,
    write_config_echo,
)
from .encoder import PRESETS, build_matched_configs
from .errors import BrqError, ConfigError
from .features import FeatureSource, SyntheticSpec, load_features
from .logging_config import setup_colored_logging
from .mixers import MixerKind
from .patterns import parse_name_list, parse_override
from .report_templates import format_bench_summary, format_pretrain_summary, format_verify_table
from .structured_logging import clear_run_context, new_run_id, set_run_context
from .training import PretrainRunner, pretrain
from .verify import run_checks

logger = logging.getLogger(__name__)

# flag dedicati → chiave di configurazione
BENCH_FLAGS = {
    "kinds": "kinds",
    "lengths": "lengths",
    "repeats": "repeats",
    "batch_size": "batch_size",
    "preset": "bench_preset",
    "scope": "scope",
}
PRETRAIN_FLAGS = {
    "mixer": "mixer",
    "steps": "steps",
    "synthetic": "synthetic",
    "features": "features",
    "frame_cap": "frame_cap",
    "preset": "preset",
    "resume": "resume",
}
GLOBAL_FLAGS = {"seed": "seed", "out": "out_dir"}


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="file `chiave = valore` con le impostazioni")
    common.add_argument("--seed", type=int, help="seed di tutti i generatori")
    common.add_argument("--out", help="cartella degli output")
    common.add_argument(
        "--log-level",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        type=str.upper,
        help="livello di log (default: LOG_LEVEL o INFO)",
    )
    common.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="imposta una chiave di configurazione (ripetibile)",
    )
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_options()
    parser = argparse.ArgumentParser(
        prog="python -m src",
        description="Benchmark dei token mixer, pre-training BEST-RQ desk-scale e suite di verifica",
    )
    commands = parser.add_subparsers(dest="command", required=True, metavar="COMANDO")

    bench = commands.add_parser("bench", parents=[common], help="sweep di scalabilità dei mixer")
    bench.add_argument("--kinds", help="tipi di mixer separati da virgola (default: tutti)")
    bench.add_argument("--lengths", help="lunghezze in frame, crescenti, separate da virgola")
    bench.add_argument("--repeats", type=int, help="misure per cella (almeno 3)")
    bench.add_argument("--batch-size", type=int, help="sequenze per forward")
    bench.add_argument("--preset", choices=sorted(PRESETS), help="preset dell'encoder (default: bench)")
    bench.add_argument("--scope", choices=[s.value for s in SweepScope], help="encoder completo o solo mixer")

    train = commands.add_parser("pretrain", parents=[common], help="pre-training BEST-RQ desk-scale")
    train.add_argument("--mixer", choices=[k.value for k in MixerKind], help="tipo di mixer dell'encoder")
    train.add_argument("--steps", type=int, help="numero di passi di ottimizzazione")
    train.add_argument("--synthetic", help="feature sintetiche, es. n=64,len=400..800,d=80")
    train.add_argument("--features", help="container di feature al posto dei dati sintetici")
    train.add_argument("--frame-cap", type=int, help="tetto di frame per batch (B·T)")
    train.add_argument("--preset", choices=sorted(PRESETS), help="preset dell'encoder (default: desk)")
    train.add_argument("--resume", help="checkpoint da cui riprendere")

    verify = commands.add_parser("verify", parents=[common], help="suite di proprietà")
    verify.add_argument("--only", help="tag o nomi di controlli separati da virgola")
    return parser


def collect_overrides(args: argparse.Namespace) -> Dict[str, str]:
    """`--set` prima, poi i flag dedicati: un flag esplicito vince su `--set`."""
    overrides: Dict[str, str] = {}
    for item in args.set:
        try:
            key, value = parse_override(item)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        overrides[key] = value
    flags = dict(GLOBAL_FLAGS)
    flags.update({"bench": BENCH_FLAGS, "pretrain": PRETRAIN_FLAGS}.get(args.command, {}))
    for attr, key in flags.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = str(value)
    return overrides


# ---------------------------------------------------------------------------
# Comandi
# ---------------------------------------------------------------------------

def bench_cmd(args: argparse.Namespace, config: RunConfig) -> int:
    out = Path(config.out_dir)
    spec = config.sweep_spec()
    base = config.encoder_config(config.bench_preset)
    matched = build_matched_configs(config.param_budget(), base)
    records = run_scaling_sweep(spec, lambda kind: matched[kind])
    report = build_report(records, seed=config.seed)
    csv_path = emit_csv(report, out / "bench.csv")
    print(format_bench_summary(report, str(csv_path)))
    if not report.cells:
        logger.error("[BENCH] ❌ Nessuna cella completata")
        return 1
    return 0


def _feature_source(config: RunConfig) -> FeatureSource:
    if config.features:
        return load_features(config.features)
    return FeatureSource.synthetic(SyntheticSpec.parse(config.synthetic, seed=config.seed))


def pretrain_cmd(args: argparse.Namespace, config: RunConfig) -> int:
    source = _feature_source(config)
    encoder_config = config.encoder_config()
    if source.d_feat != encoder_config.d_feat:
        logger.info(f"[PRETRAIN] d_feat={source.d_feat} preso dalla sorgente di feature")
        encoder_config = encoder_config.model_copy(update={"d_feat": source.d_feat})
    runner = PretrainRunner(encoder_config, config.mask_settings(), config.train_settings(), source)
    logger.info(
        f"[PRETRAIN] {config.mixer.value}: {runner.model.param_count():,} parametri, "
        f"{len(runner.schedule.batches)} batch da {source.description}"
    )
    result = pretrain(runner, out_dir=config.out_dir, config_echo=config_items(config), resume=config.resume or None)
    print(format_pretrain_summary(result, config.mixer.value))
    return 0


def verify_cmd(args: argparse.Namespace, config: RunConfig) -> int:
    try:
        only = parse_name_list(args.only) if args.only else None
    except ValueError as e:
        raise ConfigError(f"--only: {e}") from None
    results = run_checks(only)
    print(format_verify_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.error(f"[VERIFY] ❌ Controlli falliti: {', '.join(failed)}")
        return 1
    return 0


COMMANDS: Dict[str, Callable[[argparse.Namespace, RunConfig], int]] = {
    "bench": bench_cmd,
    "pretrain": pretrain_cmd,
    "verify": verify_cmd,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse: 0 per --help, 2 per errori d'uso
        return int(e.code or 0)

    setup_colored_logging(SERVICE_NAME, args.log_level or LOG_LEVEL)
    set_run_context(new_run_id(), args.command)
    try:
        validate_config()
        config = parse_config(args.config, collect_overrides(args))
        tc.set_default_dtype(config.precision)
        write_config_echo(config, config.out_dir, args.command)
        return COMMANDS[args.command](args, config)
    except ConfigError as e:
        logger.error(f"❌ Configurazione non valida: {e}")
        return 2
    except (BrqError, OSError, MemoryError) as e:
        logger.debug(f"[CLI] {args.command} fallito", exc_info=True)
        logger.error(f"❌ {args.command} fallito: {type(e).__name__}: {e}")
        return 1
    finally:
        clear_run_context()
