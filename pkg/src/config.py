"""
Configurazione dei comandi: variabili d'ambiente (.env) e file `chiave = valore`.

Precedenza: flag da riga di comando > file > default. La config effettiva viene
riscritta accanto agli output e, ripassata con `--config`, riproduce la run.
"""
import logging
import os
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from rapidfuzz import fuzz, process

from .bench import SweepScope, SweepSpec
from .bestrq import MaskSettings
from .encoder import PRESETS, EncoderConfig, ParamBudget, PositionalMode, preset
from .errors import ConfigError, OutputWriteError
from .mixers import MixerConfig, MixerKind
from .patterns import parse_config_line, parse_count, parse_int_list, parse_name_list
from .training import TrainSettings

load_dotenv()

logger = logging.getLogger(__name__)

# Variabili ambiente
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
SERVICE_NAME = os.getenv("BRQ_SERVICE_NAME", "bestrq-bench")
OUT_DIR = os.getenv("BRQ_OUT_DIR", "runs")

ALL_KINDS = [kind.value for kind in MixerKind]
DEFAULT_LENGTHS = list(range(1000, 8001, 1000))
DEFAULT_SYNTHETIC = "n=64,len=400..800,d=80"

# Chiavi dell'encoder che, se assenti, prendono il valore dal preset
_PRESET_KEYS = ("n_layers", "d_model", "d_ffn", "vocab")


class RunConfig(BaseModel):
    """Tutte le impostazioni dei comandi, ciascuna con un default."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    # generali
    seed: int = 0
    out_dir: str = OUT_DIR
    precision: int = 64

    # encoder e mixer
    preset: str = "desk"
    mixer: MixerKind = MixerKind.MHSA
    n_layers: Optional[int] = Field(None, ge=1)
    d_model: Optional[int] = Field(None, ge=1)
    d_ffn: Optional[int] = Field(None, ge=1)
    vocab: Optional[int] = Field(None, ge=2)
    conv_kernel: int = Field(15, ge=1)
    d_feat: int = Field(80, ge=1)
    positional_mode: PositionalMode = PositionalMode.NONE
    n_heads: int = Field(4, ge=1)
    d_summary: int = Field(256, ge=1)
    d_tmmlp: int = Field(128, ge=1)
    d_hyper: int = Field(128, ge=1)
    d_state: int = Field(16, ge=1)
    d_inner: int = Field(64, ge=1)
    bidirectional: bool = True
    hyper_positional: bool = False
    scan_chunk: int = Field(32, ge=1)

    # BEST-RQ
    start_prob: float = Field(0.01, ge=0.0, le=1.0)
    span_length: int = Field(8, ge=1)
    noise_std: float = Field(0.1, ge=0.0)
    d_code: int = Field(16, ge=1)

    # pre-training
    steps: int = Field(1000, ge=1)
    lr: float = Field(1e-3, gt=0.0)
    warmup_steps: int = Field(100, ge=0)
    clip_norm: float = Field(5.0, ge=0.0)
    frame_cap: int = Field(4000, ge=4)
    log_every: int = Field(50, ge=1)
    checkpoint_every: int = Field(0, ge=0)
    synthetic: str = DEFAULT_SYNTHETIC
    features: str = ""
    resume: str = ""

    # benchmark
    kinds: List[MixerKind] = Field(default_factory=lambda: [MixerKind(k) for k in ALL_KINDS])
    lengths: List[int] = Field(default_factory=lambda: list(DEFAULT_LENGTHS))
    batch_size: int = Field(6, ge=1)
    repeats: int = Field(10, ge=3)
    warmup: int = Field(2, ge=0)
    scope: SweepScope = SweepScope.ENCODER
    bench_preset: str = "bench"
    target_params: int = Field(3_000_000, ge=1)
    tolerance: float = Field(0.02, gt=0.0, le=0.05)

    @field_validator("kinds", mode="before")
    @classmethod
    def _split_kinds(cls, value):
        return parse_name_list(value) if isinstance(value, str) else value

    @field_validator("lengths", mode="before")
    @classmethod
    def _split_lengths(cls, value):
        return parse_int_list(value) if isinstance(value, str) else value

    @field_validator("lengths")
    @classmethod
    def _sweep_lengths(cls, value: List[int]) -> List[int]:
        # stessi vincoli dello sweep, ma segnalati con la riga del file
        try:
            return SweepSpec(lengths=value).lengths
        except ValidationError as e:
            raise ValueError(e.errors()[0]["msg"]) from None

    @field_validator("target_params", mode="before")
    @classmethod
    def _count(cls, value):
        return parse_count(value) if isinstance(value, str) else value

    @field_validator("conv_kernel")
    @classmethod
    def _odd_kernel(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError("conv_kernel deve essere dispari (padding simmetrico)")
        return value

    @field_validator("precision")
    @classmethod
    def _precision(cls, value: int) -> int:
        if value not in (32, 64):
            raise ValueError("precision ammette solo 64 o 32")
        return value

    @field_validator("preset", "bench_preset")
    @classmethod
    def _known_preset(cls, value: str) -> str:
        if value not in PRESETS:
            raise ValueError(f"preset sconosciuto (ammessi: {', '.join(PRESETS)})")
        return value

    # -- viste tipizzate ---------------------------------------------------
    def mixer_config(self, kind: Optional[MixerKind] = None) -> MixerConfig:
        return MixerConfig(
            kind=kind or self.mixer,
            d_model=self.resolved("d_model"),
            n_heads=self.n_heads,
            d_summary=self.d_summary,
            d_tmmlp=self.d_tmmlp,
            d_hyper=self.d_hyper,
            d_state=self.d_state,
            d_inner=self.d_inner,
            bidirectional=self.bidirectional,
            hyper_positional=self.hyper_positional,
            scan_chunk=self.scan_chunk,
            seed=self.seed,
        )

    def resolved(self, key: str, preset_name: Optional[str] = None):
        value = getattr(self, key)
        return value if value is not None else PRESETS[preset_name or self.preset][key]

    def encoder_config(self, preset_name: Optional[str] = None) -> EncoderConfig:
        name = preset_name or self.preset
        widths = {key: self.resolved(key, name) for key in _PRESET_KEYS}
        # costruita da capo: i validatori di EncoderConfig valgono anche qui
        return preset(
            name,
            **widths,
            mixer=self.mixer_config().model_copy(update={"d_model": widths["d_model"]}),
            conv_kernel=self.conv_kernel,
            d_feat=self.d_feat,
            positional_mode=self.positional_mode,
            seed=self.seed,
        )

    def mask_settings(self) -> MaskSettings:
        return MaskSettings(
            start_prob=self.start_prob,
            span_length=self.span_length,
            noise_std=self.noise_std,
            vocab=self.resolved("vocab"),
            d_code=self.d_code,
        )

    def train_settings(self) -> TrainSettings:
        return TrainSettings(
            steps=self.steps,
            lr=self.lr,
            warmup_steps=self.warmup_steps,
            clip_norm=self.clip_norm,
            frame_cap=self.frame_cap,
            log_every=self.log_every,
            checkpoint_every=self.checkpoint_every,
            seed=self.seed,
        )

    def sweep_spec(self) -> SweepSpec:
        return SweepSpec(
            lengths=self.lengths,
            batch_size=self.batch_size,
            repeats=self.repeats,
            warmup=self.warmup,
            kinds=self.kinds,
            scope=self.scope,
            seed=self.seed,
        )

    def param_budget(self) -> ParamBudget:
        return ParamBudget(target_params=self.target_params, tolerance_fraction=self.tolerance)


KNOWN_KEYS = list(RunConfig.model_fields)


def suggest_key(key: str) -> Optional[str]:
    """Chiave nota più simile (rapidfuzz), se abbastanza vicina."""
    match = process.extractOne(key, KNOWN_KEYS, scorer=fuzz.WRatio, score_cutoff=70)
    return match[0] if match else None


def _unknown_key_error(key: str, line: Optional[int]) -> ConfigError:
    hint = suggest_key(key)
    message = f"chiave sconosciuta '{key}'" + (f" (forse '{hint}'?)" if hint else "")
    return ConfigError(message, line=line)


def read_config_file(path) -> Dict[str, Tuple[str, int]]:
    """Legge `chiave = valore` con numero di riga; chiavi ripetute: vince l'ultima."""
    entries: Dict[str, Tuple[str, int]] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"file di configurazione non leggibile {path}: {e}") from None
    for number, line in enumerate(text.splitlines(), start=1):
        try:
            parsed = parse_config_line(line)
        except ValueError as e:
            raise ConfigError(str(e), line=number) from None
        if parsed is None:
            continue
        key, value = parsed
        if key not in RunConfig.model_fields:
            raise _unknown_key_error(key, number)
        entries[key] = (value, number)
    return entries


def parse_config(path=None, overrides: Optional[Mapping[str, str]] = None) -> RunConfig:
    """
    Config effettiva: default, poi file, poi override.

    Raises:
        ConfigError: chiave sconosciuta o valore non interpretabile (con numero di riga)
    """
    entries = read_config_file(path) if path else {}
    for key, value in (overrides or {}).items():
        key = key.lower()
        if key not in RunConfig.model_fields:
            raise _unknown_key_error(key, None)
        entries[key] = (str(value), None)

    values = {key: value for key, (value, _) in entries.items()}
    try:
        config = RunConfig(**values)
    except ValidationError as e:
        first = e.errors()[0]
        key = str(first["loc"][0]) if first["loc"] else "?"
        line = entries.get(key, (None, None))[1]
        raise ConfigError(f"valore non valido per '{key}' = {values.get(key)!r}: {first['msg']}", line=line) from None
    logger.debug(f"[CONFIG] Config effettiva: {len(entries)} chiavi esplicite")
    return config


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if hasattr(value, "value"):
        return str(value.value)
    if isinstance(value, list):
        return ",".join(_render(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_items(config: RunConfig) -> Dict[str, str]:
    """Ogni impostazione effettiva come testo, con i valori del preset esplicitati."""
    return {
        key: _render(config.resolved(key) if key in _PRESET_KEYS else getattr(config, key))
        for key in KNOWN_KEYS
    }


def format_config(config: RunConfig) -> str:
    lines = ["# config effettiva"]
    lines.extend(f"{key} = {value}" for key, value in config_items(config).items())
    return "\n".join(lines) + "\n"


def write_config_echo(config: RunConfig, out_dir, command: str) -> Path:
    path = Path(out_dir) / f"{command}.config"
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(format_config(config), encoding="utf-8")
    except OSError as e:
        raise OutputWriteError(path, f"scrittura della config fallita: {e}") from None
    logger.info(f"[CONFIG] Config effettiva scritta in {path}")
    return path


def validate_config() -> bool:
    """Valida le variabili d'ambiente all'avvio."""
    errors = []
    if LOG_LEVEL.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
        errors.append(f"LOG_LEVEL non valido: {LOG_LEVEL}")
    if not OUT_DIR:
        errors.append("BRQ_OUT_DIR vuoto")
    if errors:
        error_msg = "❌ Configurazione non valida:\n" + "\n".join(f"  - {error}" for error in errors)
        logger.error(error_msg)
        raise ConfigError(error_msg)
    logger.debug(f"[CONFIG] ✅ Ambiente valido (out_dir={OUT_DIR}, log_level={LOG_LEVEL})")
    return True
