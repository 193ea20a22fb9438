"""
Encoder BEST-RQ: sottocampionamento convoluzionale, pila di blocchi conformer-lite
e proiezione lineare sui logit del codebook.

Il solo slot che cambia fra le varianti è il mixer; `build_matched_configs`
allarga o stringe la manopola specifica di ciascun tipo finché il numero di
parametri rientra nel budget.
"""
import logging
from enum import Enum
from typing import Dict, List, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from . import tensorcore as tc
from .errors import ConfigError, InfeasibleBudgetError, ShapeError, TooShortInputError
from .layers import Conv1d, LayerNorm, Linear, Module, make_rng, positional_features, shapes_only
from .mixers import MixerConfig, MixerKind, build_mixer
from .tensorcore import Tensor

logger = logging.getLogger(__name__)

SUBSAMPLE_FACTOR = 4
KNOB_CEILING = 1 << 16


class PositionalMode(str, Enum):
    NONE = "none"
    SINUSOIDAL = "sinusoidal"


class EncoderConfig(BaseModel):
    """
    Configurazione dell'encoder. `d_model` e `seed` dell'encoder prevalgono su
    quelli del mixer annidato.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    mixer: MixerConfig = MixerConfig()
    n_layers: int = Field(4, ge=1)
    d_model: int = Field(128, ge=1)
    d_ffn: int = Field(512, ge=1)
    conv_kernel: int = Field(15, ge=1)
    vocab: int = Field(512, ge=2)
    d_feat: int = Field(80, ge=1)
    positional_mode: PositionalMode = PositionalMode.NONE
    seed: int = 0

    @field_validator("conv_kernel")
    @classmethod
    def _odd_kernel(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError("conv_kernel deve essere dispari (padding simmetrico)")
        return value

    @property
    def kind(self) -> MixerKind:
        return MixerKind(self.mixer.kind)

    def resolved_mixer(self) -> MixerConfig:
        return self.mixer.model_copy(update={"d_model": self.d_model, "seed": self.seed})

    def with_kind(self, kind: MixerKind) -> "EncoderConfig":
        return self.model_copy(update={"mixer": self.mixer.model_copy(update={"kind": kind})})


class ParamBudget(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    target_params: int = Field(3_000_000, ge=1)
    tolerance_fraction: float = Field(0.02, gt=0.0, le=0.05)


PRESETS: Dict[str, dict] = {
    "desk": dict(d_model=128, n_layers=4, d_ffn=512, vocab=512),
    "bench": dict(d_model=128, n_layers=8, d_ffn=512, vocab=512),
    "small": dict(d_model=576, n_layers=12, d_ffn=2560, vocab=8192, mixer=MixerConfig(n_heads=8)),
    "large": dict(d_model=768, n_layers=24, d_ffn=3072, vocab=8192, mixer=MixerConfig(n_heads=12)),
}


def preset(name: str, **overrides) -> EncoderConfig:
    """Config predefinita per nome (`desk`, `bench`, `small`, `large`)."""
    if name not in PRESETS:
        raise ConfigError(f"preset sconosciuto '{name}' (ammessi: {', '.join(PRESETS)})")
    return EncoderConfig(**{**PRESETS[name], **overrides})


# ---------------------------------------------------------------------------
# Moduli
# ---------------------------------------------------------------------------

class ConvSubsampler(Module):
    """Due convoluzioni kernel 3, stride 2, con GELU: il tempo si riduce di 4."""

    def __init__(self, d_feat: int, d_model: int, seed: int):
        self.conv1 = Conv1d(d_feat, d_model, 3, make_rng(seed, "subsample", 1), stride=2)
        self.conv2 = Conv1d(d_model, d_model, 3, make_rng(seed, "subsample", 2), stride=2)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] < SUBSAMPLE_FACTOR:
            raise TooShortInputError(
                f"servono almeno {SUBSAMPLE_FACTOR} frame per il sottocampionamento, ricevuti {x.shape[1]}"
            )
        x = tc.gelu(self.conv1(tc.pad_time(x, 1, 1, mode="replicate")))
        return tc.gelu(self.conv2(tc.pad_time(x, 1, 1, mode="replicate")))


class FeedForward(Module):
    def __init__(self, d_model: int, d_ffn: int, rng: np.random.Generator):
        self.inner = Linear(d_model, d_ffn, rng)
        self.out = Linear(d_ffn, d_model, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.out(tc.silu(self.inner(x)))


class ConformerLiteBlock(Module):
    """
    Blocco pre-norm: ½FFN, mixer, convoluzione depthwise, ½FFN, layer norm finale.
    """

    def __init__(self, config: EncoderConfig, layer: int):
        d = config.d_model
        seed = config.seed
        self.ffn1_norm = LayerNorm(d)
        self.ffn1 = FeedForward(d, config.d_ffn, make_rng(seed, layer, "ffn1"))
        self.mixer_norm = LayerNorm(d)
        self.mixer = build_mixer(config.resolved_mixer(), layer)
        self.conv_norm = LayerNorm(d)
        self.conv_depthwise = Conv1d(d, d, config.conv_kernel, make_rng(seed, layer, "conv_dw"), groups=d)
        self.conv_pointwise = Linear(d, d, make_rng(seed, layer, "conv_pw"))
        self.ffn2_norm = LayerNorm(d)
        self.ffn2 = FeedForward(d, config.d_ffn, make_rng(seed, layer, "ffn2"))
        self.final_norm = LayerNorm(d)
        self._pad = (config.conv_kernel - 1) // 2

    def conv_branch(self, x: Tensor) -> Tensor:
        padded = tc.pad_time(x, self._pad, self._pad, mode="zeros")
        return self.conv_pointwise(tc.gelu(self.conv_depthwise(padded)))

    def forward(self, x: Tensor) -> Tensor:
        x = tc.add(x, tc.scale(self.ffn1(self.ffn1_norm(x)), 0.5))
        x = tc.add(x, self.mixer(self.mixer_norm(x)))
        x = tc.add(x, self.conv_branch(self.conv_norm(x)))
        x = tc.add(x, tc.scale(self.ffn2(self.ffn2_norm(x)), 0.5))
        return self.final_norm(x)

    def residual_outputs(self) -> List[Linear]:
        return [self.ffn1.out, *self.mixer.output_layers(), self.conv_pointwise, self.ffn2.out]

    def zero_residual_branches(self) -> None:
        for layer in self.residual_outputs():
            layer.zero_()


class Encoder(Module):
    def __init__(self, config: EncoderConfig):
        self.subsample = ConvSubsampler(config.d_feat, config.d_model, config.seed)
        self.blocks = [ConformerLiteBlock(config, layer) for layer in range(config.n_layers)]
        self.head = Linear(config.d_model, config.vocab, make_rng(config.seed, "head"))
        self._config = config

    @property
    def config(self) -> EncoderConfig:
        return self._config

    def embed(self, features: Tensor) -> Tensor:
        """Frontend: ritaglio a multiplo di 4, sottocampionamento e posizionale opzionale."""
        if features.ndim != 3 or features.shape[-1] != self._config.d_feat:
            raise ShapeError(f"encoder: attese feature B×T×{self._config.d_feat}, ricevute {features.shape}")
        steps = features.shape[1]
        if steps < SUBSAMPLE_FACTOR:
            raise TooShortInputError(f"servono almeno {SUBSAMPLE_FACTOR} frame, ricevuti {steps}")
        x = self.subsample(tc.crop_time(features, steps - steps % SUBSAMPLE_FACTOR))
        if self._config.positional_mode == PositionalMode.SINUSOIDAL:
            x = tc.add(x, positional_features(x.shape[0], x.shape[1], self._config.d_model))
        return x

    def forward(self, features: Tensor) -> Tensor:
        x = self.embed(features)
        for block in self.blocks:
            x = block(x)
        return self.head(x)

    def zero_residual_branches(self) -> None:
        for block in self.blocks:
            block.zero_residual_branches()


def _as_tensor(features: Union[np.ndarray, Tensor]) -> Tensor:
    return features if isinstance(features, Tensor) else Tensor(features)


def conv_subsample(features: Union[np.ndarray, Tensor], config: EncoderConfig) -> Tensor:
    """Solo il frontend convoluzionale: B×T×d_feat → B×⌈T/4⌉×d_model."""
    return ConvSubsampler(config.d_feat, config.d_model, config.seed)(_as_tensor(features))


def block_forward(x: Union[np.ndarray, Tensor], config: EncoderConfig, layer: int = 0) -> Tensor:
    return ConformerLiteBlock(config, layer)(_as_tensor(x))


def encode(features: Union[np.ndarray, Tensor], config: EncoderConfig) -> Tensor:
    """Logit B×⌊T/4⌋×V; funzione pura di (seed, config, ingresso)."""
    return Encoder(config)(_as_tensor(features))


def param_count(config: EncoderConfig) -> int:
    """Scalari addestrabili dell'encoder (proiezione e codebook esclusi)."""
    with shapes_only():
        return Encoder(config).param_count()


# ---------------------------------------------------------------------------
# Parametri allineati
# ---------------------------------------------------------------------------

KNOBS: Dict[MixerKind, str] = {
    MixerKind.MHSA: "d_ffn",
    MixerKind.FASTFORMER: "d_ffn",
    MixerKind.HYPERMIXING: "d_tmmlp",
    MixerKind.SUMMARYMIXING: "d_summary",
    MixerKind.MAMBA: "d_inner",
}


def knob_value(config: EncoderConfig) -> int:
    knob = KNOBS[config.kind]
    return getattr(config, knob) if knob == "d_ffn" else getattr(config.mixer, knob)


def with_knob(config: EncoderConfig, value: int) -> EncoderConfig:
    knob = KNOBS[config.kind]
    if knob == "d_ffn":
        return config.model_copy(update={"d_ffn": value})
    return config.model_copy(update={"mixer": config.mixer.model_copy(update={knob: value})})


def _bisect_knob(config: EncoderConfig, target: int) -> Tuple[int, int]:
    """Valore intero della manopola con conteggio più vicino al target, e il conteggio."""
    count_at = lambda v: param_count(with_knob(config, v))  # noqa: E731
    low = 1
    if count_at(low) >= target:
        return low, count_at(low)
    high = max(knob_value(config), 2)
    while count_at(high) < target:
        if high >= KNOB_CEILING:
            return high, count_at(high)
        high = min(high * 2, KNOB_CEILING)
    # invariante: count(low) < target <= count(high)
    while high - low > 1:
        mid = (low + high) // 2
        if count_at(mid) < target:
            low = mid
        else:
            high = mid
    low_count, high_count = count_at(low), count_at(high)
    if target - low_count <= high_count - target:
        return low, low_count
    return high, high_count


def build_matched_configs(budget: ParamBudget, base: EncoderConfig) -> Dict[MixerKind, EncoderConfig]:
    """
    Una config per tipo di mixer, ciascuna entro `tolerance_fraction` del target.

    Raises:
        InfeasibleBudgetError: la manopola non raggiunge il budget entro i suoi limiti
    """
    target = budget.target_params
    allowed = budget.tolerance_fraction * target
    matched: Dict[MixerKind, EncoderConfig] = {}
    for kind in MixerKind:
        config = base.with_kind(kind)
        config.resolved_mixer().check()
        count = param_count(config)
        if abs(count - target) <= allowed:
            matched[kind] = config
            logger.info(f"[ENCODER] {kind.value}: {count:,} parametri (invariato)")
            continue
        value, count = _bisect_knob(config, target)
        if abs(count - target) > allowed:
            raise InfeasibleBudgetError(
                f"{kind.value}: budget di {target:,} parametri non raggiungibile con {KNOBS[kind]}",
                closest={"kind": kind.value, KNOBS[kind]: value, "params": count},
            )
        matched[kind] = with_knob(config, value)
        logger.info(f"[ENCODER] {kind.value}: {KNOBS[kind]}={value} → {count:,} parametri")
    return matched
