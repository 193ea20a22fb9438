"""
I cinque token mixer dietro un'unica interfaccia B×T×d → B×T×d.

MHSA è quadratico nella lunghezza; Fastformer, HyperMixing, SummaryMixing e
Mamba sono lineari. Ogni mixer è un Module con parametri inizializzati da
`MixerConfig.seed`, quindi la stessa config produce sempre gli stessi pesi.
"""
import copy
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from . import tensorcore as tc
from .errors import ConfigError, ShapeError
from .layers import LayerNorm, Linear, MLP, Module, init_constant, init_uniform, make_rng, positional_features
from .selective_scan import DEFAULT_CHUNK, selective_scan, selective_scan_reference
from .tensorcore import Tensor

logger = logging.getLogger(__name__)


class MixerKind(str, Enum):
    MHSA = "mhsa"
    FASTFORMER = "fastformer"
    HYPERMIXING = "hypermixing"
    SUMMARYMIXING = "summarymixing"
    MAMBA = "mamba"

    @classmethod
    def parse(cls, value: str) -> "MixerKind":
        try:
            return cls(value.strip().lower())
        except ValueError:
            known = ", ".join(k.value for k in cls)
            raise ConfigError(f"tipo di mixer sconosciuto '{value}' (ammessi: {known})") from None


HEADED_KINDS = (MixerKind.MHSA, MixerKind.FASTFORMER)


class MixerConfig(BaseModel):
    """Configurazione del mixer; le larghezze non usate dal tipo scelto sono ignorate."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: MixerKind = MixerKind.MHSA
    d_model: int = Field(128, ge=1)
    n_heads: int = Field(4, ge=1)
    d_summary: int = Field(256, ge=1)
    d_tmmlp: int = Field(128, ge=1)
    d_hyper: int = Field(128, ge=1)
    d_state: int = Field(16, ge=1)
    d_inner: int = Field(64, ge=1)
    bidirectional: bool = True
    hyper_positional: bool = False
    scan_chunk: int = Field(DEFAULT_CHUNK, ge=1)
    seed: int = 0

    def check(self) -> "MixerConfig":
        if self.kind in HEADED_KINDS and self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model={self.d_model} non divisibile per n_heads={self.n_heads} ({self.kind.value})"
            )
        return self

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class MixerOutput:
    hidden: Tensor


def _check_input(x: Tensor, d_model: int, name: str) -> None:
    if x.ndim != 3 or x.shape[-1] != d_model:
        raise ShapeError(f"{name}: atteso B×T×{d_model}, ricevuto {x.shape}")


def _split_heads(x: Tensor, n_heads: int):
    width = x.shape[-1] // n_heads
    return [tc.slice_lastdim(x, h * width, (h + 1) * width) for h in range(n_heads)]


class Mixer(Module):
    kind: MixerKind

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def output_layers(self):
        """Proiezioni che, azzerate, annullano l'uscita del mixer."""
        raise NotImplementedError


# ---------------------------------------------------------------------------
# MHSA
# ---------------------------------------------------------------------------

class MultiHeadSelfAttention(Mixer):
    kind = MixerKind.MHSA

    def __init__(self, config: MixerConfig, layer: int = 0):
        config.check()
        d = config.d_model
        self.n_heads = config.n_heads
        self.query = Linear(d, d, make_rng(config.seed, layer, "mhsa", "query"))
        self.key = Linear(d, d, make_rng(config.seed, layer, "mhsa", "key"))
        self.value = Linear(d, d, make_rng(config.seed, layer, "mhsa", "value"))
        self.out = Linear(d, d, make_rng(config.seed, layer, "mhsa", "out"))
        self._d_model = d

    @staticmethod
    def _attend(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        # una testa alla volta: al massimo due matrici T×T vive
        q = tc.scale(q, 1.0 / math.sqrt(q.shape[-1]))
        weights = tc.softmax_lastdim(tc.matmul(q, tc.transpose(k)))
        return tc.matmul(weights, v)

    def forward(self, x: Tensor) -> Tensor:
        _check_input(x, self._d_model, "mhsa")
        heads = zip(
            _split_heads(self.query(x), self.n_heads),
            _split_heads(self.key(x), self.n_heads),
            _split_heads(self.value(x), self.n_heads),
        )
        context = [self._attend(q, k, v) for q, k, v in heads]
        merged = context[0] if len(context) == 1 else tc.concat_lastdim(context)
        return self.out(merged)

    def output_layers(self):
        return [self.out]


# ---------------------------------------------------------------------------
# Fastformer
# ---------------------------------------------------------------------------

def fastformer_additive_pool(M: Tensor, w: Tensor) -> Tensor:
    """
    Riassume le righe di M (B×T×d_head) in un vettore globale B×1×d_head.

    α_t = softmax_t(wᵀ m_t / √d_head), uscita Σ_t α_t m_t.
    """
    width = M.shape[-1]
    if w.shape not in ((width,), (width, 1)):
        raise ShapeError(f"additive_pool: vettore di punteggio {w.shape}, atteso ({width},)")
    column = w if w.ndim == 2 else _as_column(w)
    scores = tc.scale(tc.matmul(M, column), 1.0 / math.sqrt(width))
    alpha = tc.softmax_lastdim(tc.transpose(scores))
    return tc.matmul(alpha, M)


def _as_column(w: Tensor) -> Tensor:
    data = w.data[:, None]
    return tc.custom_op(np.ascontiguousarray(data), (w,), lambda g: (g[:, 0],), "as_column")


class Fastformer(Mixer):
    kind = MixerKind.FASTFORMER

    def __init__(self, config: MixerConfig, layer: int = 0):
        config.check()
        d = config.d_model
        dh = config.d_head
        self.n_heads = config.n_heads
        self.query = Linear(d, d, make_rng(config.seed, layer, "fastformer", "query"))
        self.key = Linear(d, d, make_rng(config.seed, layer, "fastformer", "key"))
        self.value = Linear(d, d, make_rng(config.seed, layer, "fastformer", "value"))
        bound = 1.0 / math.sqrt(dh)
        rng = make_rng(config.seed, layer, "fastformer", "pool")
        self.query_scores = [
            tc.parameter(init_uniform(rng, (dh, 1), bound)) for _ in range(self.n_heads)
        ]
        self.key_scores = [
            tc.parameter(init_uniform(rng, (dh, 1), bound)) for _ in range(self.n_heads)
        ]
        self.out = Linear(d, d, make_rng(config.seed, layer, "fastformer", "out"))
        self._d_model = d

    def forward(self, x: Tensor) -> Tensor:
        _check_input(x, self._d_model, "fastformer")
        Q = self.query(x)
        q_heads = _split_heads(Q, self.n_heads)
        k_heads = _split_heads(self.key(x), self.n_heads)
        v_heads = _split_heads(self.value(x), self.n_heads)
        mixed = []
        for h in range(self.n_heads):
            q = fastformer_additive_pool(q_heads[h], self.query_scores[h])
            p = tc.mul(q, k_heads[h])
            k = fastformer_additive_pool(p, self.key_scores[h])
            mixed.append(tc.mul(k, v_heads[h]))
        u = mixed[0] if len(mixed) == 1 else tc.concat_lastdim(mixed)
        return tc.add(self.out(u), Q)

    def output_layers(self):
        return [self.query, self.out]


# ---------------------------------------------------------------------------
# HyperMixing
# ---------------------------------------------------------------------------

def tm_mlp(
    x: Tensor,
    W1: Tensor,
    W2: Tensor,
    norm_scale: Optional[Tensor] = None,
    norm_shift: Optional[Tensor] = None,
) -> Tensor:
    """
    Token-mixing MLP con pesi per-token: LayerNorm(W1 · GELU(W2ᵀ X)) per ogni elemento del batch.

    Args:
        x: B×T×d
        W1, W2: B×T×d_tmmlp (una riga per token)
    """
    if W1.shape != W2.shape or W1.shape[:2] != x.shape[:2]:
        raise ShapeError(f"tm_mlp: x {x.shape}, W1 {W1.shape}, W2 {W2.shape} (T deve coincidere)")
    hidden = tc.gelu(tc.matmul(tc.transpose(W2), x))
    return tc.layer_norm(tc.matmul(W1, hidden), norm_scale, norm_shift)


class HyperMixing(Mixer):
    kind = MixerKind.HYPERMIXING

    def __init__(self, config: MixerConfig, layer: int = 0):
        d = config.d_model
        self.positional = config.hyper_positional
        d_in = 2 * d if self.positional else d
        rng = lambda part: make_rng(config.seed, layer, "hypermixing", part)  # noqa: E731
        self.trunk = Linear(d_in, config.d_hyper, rng("trunk"))
        self.head_w1 = Linear(config.d_hyper, config.d_tmmlp, rng("head_w1"))
        self.head_w2 = Linear(config.d_hyper, config.d_tmmlp, rng("head_w2"))
        self.norm = LayerNorm(d)
        self.out = Linear(d, d, rng("out"))
        self._d_model = d

    def generate_weights(self, x: Tensor):
        """Righe di W1 e W2 generate token per token dalla hypernetwork."""
        source = x
        if self.positional:
            source = tc.concat_lastdim([x, positional_features(x.shape[0], x.shape[1], self._d_model)])
        trunk = tc.gelu(self.trunk(source))
        return self.head_w1(trunk), self.head_w2(trunk)

    def forward(self, x: Tensor) -> Tensor:
        _check_input(x, self._d_model, "hypermixing")
        W1, W2 = self.generate_weights(x)
        mixed = tm_mlp(x, W1, W2, self.norm.scale, self.norm.shift)
        return self.out(mixed)

    def output_layers(self):
        return [self.out]


# ---------------------------------------------------------------------------
# SummaryMixing
# ---------------------------------------------------------------------------

class SummaryMixing(Mixer):
    kind = MixerKind.SUMMARYMIXING

    def __init__(self, config: MixerConfig, layer: int = 0):
        d = config.d_model
        ds = config.d_summary
        rng = lambda part: make_rng(config.seed, layer, "summarymixing", part)  # noqa: E731
        self.summary = MLP(d, ds, ds, rng("summary"))
        self.local = MLP(d, ds, ds, rng("local"))
        self.combine = MLP(2 * ds, ds, d, rng("combine"))
        self._d_model = d

    def summary_vector(self, x: Tensor) -> Tensor:
        """s̄ = media nel tempo di s(x_t), shape B×1×d_summary."""
        return tc.mean_over_time(self.summary(x))

    def forward(self, x: Tensor) -> Tensor:
        _check_input(x, self._d_model, "summarymixing")
        summary = tc.expand_time(self.summary_vector(x), x.shape[1])
        return self.combine(tc.concat_lastdim([self.local(x), summary]))

    def output_layers(self):
        return [self.combine.out]


# ---------------------------------------------------------------------------
# Mamba
# ---------------------------------------------------------------------------

class MambaDirection(Module):
    """Un blocco Mamba unidirezionale: proiezione con gate, parametri selettivi, scan, uscita."""

    def __init__(self, config: MixerConfig, rng_for: Callable[[str], np.random.Generator]):
        d = config.d_model
        H = config.d_inner
        N = config.d_state
        rank = math.ceil(d / 16)
        self.in_proj = Linear(d, 2 * H, rng_for("in_proj"))
        self.delta_down = Linear(H, rank, rng_for("delta_down"), bias=False)
        self.delta_up = Linear(rank, H, rng_for("delta_up"))
        self.b_proj = Linear(H, N, rng_for("b_proj"))
        self.c_proj = Linear(H, N, rng_for("c_proj"))
        # A = -exp(A_log), inizializzata a -(1..N) per ogni canale
        self.A_log = tc.parameter(np.tile(np.log(np.arange(1, N + 1, dtype=np.float64)), (H, 1)))
        self.D = tc.parameter(init_constant((H,), 1.0))
        self.out_proj = Linear(H, d, rng_for("out_proj"))
        self._inner = H
        self._chunk = config.scan_chunk

    def forward(self, x: Tensor, use_oracle: bool = False) -> Tensor:
        projected = self.in_proj(x)
        u = tc.silu(tc.slice_lastdim(projected, 0, self._inner))
        gate = tc.silu(tc.slice_lastdim(projected, self._inner, 2 * self._inner))
        delta = tc.softplus(self.delta_up(self.delta_down(u)))
        Bm = self.b_proj(u)
        Cm = self.c_proj(u)
        A = tc.scale(tc.exp(self.A_log), -1.0)
        if use_oracle:
            y = Tensor(selective_scan_reference(u.data, delta.data, A.data, Bm.data, Cm.data))
        else:
            y = selective_scan(u, delta, A, Bm, Cm, chunk=self._chunk)
        y = tc.add(y, tc.mul(u, self.D))
        return self.out_proj(tc.mul(y, gate))


class Mamba(Mixer):
    """Mamba bidirezionale: direzione in avanti e sul tempo invertito, fuse da una proiezione lineare."""

    kind = MixerKind.MAMBA

    def __init__(self, config: MixerConfig, layer: int = 0):
        d = config.d_model
        self.bidirectional = config.bidirectional
        self.forward_dir = MambaDirection(config, lambda p: make_rng(config.seed, layer, "mamba", "fwd", p))
        if self.bidirectional:
            self.backward_dir = MambaDirection(config, lambda p: make_rng(config.seed, layer, "mamba", "bwd", p))
            self.fusion = Linear(2 * d, d, make_rng(config.seed, layer, "mamba", "fusion"))
        self._d_model = d

    def forward(self, x: Tensor, use_oracle: bool = False) -> Tensor:
        _check_input(x, self._d_model, "mamba")
        ahead = self.forward_dir(x, use_oracle=use_oracle)
        if not self.bidirectional:
            return ahead
        behind = tc.flip_time(self.backward_dir(tc.flip_time(x), use_oracle=use_oracle))
        return self.fusion(tc.concat_lastdim([ahead, behind]))

    def output_layers(self):
        return [self.fusion] if self.bidirectional else [self.forward_dir.out_proj]

    def swap_directions(self) -> "Mamba":
        """Copia speculare: direzioni scambiate e metà della fusione invertite."""
        if not self.bidirectional:
            return self
        d = self._d_model
        mirrored = copy.copy(self)
        mirrored.forward_dir, mirrored.backward_dir = self.backward_dir, self.forward_dir
        mirrored.fusion = copy.copy(self.fusion)
        weight = self.fusion.weight.data
        mirrored.fusion.weight = tc.parameter(np.concatenate([weight[d:], weight[:d]], axis=0))
        return mirrored


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

MIXER_REGISTRY: Dict[MixerKind, type] = {
    MixerKind.MHSA: MultiHeadSelfAttention,
    MixerKind.FASTFORMER: Fastformer,
    MixerKind.HYPERMIXING: HyperMixing,
    MixerKind.SUMMARYMIXING: SummaryMixing,
    MixerKind.MAMBA: Mamba,
}


def build_mixer(config: MixerConfig, layer: int = 0) -> Mixer:
    return MIXER_REGISTRY[MixerKind(config.kind)](config, layer)


def mix(x: Tensor, mixer: Union[MixerConfig, Mixer]) -> MixerOutput:
    """Punto d'ingresso uniforme usato da encoder e bench."""
    if isinstance(mixer, MixerConfig):
        mixer = build_mixer(mixer)
    hidden = mixer(x)
    if hidden.shape != x.shape:
        raise ShapeError(f"mixer {mixer.kind.value}: uscita {hidden.shape}, ingresso {x.shape}")
    return MixerOutput(hidden=hidden)


def _forward_for(kind: MixerKind):
    def run(x: Tensor, config: MixerConfig) -> Tensor:
        return mix(x, config.model_copy(update={"kind": kind})).hidden
    run.__name__ = f"{kind.value}_forward"
    return run


mhsa_forward = _forward_for(MixerKind.MHSA)
fastformer_forward = _forward_for(MixerKind.FASTFORMER)
hypermixing_forward = _forward_for(MixerKind.HYPERMIXING)
summarymixing_forward = _forward_for(MixerKind.SUMMARYMIXING)
mamba_forward = _forward_for(MixerKind.MAMBA)


def count_macs(config: MixerConfig, length: int, batch: int = 1) -> int:
    """MAC contati dal meter in un forward del mixer su un ingresso B×length×d."""
    mixer = build_mixer(config)
    x = Tensor(make_rng(config.seed, "macs").standard_normal((batch, length, config.d_model)))
    with tc.no_grad():
        reading = tc.current_meter().measure(lambda: mixer(x))
    logger.debug(f"[MIXER] {config.kind.value} T={length}: {reading.macs} MAC")
    return reading.macs
