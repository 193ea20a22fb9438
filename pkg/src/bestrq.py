"""
Obiettivo di pre-training BEST-RQ.

Una proiezione casuale congelata e un codebook congelato trasformano ogni gruppo
di 4 frame puliti in un indice (pseudo-target); l'ingresso del modello viene
mascherato a span e la cross-entropy è calcolata solo sulle posizioni mascherate.
"""
import hashlib
import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from . import tensorcore as tc
from .errors import (
    AlignmentError,
    ContractError,
    DegenerateProjectionError,
    NoLossPositionsError,
    ShapeError,
    TooShortInputError,
)
from .layers import make_rng
from .tensorcore import Tensor

logger = logging.getLogger(__name__)

STACK_FACTOR = 4
MIN_NORM = 1e-6
MAX_MASK_DRAWS = 100
_QUANTIZE_BLOCK = 256


class MaskSettings(BaseModel):
    """Parametri di mascheramento e quantizzazione."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    start_prob: float = Field(0.01, ge=0.0, le=1.0)
    span_length: int = Field(8, ge=1)
    noise_std: float = Field(0.1, ge=0.0)
    vocab: int = Field(512, ge=2)
    d_code: int = Field(16, ge=1)


def stack_frames(features: Union[np.ndarray, Tensor]) -> np.ndarray:
    """
    Concatena gruppi consecutivi di 4 frame: B×T×d → B×⌊T/4⌋×4d.

    I frame in coda che non completano un gruppo vengono scartati.
    """
    data = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    if data.ndim != 3:
        raise ShapeError(f"stack_frames: atteso B×T×d, ricevuto {data.shape}")
    batch, steps, width = data.shape
    if steps < STACK_FACTOR:
        raise TooShortInputError(f"servono almeno {STACK_FACTOR} frame, ricevuti {steps}")
    groups = steps // STACK_FACTOR
    return data[:, : groups * STACK_FACTOR].reshape(batch, groups, STACK_FACTOR * width)


def _checksum(array: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(array).tobytes()).hexdigest()


class RandomProjection:
    """Matrice A (4·d_feat × d_code) normale, congelata."""

    def __init__(self, matrix: np.ndarray):
        self.matrix = Tensor(matrix, requires_grad=False, name="projection")

    @classmethod
    def create(cls, d_input: int, d_code: int, seed: int) -> "RandomProjection":
        rng = make_rng(seed, "bestrq", "projection")
        return cls(rng.standard_normal((d_input, d_code)))

    @property
    def d_input(self) -> int:
        return self.matrix.shape[0]

    def project(self, stacked: np.ndarray) -> np.ndarray:
        return np.asarray(stacked) @ self.matrix.data

    def checksum(self) -> str:
        return _checksum(self.matrix.data)


class Codebook:
    """V voci normali congelate; nessuna riga con norma sotto 1e-6."""

    def __init__(self, entries: np.ndarray):
        norms = np.linalg.norm(entries, axis=1)
        if (norms < MIN_NORM).any():
            raise DegenerateProjectionError("il codebook contiene righe di norma nulla")
        self.entries = Tensor(entries, requires_grad=False, name="codebook")
        self._unit = entries / norms[:, None]

    @classmethod
    def create(cls, vocab: int, d_code: int, seed: int) -> "Codebook":
        rng = make_rng(seed, "bestrq", "codebook")
        entries = rng.standard_normal((vocab, d_code))
        redraws = 0
        while True:
            small = np.linalg.norm(entries, axis=1) < MIN_NORM
            if not small.any():
                break
            entries[small] = rng.standard_normal((int(small.sum()), d_code))
            redraws += 1
        if redraws:
            logger.debug(f"[BESTRQ] Codebook: {redraws} ripescaggi di righe quasi nulle")
        return cls(entries)

    @property
    def vocab(self) -> int:
        return self.entries.shape[0]

    @property
    def unit_entries(self) -> np.ndarray:
        return self._unit

    def checksum(self) -> str:
        return _checksum(self.entries.data)


def _unit_rows(projected: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(projected, axis=-1, keepdims=True)
    if (norms <= 0).any():
        flat = int(np.argmax((norms <= 0).reshape(-1)))
        raise DegenerateProjectionError(f"proiezione nulla (posizione {flat}): impossibile normalizzare")
    return projected / norms


def quantize(m: np.ndarray, proj: RandomProjection, book: Codebook) -> int:
    """
    Indice del codebook più vicino alla proiezione normalizzata di un frame impilato.

    A parità di distanza vince l'indice più basso.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (proj.d_input,):
        raise ShapeError(f"quantize: vettore di dimensione {m.shape}, attesa ({proj.d_input},)")
    target = _unit_rows(proj.project(m)[None, :])[0]
    distances = np.linalg.norm(book.unit_entries - target, axis=1)
    return int(np.argmin(distances))


def quantize_batch(stacked: np.ndarray, proj: RandomProjection, book: Codebook) -> np.ndarray:
    """Pseudo-target per B×T'×4d frame impilati; stesso calcolo di `quantize` riga per riga."""
    stacked = np.asarray(stacked, dtype=np.float64)
    if stacked.shape[-1] != proj.d_input:
        raise ShapeError(f"quantize_batch: frame di dimensione {stacked.shape[-1]}, attesa {proj.d_input}")
    flat = _unit_rows(proj.project(stacked.reshape(-1, stacked.shape[-1])))
    indices = np.empty(flat.shape[0], dtype=np.int64)
    unit = book.unit_entries
    for s in range(0, flat.shape[0], _QUANTIZE_BLOCK):
        block = flat[s:s + _QUANTIZE_BLOCK]
        distances = np.linalg.norm(unit[None, :, :] - block[:, None, :], axis=2)
        indices[s:s + _QUANTIZE_BLOCK] = np.argmin(distances, axis=1)
    return indices.reshape(stacked.shape[:-1])


@dataclass
class MaskPlan:
    """
    Maschera sull'asse impilato. `starts` marca le posizioni che aprono uno span;
    `mask` è l'unione degli span (tagliati a fine sequenza).
    """

    mask: np.ndarray
    starts: np.ndarray
    span_length: int
    start_prob: float

    @property
    def n_positions(self) -> int:
        return self.mask.shape[-1]

    @property
    def masked_count(self) -> int:
        return int(self.mask.sum())

    def reconstruct(self) -> np.ndarray:
        """Ricostruisce la maschera dagli inizi degli span."""
        return _spans_from_starts(self.starts, self.span_length)

    def force_span(self, row: int, position: int) -> None:
        starts = self.starts.reshape(-1, self.n_positions)
        starts[row, position] = True
        self.mask = _spans_from_starts(self.starts, self.span_length)


def _spans_from_starts(starts: np.ndarray, span_length: int) -> np.ndarray:
    n = starts.shape[-1]
    if n == 0:
        return np.zeros_like(starts, dtype=bool)
    counts = np.cumsum(starts.astype(np.int64), axis=-1)
    shifted = np.zeros_like(counts)
    if span_length < n:
        shifted[..., span_length:] = counts[..., :-span_length]
    return (counts - shifted) > 0


def _validate_mask_params(start_prob: float, span_length: int) -> None:
    if not 0.0 <= start_prob <= 1.0:
        raise ContractError(f"start_prob fuori da [0, 1]: {start_prob}")
    if span_length < 1:
        raise ContractError(f"span_length deve essere >= 1, ricevuto {span_length}")


def make_mask(n_positions: int, start_prob: float, span_length: int, rng: np.random.Generator) -> MaskPlan:
    """Ogni posizione apre indipendentemente uno span con probabilità `start_prob`."""
    _validate_mask_params(start_prob, span_length)
    starts = rng.random(n_positions) < start_prob
    return MaskPlan(_spans_from_starts(starts, span_length), starts, span_length, start_prob)


def make_batch_mask(
    batch: int, n_positions: int, start_prob: float, span_length: int, rng: np.random.Generator
) -> MaskPlan:
    """Un piano per sequenza, impilati in una maschera B×T'."""
    _validate_mask_params(start_prob, span_length)
    starts = rng.random((batch, n_positions)) < start_prob
    return MaskPlan(_spans_from_starts(starts, span_length), starts, span_length, start_prob)


def apply_mask(
    features: np.ndarray, plan: MaskPlan, rng: np.random.Generator, noise_std: float = 0.1
) -> np.ndarray:
    """
    Sostituisce con rumore N(0, noise_std²) i frame grezzi coperti dalla maschera.

    Ogni posizione impilata copre 4 frame; i frame non mascherati restano identici.
    Un piano 1-D (da `make_mask`) vale per tutte le sequenze del batch.
    """
    features = np.asarray(features, dtype=np.float64)
    mask = plan.mask
    if mask.ndim == 1:
        mask = np.broadcast_to(mask, (features.shape[0], mask.shape[0]))
    if mask.shape[0] != features.shape[0] or mask.shape[-1] * STACK_FACTOR > features.shape[1]:
        raise ShapeError(f"apply_mask: maschera {plan.mask.shape} non compatibile con feature {features.shape}")
    frames = np.zeros(features.shape[:2], dtype=bool)
    frames[:, : mask.shape[-1] * STACK_FACTOR] = np.repeat(mask, STACK_FACTOR, axis=-1)
    masked = features.copy()
    count = int(frames.sum())
    if count:
        masked[frames] = rng.normal(0.0, noise_std, size=(count, features.shape[-1]))
    return masked


def pretrain_loss(logits: Tensor, targets: np.ndarray, plan: MaskPlan) -> Tensor:
    """Cross-entropy media sulle sole posizioni mascherate."""
    targets = np.asarray(targets)
    if logits.shape[1] != targets.shape[-1]:
        raise AlignmentError(logits.shape[1], targets.shape[-1])
    mask = plan.mask if plan.mask.ndim == 2 else plan.mask[None, :]
    targets = targets if targets.ndim == 2 else targets[None, :]
    if not mask.any():
        raise NoLossPositionsError("la maschera non seleziona nessuna posizione")
    return tc.masked_cross_entropy(logits, targets, mask)


def draw_training_mask(
    batch: int, n_positions: int, settings: MaskSettings, rng: np.random.Generator
) -> MaskPlan:
    """Ripesca la maschera finché copre almeno una posizione, poi forza un solo span."""
    for _ in range(MAX_MASK_DRAWS):
        plan = make_batch_mask(batch, n_positions, settings.start_prob, settings.span_length, rng)
        if plan.masked_count:
            return plan
    plan.force_span(int(rng.integers(batch)), int(rng.integers(n_positions)))
    logger.debug(f"[BESTRQ] Maschera vuota dopo {MAX_MASK_DRAWS} tentativi: span forzato")
    return plan


def pretrain_step(
    model,
    batch: np.ndarray,
    proj: RandomProjection,
    book: Codebook,
    optimizer,
    settings: Optional[MaskSettings] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """
    Un passo di pre-training: target dai frame puliti, ingresso mascherato, loss e aggiornamento.

    Args:
        model: encoder con `forward(Tensor) -> Tensor` di logit B×T'×V e `zero_grad()`
        batch: feature B×T×d_feat
        optimizer: ottimizzatore sui soli parametri del modello

    Returns:
        valore della loss
    """
    settings = settings or MaskSettings()
    rng = rng if rng is not None else np.random.default_rng(0)
    stacked = stack_frames(batch)
    targets = quantize_batch(stacked, proj, book)
    plan = draw_training_mask(stacked.shape[0], stacked.shape[1], settings, rng)
    masked = apply_mask(batch, plan, rng, settings.noise_std)

    model.zero_grad()
    logits = model.forward(Tensor(masked))
    if logits.shape[1] != targets.shape[1]:
        raise AlignmentError(logits.shape[1], targets.shape[1])
    loss = pretrain_loss(logits, targets, plan)
    tc.backward(loss)
    optimizer.step()
    return loss.item()
