"""
Sorgenti di feature: generatore sintetico deterministico e file container.

Le sequenze vengono raggruppate per lunghezza in batch con un tetto di frame
(analogo desk-scale del dynamic batching): dentro un batch tutte le sequenze sono
ritagliate alla più corta, quindi un batch B×T rispetta B·T ≤ frame_cap.
"""
import logging
from pathlib import Path
from typing import Iterator, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import ConfigError, FeatureSourceError
from .layers import make_rng
from .patterns import parse_int_range, parse_synthetic_items
from .tensorcore import read_container, write_container

logger = logging.getLogger(__name__)

MIN_FRAMES = 4
COMPONENT_STD = 0.3
MEAN_SEGMENT = 16


class SyntheticSpec(BaseModel):
    """Generatore sintetico: n sequenze di lunghezza uniforme in [min_len, max_len]."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    n_sequences: int = Field(64, ge=1)
    min_len: int = Field(400, ge=MIN_FRAMES)
    max_len: int = Field(800, ge=MIN_FRAMES)
    d_feat: int = Field(80, ge=1)
    components: int = Field(32, ge=1)
    seed: int = 0

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "SyntheticSpec":
        """
        Interpreta `n=64,len=400..800,d=80` (voci opzionali `seed`, `components`).

        Raises:
            ConfigError: voce sconosciuta, valore non numerico o intervallo degenere
        """
        values = {"seed": seed}
        try:
            for key, raw in parse_synthetic_items(text):
                if key == "len":
                    values["min_len"], values["max_len"] = parse_int_range(raw)
                else:
                    field = {"n": "n_sequences", "d": "d_feat"}.get(key, key)
                    values[field] = int(raw)
        except ValueError as e:
            raise ConfigError(f"specifica sintetica non valida '{text}': {e}") from None
        try:
            spec = cls(**values)
        except ValidationError as e:
            raise ConfigError(f"specifica sintetica non valida '{text}': {e.errors()[0]['msg']}") from None
        return spec.check()

    def check(self) -> "SyntheticSpec":
        if self.max_len < self.min_len:
            raise ConfigError(f"intervallo di lunghezze degenere: {self.min_len}..{self.max_len}")
        return self

    def describe(self) -> str:
        return f"n={self.n_sequences},len={self.min_len}..{self.max_len},d={self.d_feat}"


class GaussianMixtureGenerator:
    """
    Miscela gaussiana stazionaria con componente "appiccicosa": a ogni frame la
    componente cambia con probabilità 1/MEAN_SEGMENT, così gruppi di frame vicini
    condividono la stessa media e i pseudo-target non collassano su un solo indice.
    """

    def __init__(self, spec: SyntheticSpec):
        self.spec = spec.check()
        self.means = make_rng(spec.seed, "synthetic", "means").standard_normal((spec.components, spec.d_feat))

    def sequence(self, index: int) -> np.ndarray:
        spec = self.spec
        rng = make_rng(spec.seed, "synthetic", "sequence", index)
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        switches = rng.random(length) < 1.0 / MEAN_SEGMENT
        switches[0] = True
        draws = rng.integers(spec.components, size=length)
        # ogni frame eredita la componente dell'ultimo cambio
        last_switch = np.maximum.accumulate(np.where(switches, np.arange(length), 0))
        components = draws[last_switch]
        noise = rng.standard_normal((length, spec.d_feat)) * COMPONENT_STD
        return self.means[components] + noise

    def sequences(self) -> List[np.ndarray]:
        return [self.sequence(i) for i in range(self.spec.n_sequences)]


def bucket_batches(sequences: Sequence[np.ndarray], frame_cap: int) -> List[np.ndarray]:
    """
    Raggruppa per lunghezza crescente; ogni batch B×T ha B·T ≤ frame_cap.

    Una sequenza più lunga del tetto viene ritagliata a frame_cap frame.
    """
    if frame_cap < MIN_FRAMES:
        raise ConfigError(f"frame_cap deve essere almeno {MIN_FRAMES}, ricevuto {frame_cap}")
    order = sorted(range(len(sequences)), key=lambda i: (sequences[i].shape[0], i))
    batches: List[np.ndarray] = []
    current: List[np.ndarray] = []
    for idx in order:
        seq = sequences[idx]
        shortest = current[0].shape[0] if current else min(seq.shape[0], frame_cap)
        if current and (len(current) + 1) * shortest > frame_cap:
            batches.append(_stack_cropped(current))
            current = []
            shortest = min(seq.shape[0], frame_cap)
        current.append(seq[:shortest] if not current else seq)
    if current:
        batches.append(_stack_cropped(current))
    return batches


def _stack_cropped(group: List[np.ndarray]) -> np.ndarray:
    steps = min(s.shape[0] for s in group)
    return np.stack([s[:steps] for s in group])


class FeatureSource:
    """Sorgente di sequenze T×d_feat: sintetica oppure letta da un container."""

    def __init__(self, sequences: List[np.ndarray], description: str):
        if not sequences:
            raise ConfigError(f"nessuna sequenza disponibile in {description}")
        widths = {s.shape[1] for s in sequences}
        if len(widths) != 1:
            raise FeatureSourceError(description, f"larghezze di feature diverse: {sorted(widths)}")
        self._sequences = sequences
        self.description = description

    @classmethod
    def synthetic(cls, spec: SyntheticSpec) -> "FeatureSource":
        generator = GaussianMixtureGenerator(spec)
        logger.info(f"[FEATURES] Generazione sintetica: {spec.describe()} seed={spec.seed}")
        return cls(generator.sequences(), f"synthetic:{spec.describe()}")

    @classmethod
    def from_container(cls, path) -> "FeatureSource":
        """Ogni record del container è una sequenza T×d (o un blocco B×T×d)."""
        tensors, _ = read_container(path)
        sequences: List[np.ndarray] = []
        for name, array in tensors.items():
            if array.ndim == 2:
                sequences.append(array)
            elif array.ndim == 3:
                sequences.extend(list(array))
            else:
                raise FeatureSourceError(path, f"record '{name}' con {array.ndim} dimensioni (attese 2 o 3)")
        too_short = [s.shape[0] for s in sequences if s.shape[0] < MIN_FRAMES]
        if too_short:
            raise FeatureSourceError(path, f"{len(too_short)} sequenze con meno di {MIN_FRAMES} frame")
        logger.info(f"[FEATURES] Caricate {len(sequences)} sequenze da {path}")
        return cls(sequences, str(path))

    @property
    def d_feat(self) -> int:
        return self._sequences[0].shape[1]

    def __len__(self) -> int:
        return len(self._sequences)

    def sequences(self) -> List[np.ndarray]:
        return list(self._sequences)

    def batches(self, frame_cap: int) -> List[np.ndarray]:
        return bucket_batches(self._sequences, frame_cap)


def save_features(path, sequences: Sequence[np.ndarray], meta: Optional[dict] = None) -> None:
    write_container(path, {f"seq{idx:05d}": seq for idx, seq in enumerate(sequences)}, meta=meta)


def synth_features(spec: SyntheticSpec, frame_cap: Optional[int] = None) -> Iterator[np.ndarray]:
    """
    Stream deterministico di batch B×T×d_feat dalla miscela sintetica.

    Senza `frame_cap` ogni sequenza è un batch a sé (B=1).
    """
    source = FeatureSource.synthetic(spec)
    if frame_cap is None:
        for seq in source.sequences():
            yield seq[None]
        return
    yield from source.batches(frame_cap)


def load_features(path) -> FeatureSource:
    if not Path(path).exists():
        raise FeatureSourceError(path, "file di feature inesistente")
    return FeatureSource.from_container(path)
