"""
Checkpoint di pre-training nel formato container del motore tensoriale.

Intestazione JSON: config effettiva, numero di passi, stato del generatore e
checksum di proiezione e codebook. Record: parametri del modello (`model.*`),
momenti di Adam (`adam.*`), proiezione e codebook congelati (`frozen.*`).
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .bestrq import Codebook, RandomProjection
from .errors import FeatureSourceError
from .tensorcore import read_container, write_container

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    step: int
    config: Dict[str, str]
    model: Dict[str, np.ndarray]
    optimizer: Dict[str, np.ndarray]
    projection: RandomProjection
    codebook: Codebook
    rng: Dict[str, int] = field(default_factory=dict)


def save_checkpoint(
    path,
    *,
    step: int,
    config: Dict[str, str],
    model,
    optimizer,
    projection: RandomProjection,
    codebook: Codebook,
    rng: Optional[Dict[str, int]] = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = {f"model.{name}": array for name, array in model.state_arrays().items()}
    records.update(optimizer.state_arrays())
    records["frozen.projection"] = projection.matrix.data
    records["frozen.codebook"] = codebook.entries.data
    meta = {
        "version": FORMAT_VERSION,
        "step": step,
        "config": config,
        "rng": rng or {},
        "projection_sha256": projection.checksum(),
        "codebook_sha256": codebook.checksum(),
    }
    write_container(path, records, meta=meta)
    logger.info(f"[CHECKPOINT] ✅ Salvato {path} al passo {step}")
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    tensors, meta = read_container(path)
    if meta.get("version") != FORMAT_VERSION:
        raise FeatureSourceError(path, f"versione di checkpoint non supportata: {meta.get('version')}")
    try:
        projection = RandomProjection(tensors.pop("frozen.projection"))
        codebook = Codebook(tensors.pop("frozen.codebook"))
    except KeyError as e:
        raise FeatureSourceError(path, f"record mancante: {e}") from None
    if projection.checksum() != meta.get("projection_sha256") or codebook.checksum() != meta.get("codebook_sha256"):
        raise FeatureSourceError(path, "checksum di proiezione o codebook non corrispondente")
    model = {name[len("model."):]: arr for name, arr in tensors.items() if name.startswith("model.")}
    optimizer = {name: arr for name, arr in tensors.items() if name.startswith("adam.")}
    logger.info(f"[CHECKPOINT] Caricato {path} (passo {meta['step']})")
    return Checkpoint(
        step=int(meta["step"]),
        config=dict(meta.get("config", {})),
        model=model,
        optimizer=optimizer,
        projection=projection,
        codebook=codebook,
        rng=dict(meta.get("rng", {})),
    )
