"""
Ciclo di pre-training desk-scale con log della loss, checkpoint e ripresa.

Il generatore di ogni passo è derivato da (seed, passo) e l'ordine dei batch di
ogni epoca da (seed, epoca): riprendere da un checkpoint al passo k produce gli
stessi valori di una run ininterrotta.
"""
import csv
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .bestrq import Codebook, MaskSettings, RandomProjection, STACK_FACTOR, pretrain_step
from .checkpoint import load_checkpoint, save_checkpoint
from .encoder import Encoder, EncoderConfig
from .errors import ContractError, NumericOverflowError, OutputWriteError
from .features import FeatureSource
from .layers import make_rng
from .optim import Adam
from .structured_logging import log_with_context

logger = logging.getLogger(__name__)


class TrainSettings(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    steps: int = Field(1000, ge=1)
    lr: float = Field(1e-3, gt=0.0)
    warmup_steps: int = Field(100, ge=0)
    clip_norm: float = Field(5.0, ge=0.0)
    frame_cap: int = Field(4000, ge=4)
    log_every: int = Field(50, ge=1)
    checkpoint_every: int = Field(0, ge=0)
    seed: int = 0


@dataclass
class TrainingResult:
    losses: List[float]
    first_step: int
    checkpoint_path: Optional[Path]
    loss_log_path: Optional[Path]
    elapsed_s: float = 0.0

    def mean_loss(self, start: int, stop: int) -> float:
        """Media della loss sui passi [start, stop) (numerazione assoluta)."""
        window = self.losses[start - self.first_step: stop - self.first_step]
        if not window:
            raise ContractError(f"nessun passo nell'intervallo [{start}, {stop})")
        return float(np.mean(window))


class BatchSchedule:
    """Ordine deterministico dei batch: permutazione per epoca derivata dal seed."""

    def __init__(self, batches: List[np.ndarray], seed: int):
        if not batches:
            raise ContractError("nessun batch disponibile per il pre-training")
        self.batches = batches
        self.seed = seed
        self._epoch = -1
        self._order: Optional[np.ndarray] = None

    def batch_for_step(self, step: int) -> np.ndarray:
        epoch, position = divmod(step, len(self.batches))
        if epoch != self._epoch:
            self._order = make_rng(self.seed, "epoch", epoch).permutation(len(self.batches))
            self._epoch = epoch
        return self.batches[self._order[position]]


class PretrainRunner:
    """Tiene insieme modello, quantizzatore congelato, ottimizzatore e schedule dei batch."""

    def __init__(
        self,
        encoder_config: EncoderConfig,
        mask: MaskSettings,
        settings: TrainSettings,
        source: FeatureSource,
    ):
        if source.d_feat != encoder_config.d_feat:
            raise ContractError(
                f"feature di larghezza {source.d_feat}, l'encoder ne attende {encoder_config.d_feat}"
            )
        self.encoder_config = encoder_config
        self.mask = mask
        self.settings = settings
        self.model = Encoder(encoder_config)
        self.projection = RandomProjection.create(STACK_FACTOR * source.d_feat, mask.d_code, settings.seed)
        self.codebook = Codebook.create(encoder_config.vocab, mask.d_code, settings.seed)
        self.optimizer = Adam(
            self.model.named_parameters(),
            lr=settings.lr,
            clip_norm=settings.clip_norm,
            warmup_steps=settings.warmup_steps,
        )
        self.schedule = BatchSchedule(source.batches(settings.frame_cap), settings.seed)
        self.step = 0

    def restore(self, path) -> None:
        checkpoint = load_checkpoint(path)
        self.model.load_arrays(checkpoint.model)
        self.optimizer.load_state(checkpoint.optimizer, checkpoint.step)
        if checkpoint.projection.checksum() != self.projection.checksum():
            logger.warning("[PRETRAIN] Proiezione del checkpoint diversa da quella derivata dal seed: uso quella salvata")
        self.projection = checkpoint.projection
        self.codebook = checkpoint.codebook
        self.step = checkpoint.step
        logger.info(f"[PRETRAIN] Ripresa dal passo {self.step}")

    def run_step(self) -> float:
        batch = self.schedule.batch_for_step(self.step)
        rng = make_rng(self.settings.seed, "step", self.step)
        loss = pretrain_step(self.model, batch, self.projection, self.codebook, self.optimizer, self.mask, rng)
        if not math.isfinite(loss):
            raise NumericOverflowError(f"loss non finita al passo {self.step}")
        self.step += 1
        return loss

    def save(self, path, config_echo: Dict[str, str]) -> Path:
        return save_checkpoint(
            path,
            step=self.step,
            config=config_echo,
            model=self.model,
            optimizer=self.optimizer,
            projection=self.projection,
            codebook=self.codebook,
            rng={"seed": self.settings.seed, "next_step": self.step},
        )


def write_loss_log(path, first_step: int, losses: List[float], append: bool = False) -> Path:
    """Log `step,loss` in CSV; in ripresa le righe vengono accodate."""
    path = Path(path)
    mode = "a" if append and path.exists() else "w"
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open(mode, newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            if mode == "w":
                writer.writerow(["step", "loss"])
            for offset, loss in enumerate(losses):
                writer.writerow([first_step + offset, format(loss, ".17g")])
    except OSError as e:
        raise OutputWriteError(path, f"scrittura del log della loss fallita: {e}") from None
    return path


def pretrain(
    runner: PretrainRunner,
    out_dir=None,
    config_echo: Optional[Dict[str, str]] = None,
    resume: Optional[str] = None,
) -> TrainingResult:
    """
    Esegue i passi mancanti fino a `settings.steps`.

    Raises:
        NumericOverflowError: loss NaN/inf, con il passo che l'ha prodotta
    """
    if resume:
        runner.restore(resume)
    settings = runner.settings
    first_step = runner.step
    losses: List[float] = []
    out = Path(out_dir) if out_dir else None
    started = time.perf_counter()

    while runner.step < settings.steps:
        step = runner.step
        try:
            loss = runner.run_step()
        except NumericOverflowError as e:
            logger.error(f"[PRETRAIN] ❌ Interrotto al passo {step}: {e}")
            if out is not None:
                write_loss_log(out / "loss.csv", first_step, losses, append=bool(resume))
            raise NumericOverflowError(f"pre-training interrotto al passo {step}: {e}") from e
        losses.append(loss)
        if (step + 1) % settings.log_every == 0 or step == first_step:
            window = losses[-settings.log_every:]
            log_with_context("info", f"[PRETRAIN] passo {step + 1}/{settings.steps}",
                             loss=f"{loss:.4f}", mean=f"{np.mean(window):.4f}")
        if out is not None and settings.checkpoint_every and (step + 1) % settings.checkpoint_every == 0:
            runner.save(out / f"checkpoint_{step + 1:06d}.brqc", config_echo or {})

    checkpoint_path = loss_path = None
    if out is not None:
        loss_path = write_loss_log(out / "loss.csv", first_step, losses, append=bool(resume))
        checkpoint_path = runner.save(out / "checkpoint_final.brqc", config_echo or {})
    elapsed = time.perf_counter() - started
    logger.info(f"[PRETRAIN] ✅ {len(losses)} passi in {elapsed:.1f}s")
    return TrainingResult(
        losses=losses,
        first_step=first_step,
        checkpoint_path=checkpoint_path,
        loss_log_path=loss_path,
        elapsed_s=elapsed,
    )
