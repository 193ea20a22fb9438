"""
Eccezioni del progetto.

Tutte derivano da ValueError (come gli errori di configurazione del bot originale),
così chi chiama può intercettare sia la radice che il caso specifico.
"""
from pathlib import Path
from typing import Optional


class BrqError(ValueError):
    """Radice di tutti gli errori sollevati dal pacchetto."""


class ShapeError(BrqError):
    """Dimensioni dei tensori incompatibili con il contratto della primitiva."""


class NumericOverflowError(BrqError):
    """Un'operazione ha prodotto valori non finiti (inf/NaN)."""


class ContractError(BrqError):
    """Precondizione d'uso violata (loss non scalare, metering annidato, campioni vuoti...)."""


class ConfigError(BrqError):
    """Chiave o valore di configurazione non valido."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"riga {line}: {message}"
        super().__init__(message)


class TooShortInputError(BrqError):
    """Sequenza più corta del minimo richiesto (4 frame)."""


class DegenerateProjectionError(BrqError):
    """La proiezione casuale ha dato un vettore nullo: impossibile normalizzarlo."""


class NoLossPositionsError(BrqError):
    """La maschera non copre nessuna posizione: la loss non è definita."""


class AlignmentError(BrqError):
    """Asse temporale dei logit non allineato con quello dei target."""

    def __init__(self, logits_len: int, targets_len: int):
        self.logits_len = logits_len
        self.targets_len = targets_len
        super().__init__(
            f"asse temporale disallineato: logits={logits_len} passi, target={targets_len} passi"
        )


class InfeasibleBudgetError(BrqError):
    """Budget di parametri non raggiungibile con la manopola di larghezza disponibile."""

    def __init__(self, message: str, closest: Optional[dict] = None):
        self.closest = closest or {}
        if self.closest:
            detail = ", ".join(f"{k}={v}" for k, v in self.closest.items())
            message = f"{message} (più vicino ottenibile: {detail})"
        super().__init__(message)


class FeatureSourceError(BrqError):
    """File di feature o container non leggibile/scrivibile."""

    def __init__(self, path, message: str):
        self.path = Path(path)
        super().__init__(f"{self.path}: {message}")


class OutputWriteError(BrqError):
    """File di output (CSV, log, config) non scrivibile."""

    def __init__(self, path, message: str):
        self.path = Path(path)
        super().__init__(f"{self.path}: {message}")


class VerificationError(BrqError):
    """Una proprietà verificata da `verify` non è rispettata."""
