"""
Adam con clipping sulla norma globale e warmup lineare del learning rate.
"""
import logging
from typing import Dict, List, Mapping, Tuple

import numpy as np

from .errors import ContractError, NumericOverflowError
from .tensorcore import Tensor

logger = logging.getLogger(__name__)


class Adam:
    """
    Ottimizzatore sui parametri nominati di un modello.

    Lo stato (momenti e contatore dei passi) è esportabile per i checkpoint.
    """

    def __init__(
        self,
        named_params: List[Tuple[str, Tensor]],
        lr: float = 1e-3,
        betas: Tuple[float, float] = (0.9, 0.98),
        eps: float = 1e-8,
        clip_norm: float = 5.0,
        warmup_steps: int = 0,
    ):
        if lr <= 0:
            raise ContractError(f"learning rate non positivo: {lr}")
        self.params = list(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.warmup_steps = warmup_steps
        self.steps = 0
        self.first = {name: np.zeros_like(p.data) for name, p in self.params}
        self.second = {name: np.zeros_like(p.data) for name, p in self.params}

    def current_lr(self) -> float:
        if self.warmup_steps <= 0:
            return self.lr
        return self.lr * min(1.0, (self.steps + 1) / self.warmup_steps)

    def global_norm(self) -> float:
        total = sum(float((p.grad_value ** 2).sum()) for _, p in self.params)
        return float(np.sqrt(total))

    def step(self) -> float:
        """Applica un aggiornamento; restituisce la norma del gradiente prima del clipping."""
        norm = self.global_norm()
        if not np.isfinite(norm):
            raise NumericOverflowError(f"norma del gradiente non finita al passo {self.steps}")
        factor = self.clip_norm / norm if self.clip_norm and norm > self.clip_norm else 1.0
        lr = self.current_lr()
        self.steps += 1
        correction1 = 1.0 - self.beta1 ** self.steps
        correction2 = 1.0 - self.beta2 ** self.steps
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad * factor
            m = self.first[name]
            v = self.second[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.update_(-lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps))
        return norm

    def state_arrays(self) -> Dict[str, np.ndarray]:
        state = {}
        for name, _ in self.params:
            state[f"adam.m.{name}"] = self.first[name]
            state[f"adam.v.{name}"] = self.second[name]
        return state

    def load_state(self, arrays: Mapping[str, np.ndarray], steps: int) -> None:
        for name, p in self.params:
            for prefix, store in (("adam.m.", self.first), ("adam.v.", self.second)):
                key = prefix + name
                if key not in arrays:
                    raise ContractError(f"stato dell'ottimizzatore incompleto: manca '{key}'")
                store[name] = np.array(arrays[key], dtype=p.data.dtype).reshape(p.shape)
        self.steps = steps
        logger.debug(f"[OPTIM] Stato Adam ripristinato al passo {steps}")
