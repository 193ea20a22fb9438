"""
Contenitori di parametri costruiti sopra il motore tensoriale.

Ogni componente riceve il proprio generatore numpy derivato da (seed, chiavi),
così due modelli con lo stesso seed hanno gli stessi pesi indipendentemente
dall'ordine di costruzione.
"""
import logging
import threading
import zlib
from contextlib import contextmanager
from typing import Dict, Iterator, List, Mapping, Tuple, Union

import numpy as np

from . import tensorcore as tc
from .errors import ShapeError
from .tensorcore import Tensor

logger = logging.getLogger(__name__)

_state = threading.local()


def _key_to_int(key: Union[int, str]) -> int:
    if isinstance(key, int):
        return key
    return zlib.crc32(key.encode("utf-8"))


def make_rng(seed: int, *keys: Union[int, str]) -> np.random.Generator:
    """Generatore deterministico per il componente identificato da `keys`."""
    return np.random.default_rng([seed] + [_key_to_int(k) for k in keys])


@contextmanager
def shapes_only() -> Iterator[None]:
    """
    Costruzione "a vuoto": i parametri sono viste di zeri senza memoria reale.

    Serve a contare i parametri di configurazioni grandi senza inizializzarle.
    """
    previous = getattr(_state, "shapes_only", False)
    _state.shapes_only = True
    try:
        yield
    finally:
        _state.shapes_only = previous


def _shapes_only() -> bool:
    return getattr(_state, "shapes_only", False)


def init_uniform(rng: np.random.Generator, shape: Tuple[int, ...], bound: float) -> np.ndarray:
    if _shapes_only():
        return np.broadcast_to(np.zeros((), dtype=tc.default_dtype()), shape)
    return rng.uniform(-bound, bound, size=shape)


def init_constant(shape: Tuple[int, ...], value: float) -> np.ndarray:
    if _shapes_only():
        return np.broadcast_to(np.full((), value, dtype=tc.default_dtype()), shape)
    return np.full(shape, value)


class Module:
    """
    Base dei blocchi con parametri.

    `named_parameters()` visita gli attributi in ordine di definizione: foglie
    addestrabili, sotto-moduli e liste di sotto-moduli. I tensori congelati
    (requires_grad=False) non sono parametri.
    """

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Tensor]]:
        found: List[Tuple[str, Tensor]] = []
        for attr, value in vars(self).items():
            if attr.startswith("_"):
                continue
            name = f"{prefix}{attr}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    found.append((name, value))
            elif isinstance(value, Module):
                found.extend(value.named_parameters(prefix=f"{name}."))
            elif isinstance(value, (list, tuple)):
                for idx, item in enumerate(value):
                    if isinstance(item, Module):
                        found.extend(item.named_parameters(prefix=f"{name}.{idx}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        found.append((f"{name}.{idx}", item))
        return found

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        """Copia i valori nei parametri esistenti; nomi o shape diversi sono un errore."""
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(arrays))
        if missing:
            raise ShapeError(f"parametri mancanti nel checkpoint: {', '.join(missing[:5])}")
        for name, p in params.items():
            value = np.asarray(arrays[name])
            if value.shape != p.shape:
                raise ShapeError(f"parametro '{name}': shape {value.shape}, attesa {p.shape}")
            p.data[...] = value

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    """y = x W + b, con W di shape d_in × d_out."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / np.sqrt(d_in)
        self.weight = tc.parameter(init_uniform(rng, (d_in, d_out), bound))
        self.bias = tc.parameter(init_uniform(rng, (d_out,), bound)) if bias else None
        self.d_in = d_in
        self.d_out = d_out

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"Linear: ingresso con {x.shape[-1]} canali, attesi {self.d_in}")
        out = tc.matmul(x, self.weight)
        return tc.add(out, self.bias) if self.bias is not None else out

    def zero_(self) -> None:
        self.weight.update_(-self.weight.data)
        if self.bias is not None:
            self.bias.update_(-self.bias.data)


class LayerNorm(Module):
    def __init__(self, d: int):
        self.scale = tc.parameter(init_constant((d,), 1.0))
        self.shift = tc.parameter(init_constant((d,), 0.0))

    def forward(self, x: Tensor) -> Tensor:
        return tc.layer_norm(x, self.scale, self.shift)


class MLP(Module):
    """Un solo strato nascosto con GELU."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator):
        self.hidden = Linear(d_in, d_hidden, rng)
        self.out = Linear(d_hidden, d_out, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.out(tc.gelu(self.hidden(x)))


class Conv1d(Module):
    """Convoluzione lungo il tempo su B×T×C; `groups=channels` per la depthwise."""

    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        groups: int = 1,
    ):
        c_group = c_in // groups
        bound = 1.0 / np.sqrt(c_group * kernel)
        self.weight = tc.parameter(init_uniform(rng, (c_out, c_group, kernel), bound))
        self.bias = tc.parameter(init_uniform(rng, (c_out,), bound))
        self.kernel = kernel
        self.stride = stride
        self.groups = groups

    def forward(self, x: Tensor) -> Tensor:
        return tc.conv1d(x, self.weight, self.bias, stride=self.stride, groups=self.groups)


def sinusoidal_table(steps: int, width: int) -> np.ndarray:
    """Tabella sinusoidale assoluta steps × width (seno sulle colonne pari, coseno sulle dispari)."""
    positions = np.arange(steps)[:, None]
    freqs = np.exp(-np.log(10000.0) * (np.arange(0, width, 2) / width))
    table = np.zeros((steps, width))
    table[:, 0::2] = np.sin(positions * freqs)
    table[:, 1::2] = np.cos(positions * freqs[: width // 2])
    return table


def positional_features(batch: int, steps: int, width: int) -> Tensor:
    """Feature posizionali B×T×width come tensore congelato (lookup su tabella fissa)."""
    table = Tensor(sinusoidal_table(steps, width))
    index = np.broadcast_to(np.arange(steps), (batch, steps))
    return tc.embedding_lookup(table, index)
