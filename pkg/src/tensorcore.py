"""
Motore tensoriale minimale con differenziazione reverse-mode e misura delle allocazioni.

Ogni primitiva restituisce un nuovo Tensor, registra il nodo nel grafo quando almeno
un input richiede il gradiente e addebita al meter del thread corrente i byte di
payload e i MAC (multiply-accumulate) eseguiti. Il grafo viene ricostruito a ogni
forward (define-by-run); `backward` lo linearizza in un Tape e lo ripercorre al contrario.
"""
import json
import logging
import threading
import weakref
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, FeatureSourceError, NumericOverflowError, ShapeError

logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-5
CONTAINER_MAGIC = b"BRQC 1\n"
_GELU_C = float(np.sqrt(2.0 / np.pi))

_DEFAULT_DTYPE = np.float64

# Stato per-thread: meter attivo e modalità di registrazione del grafo
_local = threading.local()


def set_default_dtype(bits: int) -> None:
    """Imposta la precisione di default (64 o 32 bit) per i tensori creati da qui in poi."""
    global _DEFAULT_DTYPE
    if bits == 64:
        _DEFAULT_DTYPE = np.float64
    elif bits == 32:
        _DEFAULT_DTYPE = np.float32
    else:
        raise ContractError(f"precisione non supportata: {bits} (ammessi 64 o 32)")
    logger.info(f"[TENSOR] Precisione di default: float{bits}")


def default_dtype():
    return _DEFAULT_DTYPE


# ---------------------------------------------------------------------------
# Meter delle allocazioni
# ---------------------------------------------------------------------------

@dataclass
class MeterReading:
    """Esito di una misura: risultato della computazione, picco, livello d'ingresso e MAC."""
    result: Any
    peak_bytes: int
    entry_bytes: int
    macs: int

    @property
    def activation_bytes(self) -> int:
        return self.peak_bytes - self.entry_bytes


class AllocationMeter:
    """
    Contabilità dei byte di payload dei tensori vivi.

    Conta solo i dati dei tensori (e lo scratch dichiarato dai kernel fusi),
    non l'overhead di bookkeeping Python.
    """

    def __init__(self):
        self.live_bytes = 0
        self.peak_bytes = 0
        self.macs = 0
        self._measuring = False
        self._lock = threading.Lock()

    def allocate(self, nbytes: int) -> None:
        with self._lock:
            self.live_bytes += nbytes
            if self.live_bytes > self.peak_bytes:
                self.peak_bytes = self.live_bytes

    def release(self, nbytes: int) -> None:
        with self._lock:
            self.live_bytes -= nbytes

    def add_macs(self, count: int) -> None:
        self.macs += int(count)

    def reset(self) -> None:
        self.peak_bytes = self.live_bytes
        self.macs = 0

    def measure(self, computation: Callable[[], Any]) -> MeterReading:
        """
        Esegue `computation` in una finestra di misura dedicata.

        Il picco della finestra parte dal livello vivo all'ingresso; all'uscita il
        picco globale torna a essere il massimo dall'ultimo reset esterno.
        """
        if self._measuring:
            raise ContractError("metering annidato sullo stesso meter non consentito")
        saved_peak = self.peak_bytes
        saved_macs = self.macs
        entry = self.live_bytes
        self._measuring = True
        self.peak_bytes = entry
        self.macs = 0
        try:
            result = computation()
            window_peak = self.peak_bytes
            window_macs = self.macs
        finally:
            self._measuring = False
            self.peak_bytes = max(saved_peak, self.peak_bytes, self.live_bytes)
            self.macs = saved_macs + self.macs
        return MeterReading(result=result, peak_bytes=window_peak, entry_bytes=entry, macs=window_macs)


def current_meter() -> AllocationMeter:
    meter = getattr(_local, "meter", None)
    if meter is None:
        meter = AllocationMeter()
        _local.meter = meter
    return meter


def with_metering(computation: Callable[[], Any], meter: Optional[AllocationMeter] = None) -> Tuple[Any, int]:
    """Restituisce (risultato, picco di byte di payload) della computazione."""
    reading = (meter or current_meter()).measure(computation)
    return reading.result, reading.peak_bytes


@contextmanager
def track_scratch(*arrays: np.ndarray) -> Iterator[None]:
    """Addebita al meter i buffer temporanei di un kernel per la durata del blocco."""
    meter = current_meter()
    nbytes = sum(a.nbytes for a in arrays)
    meter.allocate(nbytes)
    try:
        yield
    finally:
        meter.release(nbytes)


# ---------------------------------------------------------------------------
# Modalità gradiente
# ---------------------------------------------------------------------------

def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disabilita la registrazione del grafo nel thread corrente."""
    previous = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------

class Tensor:
    """Array denso n-dimensionale che partecipa al grafo di calcolo."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op",
                 "_finalizer", "__weakref__")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype=None,
        _parents: Tuple["Tensor", ...] = (),
        _backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None,
        _op: Optional[str] = None,
    ):
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        if arr.size == 0:
            raise ShapeError(f"tensore vuoto non ammesso (shape={arr.shape})")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self._op = _op
        meter = current_meter()
        meter.allocate(arr.nbytes)
        self._finalizer = weakref.finalize(self, meter.release, arr.nbytes)

    # -- proprietà --------------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def nbytes(self) -> int:
        return self.data.nbytes

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    @property
    def grad_value(self) -> np.ndarray:
        """Gradiente accumulato, zeri se il nodo non è mai stato raggiunto."""
        return self.grad if self.grad is not None else np.zeros_like(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() richiede un tensore scalare, shape={self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def update_(self, delta: np.ndarray) -> None:
        """Aggiornamento in place, riservato alle foglie-parametro (usato dall'ottimizzatore)."""
        if not self.is_leaf:
            raise ContractError("update_ consentito solo su foglie del grafo")
        np.add(self.data, delta, out=self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # -- operatori --------------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise ContractError("divisione supportata solo per scalari")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data, name: Optional[str] = None) -> Tensor:
    """Foglia addestrabile."""
    return Tensor(data, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# Costruzione dei nodi
# ---------------------------------------------------------------------------

def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NumericOverflowError(f"valori non finiti in uscita da '{op}'")


def custom_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
    op: str,
    macs: int = 0,
) -> Tensor:
    """
    Registra un nodo con backward proprio. È il punto d'ingresso per i kernel fusi
    definiti fuori dal core (es. la selective scan).

    Args:
        data: risultato già calcolato
        parents: input del nodo, nell'ordine in cui `backward` restituisce i gradienti
        backward: funzione grad_out -> gradienti per ciascun parent (None se assente)
        op: nome dell'operazione, usato nei messaggi d'errore
        macs: multiply-accumulate da addebitare al meter
    """
    _check_finite(data, op)
    if macs:
        current_meter().add_macs(macs)
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, _op=op,
                      dtype=data.dtype)
    return Tensor(data, _op=op, dtype=data.dtype)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shape incompatibili {a.shape} e {b.shape}") from None


# ---------------------------------------------------------------------------
# Primitive
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Prodotto matriciale sulle ultime due dimensioni, con broadcasting sulle dimensioni batch."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: servono almeno 2 dimensioni, ricevute {a.shape} e {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul: dimensione interna {a.shape[-1]} != {b.shape[-2]} (shape {a.shape} @ {b.shape})"
        )
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: dimensioni batch incompatibili {a.shape} @ {b.shape}") from None

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return custom_op(out, (a, b), backward, "matmul", macs=out.size * a.shape[-1])


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")
    out = a.data + b.data
    return custom_op(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "sub")
    out = a.data - b.data
    return custom_op(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Prodotto elemento per elemento (broadcasting numpy)."""
    _broadcast_shape(a, b, "mul")
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return custom_op(out, (a, b), backward, "mul", macs=out.size)


def scale(a: Tensor, factor: float) -> Tensor:
    out = a.data * factor
    return custom_op(out, (a,), lambda g: (g * factor,), "scale", macs=out.size)


def transpose(a: Tensor) -> Tensor:
    """Scambia le ultime due dimensioni."""
    if a.ndim < 2:
        raise ShapeError(f"transpose: servono almeno 2 dimensioni, shape={a.shape}")
    out = np.ascontiguousarray(np.swapaxes(a.data, -1, -2))
    return custom_op(out, (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def softmax_lastdim(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return custom_op(y, (a,), backward, "softmax_lastdim", macs=y.size)


def layer_norm(
    x: Tensor,
    scale_param: Optional[Tensor] = None,
    shift_param: Optional[Tensor] = None,
    eps: float = LAYER_NORM_EPS,
) -> Tensor:
    """Normalizza l'ultima dimensione a media zero e varianza unitaria, poi applica scala/traslazione."""
    d = x.shape[-1]
    for p in (scale_param, shift_param):
        if p is not None and p.shape != (d,):
            raise ShapeError(f"layer_norm: parametro di shape {p.shape}, atteso ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    gamma = scale_param.data if scale_param is not None else 1.0
    out = xhat * gamma
    if shift_param is not None:
        out = out + shift_param.data

    parents = [x] + [p for p in (scale_param, shift_param) if p is not None]

    def backward(g):
        gxhat = g * gamma
        gx = inv_std * (
            gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        grads = [gx]
        reduce_axes = tuple(range(g.ndim - 1))
        if scale_param is not None:
            grads.append((g * xhat).sum(axis=reduce_axes))
        if shift_param is not None:
            grads.append(g.sum(axis=reduce_axes))
        return grads

    return custom_op(out, parents, backward, "layer_norm", macs=2 * out.size)


def concat_lastdim(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ShapeError("concat_lastdim: lista vuota")
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError(f"concat_lastdim: dimensioni iniziali diverse {lead} vs {t.shape[:-1]}")
    out = np.concatenate([t.data for t in tensors], axis=-1)
    bounds = np.cumsum([0] + [t.shape[-1] for t in tensors])

    def backward(g):
        return [g[..., bounds[i]:bounds[i + 1]] for i in range(len(tensors))]

    return custom_op(out, tuple(tensors), backward, "concat_lastdim")


def slice_lastdim(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= a.shape[-1]:
        raise ShapeError(f"slice_lastdim: intervallo [{start}, {stop}) fuori da {a.shape[-1]}")
    out = np.ascontiguousarray(a.data[..., start:stop])

    def backward(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        return (full,)

    return custom_op(out, (a,), backward, "slice_lastdim")


def mean_over_time(a: Tensor) -> Tensor:
    """Media sull'asse temporale (asse 1) di un B×T×d; restituisce B×1×d."""
    if a.ndim != 3:
        raise ShapeError(f"mean_over_time: atteso B×T×d, shape={a.shape}")
    steps = a.shape[1]
    out = a.data.mean(axis=1, keepdims=True)
    return custom_op(out, (a,), lambda g: (np.broadcast_to(g / steps, a.shape).copy(),), "mean_over_time")


def expand_time(a: Tensor, steps: int) -> Tensor:
    """Replica un B×1×d lungo il tempo fino a B×steps×d."""
    if a.ndim != 3 or a.shape[1] != 1:
        raise ShapeError(f"expand_time: atteso B×1×d, shape={a.shape}")
    out = np.repeat(a.data, steps, axis=1)
    return custom_op(out, (a,), lambda g: (g.sum(axis=1, keepdims=True),), "expand_time")


def flip_time(a: Tensor) -> Tensor:
    out = np.ascontiguousarray(a.data[:, ::-1])
    return custom_op(out, (a,), lambda g: (np.ascontiguousarray(g[:, ::-1]),), "flip_time")


def crop_time(a: Tensor, steps: int) -> Tensor:
    """Primi `steps` passi sull'asse temporale."""
    if not 1 <= steps <= a.shape[1]:
        raise ShapeError(f"crop_time: {steps} passi richiesti su {a.shape[1]}")
    if steps == a.shape[1]:
        return a
    out = np.ascontiguousarray(a.data[:, :steps])

    def backward(g):
        full = np.zeros_like(a.data)
        full[:, :steps] = g
        return (full,)

    return custom_op(out, (a,), backward, "crop_time")


def pad_time(a: Tensor, left: int, right: int, mode: str = "zeros") -> Tensor:
    """Padding sull'asse temporale: `zeros` oppure `replicate` (ripete il bordo)."""
    if mode not in ("zeros", "replicate"):
        raise ContractError(f"pad_time: modalità sconosciuta '{mode}'")
    widths = [(0, 0)] * a.ndim
    widths[1] = (left, right)
    out = np.pad(a.data, widths, mode="constant" if mode == "zeros" else "edge")
    steps = a.shape[1]

    def backward(g):
        gx = g[:, left:left + steps].copy()
        if mode == "replicate":
            gx[:, 0] += g[:, :left].sum(axis=1)
            gx[:, -1] += g[:, left + steps:].sum(axis=1)
        return (gx,)

    return custom_op(out, (a,), backward, "pad_time")


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum())
    return custom_op(out, (a,), lambda g: (np.full_like(a.data, g),), "sum_all")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return custom_op(y, (a,), lambda g: (g * y,), "exp")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return custom_op(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def sigmoid(a: Tensor) -> Tensor:
    y = _stable_sigmoid(a.data)
    return custom_op(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    s = _stable_sigmoid(a.data)
    y = a.data * s
    return custom_op(y, (a,), lambda g: (g * s * (1.0 + a.data * (1.0 - s)),), "silu")


def softplus(a: Tensor) -> Tensor:
    y = np.logaddexp(0.0, a.data)
    return custom_op(y, (a,), lambda g: (g * _stable_sigmoid(a.data),), "softplus")


def gelu(a: Tensor) -> Tensor:
    """GELU, approssimazione tanh."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return custom_op(y, (a,), backward, "gelu")


def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, groups: int = 1) -> Tensor:
    """
    Convoluzione 1-D "valid" su input B×T×C_in (tempo sull'asse 1, canali in fondo).

    Args:
        weight: C_out × (C_in/groups) × K
        groups: 1 (convoluzione piena) oppure C_in == C_out (depthwise)
    """
    if x.ndim != 3:
        raise ShapeError(f"conv1d: atteso B×T×C, shape={x.shape}")
    batch, steps, c_in = x.shape
    c_out, c_group, kernel = weight.shape
    depthwise = groups != 1
    if depthwise and not (groups == c_in == c_out and c_group == 1):
        raise ShapeError(f"conv1d: supportati solo groups=1 o depthwise (groups={groups}, C_in={c_in})")
    if not depthwise and c_group != c_in:
        raise ShapeError(f"conv1d: peso per {c_group} canali, input con {c_in}")
    if steps < kernel:
        raise ShapeError(f"conv1d: sequenza di {steps} passi più corta del kernel {kernel}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv1d: bias di shape {bias.shape}, atteso ({c_out},)")

    windows = sliding_window_view(x.data, kernel, axis=1)[:, ::stride]
    out_steps = windows.shape[1]
    if depthwise:
        out = np.einsum("btck,ck->btc", windows, weight.data[:, 0, :], optimize=True)
    else:
        out = np.einsum("btck,ock->bto", windows, weight.data, optimize=True)
    if bias is not None:
        out = out + bias.data

    parents = [x, weight] + ([bias] if bias is not None else [])

    def backward(g):
        if depthwise:
            gw = np.einsum("btc,btck->ck", g, windows, optimize=True)[:, None, :]
            gwin = g[..., None] * weight.data[None, None, :, 0, :]
        else:
            gw = np.einsum("bto,btck->ock", g, windows, optimize=True)
            gwin = np.einsum("bto,ock->btck", g, weight.data, optimize=True)
        gx = np.zeros_like(x.data)
        span = stride * (out_steps - 1) + 1
        for k in range(kernel):
            gx[:, k:k + span:stride] += gwin[..., k]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1)))
        return grads

    macs = batch * out_steps * c_out * c_group * kernel
    return custom_op(out, parents, backward, "conv1d", macs=macs)


def embedding_lookup(table: Tensor, indices: np.ndarray) -> Tensor:
    """Righe di `table` (V×d) selezionate da `indices` (interi)."""
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError(f"embedding_lookup: indici non interi ({idx.dtype})")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: indici fuori da [0, {table.shape[0]})")
    out = table.data[idx]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return custom_op(out, (table,), backward, "embedding_lookup")


def masked_cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """
    Cross-entropy media sulle sole posizioni selezionate da `mask`.

    Le righe non selezionate non entrano nel calcolo: perturbarle lascia la loss identica bit a bit.
    """
    if logits.ndim != 3 or targets.shape != logits.shape[:2] or mask.shape != logits.shape[:2]:
        raise ShapeError(
            f"masked_cross_entropy: logits {logits.shape}, target {targets.shape}, maschera {mask.shape}"
        )
    mask = mask.astype(bool)
    count = int(mask.sum())
    if count == 0:
        raise ContractError("masked_cross_entropy: nessuna posizione selezionata")
    rows = logits.data[mask]
    picked = targets[mask]
    shifted = rows - rows.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - log_z
    loss = np.asarray(-log_probs[np.arange(count), picked].mean())

    def backward(g):
        probs = np.exp(log_probs)
        probs[np.arange(count), picked] -= 1.0
        full = np.zeros_like(logits.data)
        full[mask] = probs * (g / count)
        return (full,)

    return custom_op(loss, (logits,), backward, "masked_cross_entropy", macs=rows.size)


# ---------------------------------------------------------------------------
# Tape e backward
# ---------------------------------------------------------------------------

class Tape:
    """
    Linearizzazione topologica del grafo che termina in `root`.

    Ogni nodo compare dopo tutti i produttori dei suoi input ed esattamente una volta.
    """

    def __init__(self, root: Tensor):
        self.nodes: List[Tensor] = self._linearize(root)

    @staticmethod
    def _linearize(root: Tensor) -> List[Tensor]:
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor) -> None:
    """Popola `.grad` di tutte le foglie con requires_grad; chiamate ripetute accumulano."""
    if loss.size != 1:
        raise ContractError(f"backward richiede una loss scalare, shape={loss.shape}")
    if not loss.requires_grad:
        logger.debug("[TENSOR] backward su una loss senza grafo: nulla da fare")
        return
    tape = Tape(loss)
    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-5,
    tol: float = 1e-6,
    analytic_hook: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> GradCheckReport:
    """
    Confronta il gradiente analitico di `f` in `x` con le differenze centrali.

    L'errore è relativo, con fallback assoluto quando entrambe le grandezze sono sotto 1e-8.
    `analytic_hook` permette di alterare il gradiente analitico (iniezione di guasti nei test).
    """
    if step <= 0:
        raise ContractError(f"grad_check: passo non positivo ({step})")
    leaf = Tensor(x.data.copy(), requires_grad=True)
    loss = f(leaf)
    if loss.size != 1:
        raise ContractError(f"grad_check: f deve restituire uno scalare, shape={loss.shape}")
    backward(loss)
    analytic = leaf.grad_value
    if analytic_hook is not None:
        analytic = analytic_hook(analytic)

    base = x.data.copy()
    numeric = np.zeros_like(base)
    with no_grad():
        for idx in np.ndindex(base.shape):
            original = base[idx]
            base[idx] = original + step
            f_plus = f(Tensor(base.copy())).item()
            base[idx] = original - step
            f_minus = f(Tensor(base.copy())).item()
            base[idx] = original
            numeric[idx] = (f_plus - f_minus) / (2.0 * step)

    diff = np.abs(analytic - numeric)
    magnitude = np.maximum(np.abs(analytic), np.abs(numeric))
    errors = np.where(magnitude < 1e-8, diff, diff / np.maximum(magnitude, 1e-300))
    max_err = float(errors.max())
    return GradCheckReport(max_rel_error=max_err, passed=max_err < tol, analytic=analytic, numeric=numeric)


# ---------------------------------------------------------------------------
# Container su file
# ---------------------------------------------------------------------------

def _pad_to_alignment(handle) -> None:
    remainder = handle.tell() % 8
    if remainder:
        handle.write(b"\0" * (8 - remainder))


def write_container(path, tensors: Mapping[str, Any], meta: Optional[dict] = None) -> None:
    """
    Scrive un container: magic, riga `meta:` opzionale (JSON), poi per ogni tensore
    `tensor: <nome>` e `dims: d1 d2 …` seguiti da float64 little-endian allineati a 8 byte.
    """
    path = Path(path)
    try:
        with path.open("wb") as handle:
            handle.write(CONTAINER_MAGIC)
            if meta is not None:
                handle.write(b"meta: " + json.dumps(meta, sort_keys=True).encode("utf-8") + b"\n")
            for name, value in tensors.items():
                if "\n" in name:
                    raise ContractError(f"nome tensore non valido: {name!r}")
                arr = value.data if isinstance(value, Tensor) else np.asarray(value)
                # tobytes() serializza in ordine C; asarray conserva il rango anche per gli scalari
                payload = np.asarray(arr, dtype="<f8")
                handle.write(f"tensor: {name}\n".encode("utf-8"))
                handle.write(("dims: " + " ".join(str(d) for d in payload.shape) + "\n").encode("utf-8"))
                _pad_to_alignment(handle)
                handle.write(payload.tobytes())
    except OSError as e:
        raise FeatureSourceError(path, f"scrittura fallita: {e}") from e
    logger.debug(f"[TENSOR] Container scritto: {path} ({len(tensors)} tensori)")


def read_container(path) -> Tuple[Dict[str, np.ndarray], dict]:
    """Legge un container scritto da `write_container`; restituisce (tensori, meta)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise FeatureSourceError(path, f"lettura fallita: {e}") from e
    if not raw.startswith(CONTAINER_MAGIC):
        raise FeatureSourceError(path, "intestazione del container non riconosciuta")

    pos = len(CONTAINER_MAGIC)
    meta: dict = {}
    tensors: Dict[str, np.ndarray] = {}

    def next_line() -> str:
        nonlocal pos
        end = raw.find(b"\n", pos)
        if end < 0:
            raise FeatureSourceError(path, f"riga di intestazione troncata all'offset {pos}")
        line = raw[pos:end].decode("utf-8")
        pos = end + 1
        return line

    while pos < len(raw):
        line = next_line()
        if line.startswith("meta: "):
            meta = json.loads(line[len("meta: "):])
            continue
        if not line.startswith("tensor: "):
            raise FeatureSourceError(path, f"record inatteso: {line[:40]!r}")
        name = line[len("tensor: "):]
        dims_line = next_line()
        if not dims_line.startswith("dims:"):
            raise FeatureSourceError(path, f"manca la riga dims per '{name}'")
        dims = tuple(int(d) for d in dims_line[len("dims:"):].split())
        pos += (-pos) % 8
        count = int(np.prod(dims)) if dims else 1
        end = pos + 8 * count
        if end > len(raw):
            raise FeatureSourceError(path, f"payload troncato per '{name}'")
        tensors[name] = np.frombuffer(raw[pos:end], dtype="<f8").reshape(dims).astype(np.float64)
        pos = end
    return tensors, meta
