"""
Suite di proprietà eseguita dal comando `verify`.

Ogni controllo è registrato con un nome e dei tag (`grad`, `scan`, `quantizer`,
`equivariance`, `params` e il tipo di mixer coinvolto); `--only` filtra per tag
o per nome. I controlli di gradiente girano sempre a 64 bit.
"""
import logging
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from rapidfuzz import fuzz, process

from . import tensorcore as tc
from .bestrq import Codebook, RandomProjection, quantize
from .encoder import Encoder, EncoderConfig, ParamBudget, build_matched_configs, param_count, preset
from .errors import BrqError, ConfigError, VerificationError
from .layers import make_rng
from .mixers import MixerConfig, MixerKind, build_mixer
from .selective_scan import discretize, mamba_recurrence_oracle, selective_scan
from .tensorcore import Tensor

logger = logging.getLogger(__name__)

GRAD_TOLERANCE = 1e-5
SCAN_TOLERANCE = 1e-10
EQUIVARIANCE_TOLERANCE = 1e-10
SCAN_SEEDS = 100
SCAN_LENGTHS = (1, 2, 7, 64, 250)
QUANTIZER_INSTANCES = 1000
PERMUTATIONS = 20

_fault = threading.local()


@contextmanager
def inject_gradient_fault(hook: Callable[[np.ndarray], np.ndarray]) -> Iterator[None]:
    """Altera il gradiente analitico dei controlli `grad` nel thread corrente."""
    previous = getattr(_fault, "hook", None)
    _fault.hook = hook
    try:
        yield
    finally:
        _fault.hook = previous


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise VerificationError(message)


@dataclass(frozen=True)
class Check:
    name: str
    tags: Tuple[str, ...]
    run: Callable[[], str]


@dataclass
class CheckResult:
    name: str
    tags: Tuple[str, ...]
    passed: bool
    detail: str
    elapsed_s: float


class CheckRegistry:
    """Registro ordinato dei controlli."""

    def __init__(self):
        self._checks: Dict[str, Check] = {}

    def register(self, name: str, *tags: str):
        def decorator(func: Callable[[], str]) -> Callable[[], str]:
            self._checks[name] = Check(name=name, tags=tuple(tags), run=func)
            return func
        return decorator

    def __len__(self) -> int:
        return len(self._checks)

    @property
    def tags(self) -> List[str]:
        return sorted({tag for check in self._checks.values() for tag in check.tags})

    def select(self, only: Optional[Sequence[str]] = None) -> List[Check]:
        """
        Controlli il cui nome o uno dei tag compare in `only` (tutti se vuoto).

        Raises:
            ConfigError: filtro che non corrisponde a nessun nome né tag
        """
        checks = list(self._checks.values())
        if not only:
            return checks
        wanted = {item.strip().lower() for item in only if item.strip()}
        known = set(self.tags) | set(self._checks)
        unknown = sorted(wanted - known)
        if unknown:
            match = process.extractOne(unknown[0], sorted(known), scorer=fuzz.WRatio, score_cutoff=70)
            hint = f" (forse '{match[0]}'?)" if match else ""
            raise ConfigError(f"filtro verify sconosciuto '{unknown[0]}'{hint}")
        return [c for c in checks if c.name in wanted or wanted.intersection(c.tags)]


registry = CheckRegistry()


# ---------------------------------------------------------------------------
# Configurazioni minime
# ---------------------------------------------------------------------------

def tiny_mixer_config(kind: MixerKind, seed: int = 0) -> MixerConfig:
    return MixerConfig(
        kind=kind, d_model=8, n_heads=2, d_summary=8, d_tmmlp=8, d_hyper=8,
        d_state=4, d_inner=8, scan_chunk=4, seed=seed,
    )


def tiny_encoder_config(kind: MixerKind = MixerKind.MHSA, n_layers: int = 2) -> EncoderConfig:
    return EncoderConfig(
        mixer=tiny_mixer_config(kind), n_layers=n_layers, d_model=8, d_ffn=16,
        conv_kernel=3, vocab=8, d_feat=4,
    )


def _weighted_sum(output: Tensor, weights: np.ndarray) -> Tensor:
    return tc.sum_all(tc.mul(output, Tensor(weights)))


def _grad_report(f: Callable[[Tensor], Tensor], x: np.ndarray) -> str:
    report = tc.grad_check(f, Tensor(x), tol=GRAD_TOLERANCE, analytic_hook=getattr(_fault, "hook", None))
    _require(report.passed, f"errore relativo massimo {report.max_rel_error:.2e} ≥ {GRAD_TOLERANCE:g}")
    return f"max_rel_err={report.max_rel_error:.2e}"


# ---------------------------------------------------------------------------
# Gradienti
# ---------------------------------------------------------------------------

def _register_mixer_grad(kind: MixerKind) -> None:
    @registry.register(f"grad.{kind.value}", "grad", kind.value)
    def check() -> str:
        mixer = build_mixer(tiny_mixer_config(kind))
        rng = make_rng(0, "verify", "grad", kind.value)
        x = rng.standard_normal((1, 6, 8))
        weights = rng.standard_normal((1, 6, 8))
        return _grad_report(lambda t: _weighted_sum(mixer(t), weights), x)


for _kind in MixerKind:
    _register_mixer_grad(_kind)


@registry.register("grad.encoder", "grad", "encoder")
def _check_encoder_grad() -> str:
    config = tiny_encoder_config()
    model = Encoder(config)
    rng = make_rng(0, "verify", "grad", "encoder")
    x = rng.standard_normal((1, 24, config.d_feat))
    weights = rng.standard_normal((1, 6, config.vocab))
    return _grad_report(lambda t: _weighted_sum(model(t), weights), x)


# ---------------------------------------------------------------------------
# Scan
# ---------------------------------------------------------------------------

def scan_oracle_gap(seed: int, steps: int, inner: int = 3, state: int = 4) -> float:
    """Massimo scarto assoluto fra scan a blocchi e ricorrenza sequenziale."""
    rng = make_rng(seed, "verify", "scan", steps)
    u = rng.standard_normal((1, steps, inner))
    delta = np.log1p(np.exp(rng.standard_normal((1, steps, inner))))
    A = -np.exp(rng.standard_normal((inner, state)))
    Bm = rng.standard_normal((1, steps, state))
    Cm = rng.standard_normal((1, steps, state))
    with tc.no_grad():
        fast = selective_scan(Tensor(u), Tensor(delta), Tensor(A), Tensor(Bm), Tensor(Cm)).data
    dA, dB = discretize(delta, A, Bm)
    slow = mamba_recurrence_oracle(u, dA, dB, Cm)
    return float(np.abs(fast - slow).max())


@registry.register("scan.recurrence", "scan", "mamba")
def _check_scan() -> str:
    worst = max(scan_oracle_gap(seed, steps) for seed in range(SCAN_SEEDS) for steps in SCAN_LENGTHS)
    _require(worst <= SCAN_TOLERANCE, f"scarto massimo {worst:.2e} > {SCAN_TOLERANCE:g}")
    return f"max_abs={worst:.2e} su {SCAN_SEEDS * len(SCAN_LENGTHS)} casi"


@registry.register("mamba.reversal", "mamba")
def _check_mamba_reversal() -> str:
    mixer = build_mixer(tiny_mixer_config(MixerKind.MAMBA))
    x = make_rng(0, "verify", "reversal").standard_normal((1, 9, 8))
    with tc.no_grad():
        direct = mixer(Tensor(x)).data
        mirrored = mixer.swap_directions()(Tensor(x[:, ::-1].copy())).data[:, ::-1]
    gap = float(np.abs(direct - mirrored).max())
    _require(gap <= EQUIVARIANCE_TOLERANCE, f"inversione non simmetrica: scarto {gap:.2e}")
    return f"max_abs={gap:.2e}"


# ---------------------------------------------------------------------------
# Quantizzatore
# ---------------------------------------------------------------------------

def _quantizer_instance(index: int) -> Tuple[np.ndarray, RandomProjection, Codebook]:
    proj = RandomProjection.create(16, 4, seed=index)
    book = Codebook.create(16, 4, seed=index)
    m = make_rng(index, "verify", "frame").standard_normal(16)
    return m, proj, book


@registry.register("quantizer.scale", "quantizer")
def _check_quantizer_scale() -> str:
    failures = 0
    for index in range(QUANTIZER_INSTANCES):
        m, proj, book = _quantizer_instance(index)
        reference = quantize(m, proj, book)
        failures += sum(quantize(scale * m, proj, book) != reference for scale in (1e-3, 1e3))
    _require(failures == 0, f"{failures} violazioni dell'invarianza di scala")
    return f"{QUANTIZER_INSTANCES} istanze"


@registry.register("quantizer.bruteforce", "quantizer")
def _check_quantizer_bruteforce() -> str:
    failures = 0
    for index in range(QUANTIZER_INSTANCES):
        m, proj, book = _quantizer_instance(index)
        projected = m @ proj.matrix.data
        target = projected / np.sqrt(projected @ projected)
        best, best_distance = 0, np.inf
        for row, entry in enumerate(book.entries.data):
            unit = entry / np.sqrt(entry @ entry)
            distance = np.sqrt(((unit - target) ** 2).sum())
            if distance < best_distance:
                best, best_distance = row, distance
        failures += quantize(m, proj, book) != best
    _require(failures == 0, f"{failures} disaccordi con l'argmin esaustivo")
    return f"{QUANTIZER_INSTANCES} istanze"


# ---------------------------------------------------------------------------
# Equivarianza
# ---------------------------------------------------------------------------

def permutation_gap(kind: MixerKind, seed: int) -> float:
    mixer = build_mixer(tiny_mixer_config(kind))
    rng = make_rng(seed, "verify", "permutation", kind.value)
    x = rng.standard_normal((2, 7, 8))
    perm = rng.permutation(7)
    with tc.no_grad():
        permuted_in = mixer(Tensor(x[:, perm].copy())).data
        permuted_out = mixer(Tensor(x)).data[:, perm]
    return float(np.abs(permuted_in - permuted_out).max())


def _register_equivariance(kind: MixerKind) -> None:
    @registry.register(f"equivariance.{kind.value}", "equivariance", kind.value)
    def check() -> str:
        worst = max(permutation_gap(kind, seed) for seed in range(PERMUTATIONS))
        _require(worst <= EQUIVARIANCE_TOLERANCE, f"non equivariante: scarto {worst:.2e}")
        return f"max_abs={worst:.2e}"


for _kind in (MixerKind.MHSA, MixerKind.FASTFORMER, MixerKind.HYPERMIXING, MixerKind.SUMMARYMIXING):
    _register_equivariance(_kind)


@registry.register("equivariance.mamba_order", "equivariance", "mamba")
def _check_mamba_order() -> str:
    worst = max(permutation_gap(MixerKind.MAMBA, seed) for seed in range(PERMUTATIONS))
    _require(worst > 1e-6, "Mamba risulta equivariante: l'ordine della sequenza viene ignorato")
    return f"max_abs={worst:.2e} (sensibile all'ordine)"


# ---------------------------------------------------------------------------
# Parametri allineati
# ---------------------------------------------------------------------------

@registry.register("params.matching", "params", "encoder")
def _check_param_matching() -> str:
    budget = ParamBudget()
    matched = build_matched_configs(budget, preset("bench"))
    allowed = budget.tolerance_fraction * budget.target_params
    counts = {kind: param_count(config) for kind, config in matched.items()}
    off = [k.value for k, c in counts.items() if abs(c - budget.target_params) > allowed]
    _require(not off and len(counts) == len(MixerKind), f"fuori tolleranza: {', '.join(off) or 'tipi mancanti'}")
    return " ".join(f"{k.value}={c:,}" for k, c in counts.items())


# ---------------------------------------------------------------------------
# Esecuzione
# ---------------------------------------------------------------------------

def _precision_bits() -> int:
    return 64 if tc.default_dtype() == np.float64 else 32


def run_check(check: Check) -> CheckResult:
    started = time.perf_counter()
    try:
        detail = check.run()
        passed = True
    except VerificationError as e:
        detail, passed = str(e), False
    except BrqError as e:
        detail, passed = f"{type(e).__name__}: {e}", False
        logger.debug(f"[VERIFY] {check.name}", exc_info=True)
    elapsed = time.perf_counter() - started
    status = "✅" if passed else "❌"
    logger.info(f"[VERIFY] {status} {check.name} ({elapsed:.2f}s) {detail}")
    return CheckResult(name=check.name, tags=check.tags, passed=passed, detail=detail, elapsed_s=elapsed)


def run_checks(only: Optional[Sequence[str]] = None) -> List[CheckResult]:
    """Esegue i controlli selezionati a 64 bit e ripristina la precisione precedente."""
    checks = registry.select(only)
    previous = _precision_bits()
    tc.set_default_dtype(64)
    try:
        return [run_check(check) for check in checks]
    finally:
        tc.set_default_dtype(previous)
