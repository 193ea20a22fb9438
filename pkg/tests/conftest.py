import numpy as np
import pytest

from src import tensorcore as tc
from src.encoder import EncoderConfig
from src.mixers import MixerConfig, MixerKind


@pytest.fixture(autouse=True)
def float64():
    """Ogni test parte a 64 bit, qualunque cosa abbia impostato il test precedente."""
    tc.set_default_dtype(64)
    yield
    tc.set_default_dtype(64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_mixer(kind: MixerKind, **overrides) -> MixerConfig:
    values = dict(
        kind=kind, d_model=8, n_heads=2, d_summary=8, d_tmmlp=8, d_hyper=8,
        d_state=4, d_inner=8, scan_chunk=4,
    )
    values.update(overrides)
    return MixerConfig(**values)


def small_encoder(kind: MixerKind = MixerKind.MHSA, n_layers: int = 2, **overrides) -> EncoderConfig:
    values = dict(
        mixer=small_mixer(kind), n_layers=n_layers, d_model=8, d_ffn=16,
        conv_kernel=3, vocab=8, d_feat=4,
    )
    values.update(overrides)
    return EncoderConfig(**values)


@pytest.fixture
def mixer_config():
    return small_mixer


@pytest.fixture
def encoder_config():
    return small_encoder
