import numpy as np
import pytest
from numpy.testing import assert_array_equal

from src.bestrq import Codebook, RandomProjection, quantize_batch, stack_frames
from src.errors import ConfigError, FeatureSourceError
from src.features import (
    FeatureSource,
    GaussianMixtureGenerator,
    SyntheticSpec,
    bucket_batches,
    load_features,
    save_features,
    synth_features,
)


def test_parse_synthetic_spec():
    spec = SyntheticSpec.parse("n=4,len=8..16,d=3", seed=2)
    assert (spec.n_sequences, spec.min_len, spec.max_len, spec.d_feat, spec.seed) == (4, 8, 16, 3, 2)
    assert SyntheticSpec.parse(spec.describe(), seed=2) == spec


def test_parse_optional_items():
    spec = SyntheticSpec.parse("n=2,len=10,d=5,components=3,seed=11")
    assert (spec.min_len, spec.max_len, spec.components, spec.seed) == (10, 10, 3, 11)


@pytest.mark.parametrize("text", ["n=4,len=16..8,d=3", "n=4,len=2..8", "n=x", "colore=rosso"])
def test_invalid_synthetic_spec(text):
    with pytest.raises(ConfigError):
        SyntheticSpec.parse(text)


def test_generator_is_deterministic():
    spec = SyntheticSpec(n_sequences=3, min_len=20, max_len=40, d_feat=5, seed=4)
    first = GaussianMixtureGenerator(spec).sequences()
    second = GaussianMixtureGenerator(spec).sequences()
    for a, b in zip(first, second):
        assert_array_equal(a, b)
    other = GaussianMixtureGenerator(spec.model_copy(update={"seed": 5})).sequence(0)
    assert not np.array_equal(first[0][:20], other[:20])


def test_default_width_and_lengths():
    spec = SyntheticSpec.parse("n=8,len=400..800,d=80")
    for seq in GaussianMixtureGenerator(spec).sequences():
        assert seq.shape[1] == 80
        assert 400 <= seq.shape[0] <= 800


def test_buckets_respect_frame_cap():
    rng = np.random.default_rng(0)
    sequences = [np.zeros((int(n), 2)) for n in rng.integers(10, 120, size=40)]
    batches = bucket_batches(sequences, frame_cap=300)
    assert sum(b.shape[0] for b in batches) == 40
    for batch in batches:
        assert batch.shape[0] * batch.shape[1] <= 300


def test_long_sequence_is_cropped_to_cap():
    batches = bucket_batches([np.zeros((50, 2))], frame_cap=20)
    assert [b.shape for b in batches] == [(1, 20, 2)]


def test_frame_cap_minimum():
    with pytest.raises(ConfigError):
        bucket_batches([np.zeros((8, 2))], frame_cap=3)


def test_synth_features_stream():
    spec = SyntheticSpec.parse("n=5,len=12..20,d=3")
    singles = list(synth_features(spec))
    assert len(singles) == 5
    assert all(b.shape[0] == 1 for b in singles)
    capped = list(synth_features(spec, frame_cap=40))
    assert sum(b.shape[0] for b in capped) == 5


def test_targets_do_not_collapse():
    spec = SyntheticSpec.parse("n=100,len=400,d=80")
    stacked = np.concatenate([stack_frames(seq[None])[0] for seq in GaussianMixtureGenerator(spec).sequences()])
    assert stacked.shape[0] == 10_000
    targets = quantize_batch(stacked[None], RandomProjection.create(320, 16, 0), Codebook.create(512, 16, 0))
    assert len(np.unique(targets)) >= 50


def test_container_ingestion(tmp_path):
    rng = np.random.default_rng(1)
    sequences = [rng.standard_normal((n, 6)) for n in (9, 14, 30)]
    path = tmp_path / "feat.brqc"
    save_features(path, sequences, meta={"origine": "test"})
    source = load_features(path)
    assert len(source) == 3
    assert source.d_feat == 6
    for loaded, original in zip(source.sequences(), sequences):
        assert_array_equal(loaded, original)


def test_missing_feature_file(tmp_path):
    with pytest.raises(FeatureSourceError) as excinfo:
        load_features(tmp_path / "assente.brqc")
    assert excinfo.value.path == tmp_path / "assente.brqc"


def test_too_short_sequences_rejected(tmp_path):
    path = tmp_path / "corte.brqc"
    save_features(path, [np.zeros((3, 2))])
    with pytest.raises(FeatureSourceError):
        load_features(path)


def test_mixed_widths_rejected():
    with pytest.raises(FeatureSourceError):
        FeatureSource([np.zeros((8, 2)), np.zeros((8, 3))], "memoria")
