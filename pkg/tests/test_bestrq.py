import numpy as np
import pytest
from numpy.testing import assert_array_equal

from src.bestrq import (
    Codebook,
    MaskPlan,
    MaskSettings,
    RandomProjection,
    apply_mask,
    draw_training_mask,
    make_batch_mask,
    make_mask,
    pretrain_loss,
    pretrain_step,
    quantize,
    quantize_batch,
    stack_frames,
)
from src.encoder import Encoder
from src.errors import (
    AlignmentError,
    ContractError,
    DegenerateProjectionError,
    NoLossPositionsError,
    TooShortInputError,
)
from src.optim import Adam
from src.tensorcore import Tensor
from tests.conftest import small_encoder


def _brute_force(m, proj, book):
    projected = m @ proj.matrix.data
    target = projected / np.linalg.norm(projected)
    distances = [np.linalg.norm(e / np.linalg.norm(e) - target) for e in book.entries.data]
    return int(np.argmin(distances))


def test_stack_frames_drops_tail():
    features = np.arange(2 * 10 * 3, dtype=float).reshape(2, 10, 3)
    stacked = stack_frames(features)
    assert stacked.shape == (2, 2, 12)
    assert_array_equal(stacked[0, 1], features[0, 4:8].reshape(-1))


def test_stack_frames_needs_four_frames():
    with pytest.raises(TooShortInputError):
        stack_frames(np.zeros((1, 3, 2)))


def test_quantize_scale_invariance_and_brute_force():
    for seed in range(200):
        proj = RandomProjection.create(16, 4, seed)
        book = Codebook.create(16, 4, seed)
        m = np.random.default_rng(seed).standard_normal(16)
        index = quantize(m, proj, book)
        assert index == _brute_force(m, proj, book)
        for scale in (1e-3, 1e3):
            assert quantize(scale * m, proj, book) == index


def test_codebook_scale_does_not_matter(rng):
    proj = RandomProjection.create(8, 3, 0)
    entries = rng.standard_normal((10, 3))
    m = rng.standard_normal(8)
    scaled = entries * rng.uniform(0.1, 10.0, size=(10, 1))
    assert quantize(m, proj, Codebook(entries)) == quantize(m, proj, Codebook(scaled))


def test_batch_quantization_matches_single(rng):
    proj = RandomProjection.create(12, 4, 1)
    book = Codebook.create(32, 4, 1)
    stacked = rng.standard_normal((2, 300, 12))
    batch = quantize_batch(stacked, proj, book)
    assert batch.shape == (2, 300)
    for b, t in [(0, 0), (1, 17), (0, 299), (1, 256)]:
        assert batch[b, t] == quantize(stacked[b, t], proj, book)


def test_zero_frame_cannot_be_normalized():
    with pytest.raises(DegenerateProjectionError):
        quantize(np.zeros(8), RandomProjection.create(8, 3, 0), Codebook.create(4, 3, 0))


def test_zero_codebook_row_rejected(rng):
    entries = rng.standard_normal((4, 3))
    entries[2] = 0.0
    with pytest.raises(DegenerateProjectionError):
        Codebook(entries)


def test_frozen_tensors_are_seeded():
    assert RandomProjection.create(8, 4, 3).checksum() == RandomProjection.create(8, 4, 3).checksum()
    assert Codebook.create(8, 4, 3).checksum() != Codebook.create(8, 4, 4).checksum()


def test_mask_is_union_of_spans():
    plan = make_mask(40, 0.1, 5, np.random.default_rng(0))
    assert_array_equal(plan.mask, plan.reconstruct())
    for start in np.flatnonzero(plan.starts):
        assert plan.mask[start:start + 5].all()


def test_span_is_clipped_at_the_end():
    starts = np.zeros(6, dtype=bool)
    starts[4] = True
    plan = MaskPlan(mask=np.zeros(6, dtype=bool), starts=starts, span_length=8, start_prob=0.0)
    assert_array_equal(plan.reconstruct(), [False, False, False, False, True, True])


@pytest.mark.parametrize("start_prob, expected", [(0.0, 0), (1.0, 30)])
def test_mask_extremes(start_prob, expected):
    assert make_mask(30, start_prob, 4, np.random.default_rng(0)).masked_count == expected


def test_mask_coverage_matches_span_model():
    plan = make_batch_mask(50, 2000, 0.01, 8, np.random.default_rng(9))
    assert plan.mask.mean() == pytest.approx(1 - 0.99 ** 8, abs=0.01)


@pytest.mark.parametrize("start_prob, span", [(-0.1, 4), (1.5, 4), (0.1, 0)])
def test_invalid_mask_parameters(start_prob, span):
    with pytest.raises(ContractError):
        make_mask(10, start_prob, span, np.random.default_rng(0))


def test_forced_span_when_draws_stay_empty():
    settings = MaskSettings(start_prob=0.0, span_length=3)
    plan = draw_training_mask(2, 10, settings, np.random.default_rng(0))
    assert 1 <= plan.masked_count <= 3


def test_apply_mask_only_touches_masked_frames(rng):
    features = rng.standard_normal((1, 22, 3))
    plan = make_mask(5, 0.3, 2, np.random.default_rng(4))
    masked = apply_mask(features, plan, rng)
    frames = np.repeat(plan.mask, 4)
    assert_array_equal(masked[0, :20][~frames], features[0, :20][~frames])
    assert_array_equal(masked[0, 20:], features[0, 20:])
    if frames.any():
        assert not np.allclose(masked[0, :20][frames], features[0, :20][frames])


def test_single_plan_applies_to_every_sequence(rng):
    features = rng.standard_normal((3, 40, 8))
    plan = make_mask(10, 0.3, 2, np.random.default_rng(7))
    masked = apply_mask(features, plan, rng)
    frames = np.repeat(plan.mask, 4)
    assert masked.shape == features.shape
    for b in range(3):
        assert_array_equal(masked[b][~frames], features[b][~frames])
    if frames.any():
        # rumore indipendente per sequenza
        assert not np.allclose(masked[0][frames], masked[1][frames])


def test_full_plan_noise_statistics(rng):
    features = rng.standard_normal((4, 400, 80)) + 3.0
    plan = make_batch_mask(4, 100, 1.0, 1, np.random.default_rng(2))
    assert plan.mask.all()
    masked = apply_mask(features, plan, np.random.default_rng(3), noise_std=0.1)
    assert not np.any(np.all(masked == features, axis=-1))
    assert abs(masked.mean()) < 0.005
    assert masked.std() == pytest.approx(0.1, abs=0.01)


def test_empty_plan_leaves_features_untouched(rng):
    features = rng.standard_normal((2, 20, 4))
    plan = make_batch_mask(2, 5, 0.0, 3, np.random.default_rng(0))
    assert_array_equal(apply_mask(features, plan, rng), features)


def test_loss_rejects_misaligned_targets():
    plan = make_batch_mask(1, 5, 1.0, 1, np.random.default_rng(0))
    with pytest.raises(AlignmentError):
        pretrain_loss(Tensor(np.zeros((1, 6, 4))), np.zeros((1, 5), dtype=int), plan)


def test_loss_needs_masked_positions():
    plan = make_batch_mask(1, 5, 0.0, 1, np.random.default_rng(0))
    with pytest.raises(NoLossPositionsError):
        pretrain_loss(Tensor(np.zeros((1, 5, 4))), np.zeros((1, 5), dtype=int), plan)


def test_loss_at_uniform_logits_is_log_vocab():
    plan = make_batch_mask(2, 5, 1.0, 1, np.random.default_rng(0))
    loss = pretrain_loss(Tensor(np.zeros((2, 5, 16))), np.zeros((2, 5), dtype=int), plan)
    assert loss.item() == pytest.approx(np.log(16))


def test_loss_matches_masked_log_softmax(rng):
    logits = rng.standard_normal((2, 7, 5))
    targets = rng.integers(0, 5, size=(2, 7))
    plan = make_batch_mask(2, 7, 0.4, 2, np.random.default_rng(11))
    assert plan.mask.any()
    expected, count = 0.0, 0
    for b in range(2):
        for t in range(7):
            if plan.mask[b, t]:
                row = logits[b, t]
                log_z = np.log(np.sum(np.exp(row - row.max()))) + row.max()
                expected -= row[targets[b, t]] - log_z
                count += 1
    loss = pretrain_loss(Tensor(logits), targets, plan)
    assert loss.item() == pytest.approx(expected / count, rel=1e-10)


def test_loss_vanishes_with_large_margin(rng):
    targets = rng.integers(0, 8, size=(2, 6))
    logits = 50.0 * np.eye(8)[targets]
    plan = make_batch_mask(2, 6, 1.0, 1, np.random.default_rng(0))
    assert pretrain_loss(Tensor(logits), targets, plan).item() < 1e-15


def test_pretrain_step_updates_only_the_model(rng):
    config = small_encoder()
    model = Encoder(config)
    proj = RandomProjection.create(4 * config.d_feat, 4, 0)
    book = Codebook.create(config.vocab, 4, 0)
    frozen = (proj.checksum(), book.checksum())
    before = {k: v.copy() for k, v in model.state_arrays().items()}
    optimizer = Adam(model.named_parameters(), lr=1e-2)
    settings = MaskSettings(start_prob=0.2, span_length=2, vocab=config.vocab, d_code=4)
    loss = pretrain_step(model, rng.standard_normal((2, 32, config.d_feat)), proj, book, optimizer, settings, rng)
    assert np.isfinite(loss)
    assert (proj.checksum(), book.checksum()) == frozen
    assert any(not np.allclose(before[k], v) for k, v in model.state_arrays().items())


def test_repeated_steps_lower_the_loss():
    config = small_encoder()
    model = Encoder(config)
    proj = RandomProjection.create(4 * config.d_feat, 4, 0)
    book = Codebook.create(config.vocab, 4, 0)
    optimizer = Adam(model.named_parameters(), lr=3e-3)
    settings = MaskSettings(start_prob=0.3, span_length=2, vocab=config.vocab, d_code=4)
    batch = np.random.default_rng(1).standard_normal((2, 32, config.d_feat))
    losses = [pretrain_step(model, batch, proj, book, optimizer, settings, np.random.default_rng(5))
              for _ in range(60)]
    assert np.mean(losses[-10:]) < np.mean(losses[:10])
