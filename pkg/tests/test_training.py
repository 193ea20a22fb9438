import csv
import math

import numpy as np
import pytest

from src.bestrq import MaskSettings
from src.checkpoint import load_checkpoint
from src.encoder import preset
from src.errors import ContractError, FeatureSourceError
from src.features import FeatureSource, SyntheticSpec
from src.mixers import MixerConfig, MixerKind
from src.tensorcore import read_container, write_container
from src.training import BatchSchedule, PretrainRunner, TrainSettings, TrainingResult, pretrain
from tests.conftest import small_encoder

SOURCE_SPEC = "n=6,len=16..32,d=4"


def _runner(steps=6, kind=MixerKind.SUMMARYMIXING, **settings):
    values = dict(steps=steps, lr=1e-2, warmup_steps=2, frame_cap=64, log_every=2, seed=3)
    values.update(settings)
    source = FeatureSource.synthetic(SyntheticSpec.parse(SOURCE_SPEC, seed=3))
    mask = MaskSettings(start_prob=0.2, span_length=2, vocab=8, d_code=4)
    return PretrainRunner(small_encoder(kind), mask, TrainSettings(**values), source)


def _read_log(path):
    with open(path, newline="", encoding="utf-8") as handle:
        return list(csv.reader(handle))


def test_loss_log_has_one_row_per_step(tmp_path):
    result = pretrain(_runner(), out_dir=tmp_path, config_echo={"seed": "3"})
    rows = _read_log(result.loss_log_path)
    assert rows[0] == ["step", "loss"]
    assert [int(r[0]) for r in rows[1:]] == list(range(6))
    assert [float(r[1]) for r in rows[1:]] == result.losses
    assert all(math.isfinite(loss) for loss in result.losses)
    assert result.checkpoint_path.name == "checkpoint_final.brqc"


def test_same_seed_same_losses():
    assert pretrain(_runner()).losses == pretrain(_runner()).losses


@pytest.mark.parametrize("kind", [MixerKind.MAMBA, MixerKind.HYPERMIXING])
def test_resume_matches_uninterrupted_run(tmp_path, kind):
    full = pretrain(_runner(kind=kind, checkpoint_every=3), out_dir=tmp_path / "full")
    checkpoint = tmp_path / "full" / "checkpoint_000003.brqc"
    resumed = pretrain(_runner(kind=kind), out_dir=tmp_path / "resumed", resume=str(checkpoint))
    assert resumed.first_step == 3
    assert resumed.losses == full.losses[3:]
    rows = _read_log(resumed.loss_log_path)
    assert [int(r[0]) for r in rows[1:]] == [3, 4, 5]


def test_resume_at_final_step_runs_nothing(tmp_path):
    full = pretrain(_runner(steps=2), out_dir=tmp_path)
    again = pretrain(_runner(steps=2), resume=str(full.checkpoint_path))
    assert again.losses == []


def test_checkpoint_round_trip(tmp_path):
    runner = _runner(steps=2)
    result = pretrain(runner, out_dir=tmp_path, config_echo={"mixer": "summarymixing"})
    checkpoint = load_checkpoint(result.checkpoint_path)
    assert checkpoint.step == 2
    assert checkpoint.config == {"mixer": "summarymixing"}
    assert checkpoint.projection.checksum() == runner.projection.checksum()
    for name, array in runner.model.state_arrays().items():
        assert np.array_equal(checkpoint.model[name], array)
    assert set(checkpoint.optimizer) == set(runner.optimizer.state_arrays())


def test_tampered_codebook_detected(tmp_path):
    result = pretrain(_runner(steps=1), out_dir=tmp_path)
    tensors, meta = read_container(result.checkpoint_path)
    tensors["frozen.codebook"] = tensors["frozen.codebook"] * 2.0
    tampered = tmp_path / "tampered.brqc"
    write_container(tampered, tensors, meta=meta)
    with pytest.raises(FeatureSourceError):
        load_checkpoint(tampered)


def test_schedule_is_a_permutation_per_epoch():
    batches = [np.full((1, 4, 1), i) for i in range(5)]
    schedule = BatchSchedule(batches, seed=1)
    first_epoch = sorted(int(schedule.batch_for_step(s)[0, 0, 0]) for s in range(5))
    assert first_epoch == list(range(5))
    replay = BatchSchedule(batches, seed=1)
    assert all(replay.batch_for_step(s) is schedule.batch_for_step(s) for s in (7, 2, 12))


def test_schedule_needs_batches():
    with pytest.raises(ContractError):
        BatchSchedule([], seed=0)


def test_feature_width_must_match_encoder():
    source = FeatureSource.synthetic(SyntheticSpec.parse("n=2,len=16,d=5"))
    with pytest.raises(ContractError):
        PretrainRunner(small_encoder(), MaskSettings(vocab=8, d_code=4), TrainSettings(steps=1), source)


def test_mean_loss_window():
    result = TrainingResult(losses=[4.0, 2.0, 3.0], first_step=10, checkpoint_path=None, loss_log_path=None)
    assert result.mean_loss(11, 13) == 2.5
    with pytest.raises(ContractError):
        result.mean_loss(0, 5)


@pytest.mark.slow
@pytest.mark.parametrize("kind", list(MixerKind))
def test_desk_pretraining_beats_chance(kind):
    config = preset("desk", mixer=MixerConfig(kind=kind))
    source = FeatureSource.synthetic(SyntheticSpec.parse("n=64,len=400..800,d=80"))
    runner = PretrainRunner(config, MaskSettings(), TrainSettings(steps=1000), source)
    result = pretrain(runner)
    assert result.mean_loss(900, 1000) < math.log(512) - 0.5
