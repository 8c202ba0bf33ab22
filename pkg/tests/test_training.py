import logging
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from heurvidqa.config import load_config
from heurvidqa.errors import ArgumentError, DataError, ShapeError
from heurvidqa.prompter import HeuristicStore, Prompter
from heurvidqa.reasoner import LossConfig
from heurvidqa.substrate import Tensor
from heurvidqa.training import (ABLATION_SETTINGS, LOSS_COLUMNS, AdamW, OptimizerState, Schedule, _batches,
                                ablation_summary, adamw_step, check_coverage, clip_grad_norm, evaluate,
                                grad_check_report, heuristic_targets, loss_curve_figure, lr_at, prepare_clips,
                                run_ablation, run_pretrain, run_train_qa, sized_text_config, split_rngs, split_videos)
from heurvidqa.textproc import build_vocabulary
from heurvidqa.videoproc import generate_synth_dataset

from conftest import TINY_OVERRIDES


def label_store(dataset, drop: tuple = ()) -> HeuristicStore:
    """Heuristics that lean towards each video's true labels."""
    records = {}
    for video_id, (entity, action) in dataset.labels().items():
        if video_id in drop:
            continue
        for kind, word, words in (('action', action, ('advance', 'retreat')), ('entity', entity, ('ball', 'box'))):
            scores = [0.8 if w == word else 0.2 for w in words]
            records[(video_id, kind)] = {'video_id': video_id, 'kind': kind, 'scores': scores, 'kept': True}
    return HeuristicStore(records)


# optimizer and schedule

def test_adam_first_step_moves_by_lr():
    param = Tensor(np.array([1.0]), requires_grad=True)
    adamw_step({'w': param}, {'w': np.array([2.0])}, OptimizerState(lr=0.1, weight_decay=0.0))
    assert param.data[0] == pytest.approx(0.9, abs=1e-6)


def test_weight_decay_is_decoupled():
    param = Tensor(np.array([1.0]), requires_grad=True)
    adamw_step({'w': param}, {'w': np.array([0.0])}, OptimizerState(lr=0.1, weight_decay=0.01))
    assert param.data[0] == pytest.approx(0.999)


def test_frozen_parameters_are_untouched():
    param = Tensor(np.array([1.0, 2.0]))
    adamw_step({'w': param}, {}, OptimizerState(lr=0.1))
    np.testing.assert_array_equal(param.data, [1.0, 2.0])


def test_gradient_checks():
    param = Tensor(np.array([1.0]), requires_grad=True)
    with pytest.raises(ArgumentError):
        adamw_step({'w': param}, {}, OptimizerState())
    with pytest.raises(ShapeError):
        adamw_step({'w': param}, {'w': np.zeros(2)}, OptimizerState())


def test_clip_grad_norm():
    clipped, norm = clip_grad_norm({'a': np.array([3.0]), 'b': np.array([4.0])}, 1.0)
    assert norm == pytest.approx(5.0)
    np.testing.assert_allclose(clipped['a'], [0.6])
    np.testing.assert_allclose(clipped['b'], [0.8])
    unchanged, _ = clip_grad_norm({'a': np.array([0.3])}, 1.0)
    np.testing.assert_array_equal(unchanged['a'], [0.3])


def test_adamw_wrapper_clips_before_stepping():
    param = Tensor(np.array([0.0, 0.0]), requires_grad=True)
    optimizer = AdamW(OptimizerState(lr=0.1, weight_decay=0.0), max_grad_norm=1.0)
    optimizer.step({'w': param}, {'w': np.array([30.0, 40.0])})
    assert optimizer.last_norm == pytest.approx(50.0)
    np.testing.assert_allclose(param.data, [-0.1, -0.1], atol=1e-6)


def test_linear_decay():
    schedule = Schedule(1.0, 10)
    assert lr_at(0, schedule) == 1.0
    assert schedule.lr_at(5) == pytest.approx(0.5)
    assert lr_at(10, schedule) == 0.0


def test_lr_past_the_end(caplog):
    with caplog.at_level(logging.WARNING):
        assert lr_at(11, Schedule(1.0, 10)) == 0.0
    assert 'past the schedule end' in caplog.text


def test_schedule_arguments():
    with pytest.raises(ArgumentError):
        lr_at(-1, Schedule())
    with pytest.raises(ArgumentError):
        Schedule(total_steps=0)


def test_split_rngs_are_reproducible_and_independent():
    first, second = split_rngs(7), split_rngs(7)
    assert first['shuffle'].integers(1 << 30) == second['shuffle'].integers(1 << 30)
    a, b = split_rngs(7), split_rngs(7)
    a['dropout'].random(100)
    assert a['shuffle'].integers(1 << 30) == b['shuffle'].integers(1 << 30)


def test_trailing_single_joins_previous_batch():
    assert [b.tolist() for b in _batches(np.arange(5), 2)] == [[0, 1], [2, 3, 4]]
    assert [b.tolist() for b in _batches(np.arange(1), 2)] == [[0]]


# data preparation

def test_split_videos():
    ids = [f'v{i}' for i in range(8)]
    train, heldout = split_videos(ids, 0.25, 3)
    assert len(heldout) == 2
    assert sorted(train + heldout) == sorted(ids)
    assert train == sorted(train) and heldout == sorted(heldout)
    assert split_videos(ids, 0.25, 3) == (train, heldout)
    assert split_videos(ids, 0.0, 3) == (sorted(ids), [])


def test_split_keeps_one_video_each_side():
    train, heldout = split_videos(['a', 'b'], 0.9, 0)
    assert len(train) == 1 and len(heldout) == 1


def test_prepare_clips(tiny_dataset, run_config):
    clips = prepare_clips(tiny_dataset, run_config.crops, 0)
    assert list(clips) == sorted(tiny_dataset.video_ids)
    assert clips['video00000'].shape == (3, 2, 16, 16)
    np.testing.assert_array_equal(prepare_clips(tiny_dataset, run_config.crops, 0)['video00003'], clips['video00003'])


def test_heuristic_targets(tiny_dataset):
    samples = tiny_dataset.samples[:6]
    store = label_store(tiny_dataset, drop=('video00001',))
    targets, mask = heuristic_targets(samples, store, 'action', 2)
    assert targets.shape == (6, 1, 2)
    np.testing.assert_array_equal(mask, [1, 1, 1, 0, 0, 0])
    np.testing.assert_allclose(targets[3, 0], [0.5, 0.5])
    _, empty = heuristic_targets(samples, None, 'entity', 2)
    assert not empty.any()


def test_heuristic_target_size_mismatch(tiny_dataset):
    with pytest.raises(DataError):
        heuristic_targets(tiny_dataset.samples[:1], label_store(tiny_dataset), 'action', 3)


def test_coverage(tiny_dataset, caplog):
    store = label_store(tiny_dataset, drop=('video00001',))
    with caplog.at_level(logging.WARNING):
        assert check_coverage(tiny_dataset.video_ids, store, 0.2) == pytest.approx(1 / 8)
    assert 'no heuristics' in caplog.text
    with pytest.raises(DataError):
        check_coverage(tiny_dataset.video_ids, store, 0.1)
    with pytest.raises(DataError):
        check_coverage(tiny_dataset.video_ids, None, 0.5)


# reports

def test_ablation_summary_order():
    table = pd.DataFrame({
        'setting': ['gated', 'none', 'gated', 'none'],
        'seed': [0, 0, 1, 1],
        'accuracy': [0.8, 0.5, 0.6, 0.7],
    })
    summary = ablation_summary(table)
    assert summary.setting.tolist() == ['none', 'gated']
    assert summary.accuracy.tolist() == pytest.approx([0.6, 0.7])
    assert summary.seeds.tolist() == [2, 2]


def test_loss_curves():
    pretrain_log = pd.DataFrame({'step': [0, 1, 2, 3], 'branch': ['action', 'entity'] * 2, 'loss': [1.0, 0.9, 0.8, 0.7]})
    assert [trace.name for trace in loss_curve_figure(pretrain_log).data] == ['action loss', 'entity loss']
    qa_log = pd.DataFrame([[0, 1e-3, 1.0, 0.7, 0.2, 0.1, 0.5]], columns=LOSS_COLUMNS)
    assert [trace.name for trace in loss_curve_figure(qa_log).data] == LOSS_COLUMNS[2:]


# end-to-end runs

@pytest.mark.slow
def test_pretraining_is_reproducible(run_config, tiny_dataset, prompt_sets, vocabulary):
    first = run_pretrain(run_config, tiny_dataset, prompt_sets, vocabulary)
    second = run_pretrain(run_config, tiny_dataset, prompt_sets, vocabulary)
    assert first.losses.branch.tolist() == ['action', 'entity'] * 2
    assert first.losses.lr.iloc[0] == run_config.train.lr
    pd.testing.assert_frame_equal(first.losses, second.losses)
    assert first.prompter.checksum() == second.prompter.checksum()


@pytest.mark.slow
def test_qa_training(run_config, tiny_dataset, vocabulary):
    result = run_train_qa(run_config, tiny_dataset, label_store(tiny_dataset), (2, 2), vocabulary)
    assert list(result.losses.columns) == LOSS_COLUMNS
    assert np.all(np.isfinite(result.losses.loss))
    assert result.report['num_samples'] == 2 * 3
    assert set(result.report['accuracy_by_question_type']) == {'entity', 'action', 'composition'}
    assert set(result.predictions.video_id) == set(result.reasoner.meta['heldout_videos'])
    again = run_train_qa(run_config, tiny_dataset, label_store(tiny_dataset), (2, 2), vocabulary)
    pd.testing.assert_frame_equal(result.losses, again.losses)


@pytest.mark.slow
def test_gate_at_start_matches_fixed_weighting(run_config, tiny_dataset, vocabulary):
    store = label_store(tiny_dataset)
    fixed = run_train_qa(replace(run_config, loss=LossConfig(mode='fixed', alpha=0.5)), tiny_dataset, store, (2, 2),
                         vocabulary)
    gated = run_train_qa(replace(run_config, loss=LossConfig(mode='gated')), tiny_dataset, store, (2, 2), vocabulary)
    assert gated.losses.loss.iloc[0] == pytest.approx(fixed.losses.loss.iloc[0], rel=1e-9)
    assert gated.losses.gate_mean.iloc[0] == pytest.approx(0.5)


@pytest.mark.slow
def test_qa_training_leaves_prompter_alone(run_config, tiny_dataset, vocabulary):
    prompter = Prompter.create(run_config.video, sized_text_config(run_config, vocabulary), run_config.prompter,
                               np.random.default_rng(0))
    prompter.freeze()
    checksum = prompter.checksum()
    run_train_qa(run_config, tiny_dataset, label_store(tiny_dataset), (2, 2), vocabulary, prompter)
    assert prompter.checksum() == checksum


@pytest.mark.slow
def test_training_without_heuristics(run_config, tiny_dataset, vocabulary):
    with pytest.raises(DataError):
        run_train_qa(run_config, tiny_dataset, None, (2, 2), vocabulary)
    result = run_train_qa(replace(run_config, loss=LossConfig(mode='none')), tiny_dataset, None, (2, 2), vocabulary)
    np.testing.assert_allclose(result.losses.loss, result.losses.loss_pred, rtol=1e-12)


@pytest.mark.slow
def test_evaluate_reloaded_split(run_config, tiny_dataset, vocabulary):
    result = run_train_qa(run_config, tiny_dataset, label_store(tiny_dataset), (2, 2), vocabulary)
    heldout = set(result.reasoner.meta['heldout_videos'])
    samples = [s for s in tiny_dataset.samples if s.video_id in heldout]
    report, predictions = evaluate(result.reasoner, samples, prepare_clips(tiny_dataset, run_config.crops, 0),
                                   vocabulary)
    assert report['accuracy_overall'] == result.report['accuracy_overall']
    pd.testing.assert_frame_equal(predictions, result.predictions)


@pytest.mark.slow
def test_ablation_rows(run_config, tiny_dataset, vocabulary):
    settings = {name: ABLATION_SETTINGS[name] for name in ('none', 'gated')}
    table = run_ablation(run_config, tiny_dataset, label_store(tiny_dataset), (2, 2), vocabulary, seeds=(0, 1),
                         settings=settings)
    assert table[['setting', 'seed']].values.tolist() == [['none', 0], ['gated', 0], ['none', 1], ['gated', 1]]
    assert table.accuracy.between(0, 1).all()


SMALL_MODEL = {**TINY_OVERRIDES, 'video.dim': 16, 'text.dim': 16, 'crops.num_frames': 4, 'train.batch_size': 8,
               'train.lr': 3e-3}


def dataset_vocabulary(dataset):
    return build_vocabulary([s.question for s in dataset.samples] + [c for s in dataset.samples for c in s.candidates])


@pytest.mark.slow
def test_small_set_is_memorized():
    config = load_config(overrides={**SMALL_MODEL, 'loss.mode': 'none', 'train.epochs': 200,
                                    'train.weight_decay': 0.0, 'train.holdout_fraction': 0.0})
    dataset = generate_synth_dataset(22, 2, 2, frame_hw=16, num_frames=4, seed=0, parallel=False)
    dataset = replace(dataset, samples=dataset.samples[:64])
    result = run_train_qa(config, dataset, None, (2, 2), dataset_vocabulary(dataset))
    assert result.train_report['num_samples'] == 64
    assert result.train_report['accuracy_overall'] >= 0.95


@pytest.mark.slow
def test_gated_supervision_is_not_worse_over_seeds():
    config = load_config(overrides={**SMALL_MODEL, 'train.epochs': 30})
    dataset = generate_synth_dataset(24, 2, 2, frame_hw=16, num_frames=4, seed=0, parallel=False)
    settings = {name: ABLATION_SETTINGS[name] for name in ('none', 'fixed', 'gated')}
    table = run_ablation(config, dataset, label_store(dataset), (2, 2), dataset_vocabulary(dataset),
                         seeds=(0, 1, 2, 3, 4), settings=settings)
    summary = ablation_summary(table).set_index('setting')
    assert summary.seeds.tolist() == [5, 5, 5]
    accuracy = summary.accuracy
    assert accuracy['gated'] >= accuracy['none']
    assert accuracy['gated'] >= accuracy['fixed'] - 0.005


@pytest.mark.slow
def test_gradient_report_passes():
    report = grad_check_report(0)
    assert list(report.columns) == ['component', 'max_rel_error', 'threshold', 'passed']
    assert report.passed.all(), report.to_string()
