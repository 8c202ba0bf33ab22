import json
import logging
from pathlib import Path

import click
import pandas as pd

from heurvidqa.config import ARTIFACTS, RunConfig, input_path, prepare_run
from heurvidqa.prompter import load_heuristics, load_prompter
from heurvidqa.reasoner import load_reasoner, store_reasoner
from heurvidqa.textproc import load_vocabulary
from heurvidqa.training import (ablation_summary, evaluate as evaluate_reasoner, loss_curve_figure, prepare_clips,
                                run_ablation, run_train_qa, split_videos)
from heurvidqa.videoproc import load_dataset

from .heuristics import load_prompt_sets

logger = logging.getLogger(__name__)


def _write_json(data: dict, path) -> None:
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write('\n')


def _inputs(config: RunConfig) -> tuple:
    dataset = load_dataset(Path(config.data))
    vocabulary = load_vocabulary(input_path(config, 'vocabulary'))
    prompt_sets = load_prompt_sets(config)
    prompt_sizes = (prompt_sets['action'].size, prompt_sets['entity'].size)
    # a no-heuristic run may skip gen-heuristics entirely
    if config.loss.mode == 'none' and not (Path(config.data) / ARTIFACTS['heuristics']).exists():
        heuristics = None
    else:
        heuristics = load_heuristics(input_path(config, 'heuristics'))
    return dataset, vocabulary, prompt_sizes, heuristics


def _report_line(report: dict) -> str:
    by_type = ' '.join(f'{k}={v:.3f}' for k, v in report['accuracy_by_question_type'].items())
    return f'accuracy {report["accuracy_overall"]:.3f} on {report["num_samples"]} questions ({by_type})'


def train_qa(config: RunConfig) -> int:
    dataset, vocabulary, prompt_sizes, heuristics = _inputs(config)
    prompter_path = Path(config.data) / ARTIFACTS['prompter']
    prompter = load_prompter(prompter_path) if prompter_path.exists() else None
    result = run_train_qa(config, dataset, heuristics, prompt_sizes, vocabulary, prompter)
    out = prepare_run('train-qa', config)
    store_reasoner(result.reasoner, out / ARTIFACTS['reasoner'], config.loss)
    result.losses.to_csv(out / ARTIFACTS['losses'], index=False, lineterminator='\n')
    result.predictions.to_csv(out / ARTIFACTS['predictions'], index=False, lineterminator='\n')
    _write_json(result.report, out / ARTIFACTS['report'])
    _write_json(result.train_report, out / ARTIFACTS['train_report'])
    click.echo(f'held-out {_report_line(result.report)}')
    return 0


def evaluate(config: RunConfig) -> int:
    reasoner, _ = load_reasoner(input_path(config, 'reasoner'))
    dataset = load_dataset(Path(config.data))
    vocabulary = load_vocabulary(input_path(config, 'vocabulary'))
    seed = reasoner.meta.get('seed', config.seed)
    heldout = reasoner.meta.get('heldout_videos')
    if heldout is None:
        _, heldout = split_videos(dataset.video_ids, config.train.holdout_fraction, seed)
    heldout = set(heldout)
    samples = [s for s in dataset.samples if s.video_id in heldout]
    clips = prepare_clips(dataset, config.crops, seed)
    report, predictions = evaluate_reasoner(reasoner, samples, clips, vocabulary, seed, config.train.batch_size)
    out = prepare_run('eval', config)
    _write_json(report, out / ARTIFACTS['report'])
    predictions.to_csv(out / ARTIFACTS['predictions'], index=False, lineterminator='\n')
    click.echo(_report_line(report))
    return 0


def ablate(config: RunConfig) -> int:
    dataset, vocabulary, prompt_sizes, heuristics = _inputs(config)
    table = run_ablation(config, dataset, heuristics, prompt_sizes, vocabulary)
    summary = ablation_summary(table)
    out = prepare_run('ablate', config)
    table.to_csv(out / ARTIFACTS['ablation'], index=False, lineterminator='\n')
    summary.to_csv(out / ARTIFACTS['ablation_summary'], index=False, lineterminator='\n')
    click.echo(summary.to_string(index=False, float_format=lambda x: f'{x:.3f}'))
    return 0


def plot_losses(config: RunConfig, log_name: str) -> int:
    loss_log = pd.read_csv(input_path(config, log_name))
    out = prepare_run('plot-losses', config)
    path = out / ARTIFACTS['loss_curve']
    loss_curve_figure(loss_log).write_html(path, include_plotlyjs='cdn')
    click.echo(f'{len(loss_log)} logged steps -> {path}')
    return 0
