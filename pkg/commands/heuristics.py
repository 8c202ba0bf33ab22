import logging
from pathlib import Path

import click

from heurvidqa.cli import inspect_heuristics
from heurvidqa.config import ARTIFACTS, RunConfig, input_path, prepare_run
from heurvidqa.errors import StateError
from heurvidqa.prompter import (BRANCHES, generate_heuristic_store, load_heuristics, load_prompter, store_heuristics,
                                store_prompter)
from heurvidqa.textproc import load_prompt_set, load_vocabulary
from heurvidqa.training import run_pretrain
from heurvidqa.videoproc import load_dataset

logger = logging.getLogger(__name__)


def load_prompt_sets(config: RunConfig) -> dict:
    return {kind: load_prompt_set(input_path(config, f'{kind}_prompts')) for kind in BRANCHES}


def pretrain_prompter(config: RunConfig) -> int:
    dataset = load_dataset(Path(config.data))
    vocabulary = load_vocabulary(input_path(config, 'vocabulary'))
    result = run_pretrain(config, dataset, load_prompt_sets(config), vocabulary)
    if config.train.freeze_prompter:
        result.prompter.freeze()
    out = prepare_run('pretrain-prompter', config)
    store_prompter(result.prompter, out / ARTIFACTS['prompter'])
    result.losses.to_csv(out / ARTIFACTS['pretrain_losses'], index=False, lineterminator='\n')
    final = result.losses.groupby('branch').loss.last().to_dict()
    click.echo(f'prompter {result.prompter.checksum()[:12]} frozen={result.prompter.frozen} '
               f'final loss action {final.get("action", float("nan")):.4f} entity {final.get("entity", float("nan")):.4f}')
    return 0


def gen_heuristics(config: RunConfig) -> int:
    path = Path(config.data) / ARTIFACTS['prompter']
    if not path.exists():
        raise StateError(f'prompter not frozen: no checkpoint at {path}')
    prompter = load_prompter(path)
    prompter.require_frozen()
    dataset = load_dataset(path.parent)
    vocabulary = load_vocabulary(input_path(config, 'vocabulary'))
    settings = config.heuristics
    records = generate_heuristic_store(dataset, load_prompt_sets(config), prompter, vocabulary, config.crops,
                                       config.seed, settings.threshold, settings.top_dump, settings.parallel,
                                       config.train.progress)
    out = prepare_run('gen-heuristics', config)
    store_heuristics(records, out / ARTIFACTS['heuristics'])
    kept = sum(r['kept'] for r in records)
    click.echo(f'{len(records)} heuristic records, {kept} kept at threshold {settings.threshold}')
    return 0


def inspect(config: RunConfig, video_id: str, top_k: int) -> int:
    store = load_heuristics(input_path(config, 'heuristics'))
    click.echo(inspect_heuristics(store, video_id, top_k, config.heuristics.threshold))
    return 0
