"""
Command group and exit-code mapping.

Exit codes: 0 success, 1 usage error, 2 data, configuration or state error.
Each subcommand takes `--key=value` / `--section.key=value` overrides and an
optional `--config=path` JSON file.
"""
import logging
from typing import Callable

import click
import numpy as np

from .config import RunConfig, load_config, parse_value
from .errors import HeurVidQAError
from .prompter import DEFAULT_THRESHOLD, TOP_K, HeuristicDistribution, HeuristicStore

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_ERROR = 0, 1, 2
COMMANDS = {
    'extract-vocab': 'Count lexicon verbs and nouns in the QA corpus and write the vocabulary.',
    'make-prompts': 'Instantiate action and entity prompt templates from the top terms.',
    'gen-data': 'Render a synthetic moving-shapes video QA dataset.',
    'pretrain-prompter': 'Contrastively pretrain the action/entity prompter and freeze it.',
    'gen-heuristics': 'Score every video against the prompt sets with the frozen prompter.',
    'train-qa': 'Train the QA reasoner with prediction and heuristic losses.',
    'eval': 'Evaluate a trained reasoner on its held-out videos.',
    'inspect-heuristics': 'Print the top heuristic words and scores for one video.',
    'grad-check': 'Compare analytic gradients with finite differences per component.',
    'ablate': 'Compare heuristic loss weightings over several seeds.',
    'plot-losses': 'Write an HTML loss curve from a loss log.',
}


def parse_overrides(args: tuple) -> tuple:
    """Split `--key=value` arguments into (config file path or None, {dotted key: value})."""
    path, overrides = None, {}
    for arg in args:
        if not arg.startswith('--') or '=' not in arg:
            raise click.UsageError(f'expected --key=value, got {arg!r}')
        key, raw = arg[2:].split('=', 1)
        if key == 'config':
            path = raw
        else:
            overrides[key] = parse_value(raw)
    return path, overrides


def resolve_config(args: tuple) -> RunConfig:
    path, overrides = parse_overrides(args)
    config = load_config(path, overrides)
    logging.getLogger().setLevel(config.log_level.upper())
    return config


def inspect_heuristics(store: HeuristicStore, video_id: str, top_k: int = TOP_K,
                       threshold: float = DEFAULT_THRESHOLD) -> str:
    lines = []
    for record in store.entries(video_id):
        lines.append(f'{video_id} {record["kind"]}')
        dist = HeuristicDistribution(record['kind'], np.array(record['scores'], dtype=np.float64), video_id,
                                     words=tuple(record.get('words', ())))
        lines.extend(f'  {word} {score:.3f}' for word, score in dist.top(max(top_k, 0)))
        if not record['kept']:
            lines.append(f'  (discarded: max {max(record["scores"]):.2f} < {threshold:.2f})')
    return '\n'.join(lines)


def _command(name: str, route: Callable[[str], Callable]) -> click.Command:
    params = [click.Argument(['overrides'], nargs=-1, type=click.UNPROCESSED)]
    if name == 'inspect-heuristics':
        params = [click.Argument(['video_id']), click.Option(['--top-k', 'top_k'], type=int, default=TOP_K)] + params
    if name == 'plot-losses':
        params = [click.Option(['--log', 'log_name'], default='losses.csv', help='loss CSV inside the data directory')] + params

    def callback(overrides: tuple, **extra) -> int:
        return route(name)(resolve_config(overrides), **extra)

    return click.Command(name, params=params, callback=callback, help=COMMANDS[name],
                         context_settings={'ignore_unknown_options': True})


def build_cli(route: Callable[[str], Callable]) -> click.Group:
    """Group with one command per name in COMMANDS; route(name) returns its `run(config, **extra) -> int`."""
    group = click.Group('heurvidqa', help='Heuristic-boosted video QA pipeline at desk scale.')
    for name in COMMANDS:
        group.add_command(_command(name, route))
    return group


def dispatch(argv: list, group: click.Group) -> int:
    argv = list(argv)
    if not argv:
        click.echo(f'usage: heurvidqa COMMAND [--key=value ...]; commands: {", ".join(COMMANDS)}', err=True)
        return EXIT_USAGE
    try:
        code = group.main(args=argv, prog_name='heurvidqa', standalone_mode=False)
    except click.ClickException as e:
        e.show()
        return EXIT_USAGE
    except click.Abort:
        return EXIT_USAGE
    except HeurVidQAError as e:
        logger.error(f'{type(e).__name__}: {e}')
        click.echo(f'error: {e}', err=True)
        return EXIT_ERROR
    return EXIT_OK if code is None else int(code)
