import logging
import sys
from typing import Callable

from commands import data, diagnostics, heuristics, qa
from heurvidqa.cli import build_cli, dispatch


def route(name: str) -> Callable:
    match name:
        case 'gen-data':
            return data.gen_data
        case 'extract-vocab':
            return data.extract_vocab
        case 'make-prompts':
            return data.make_prompts
        case 'pretrain-prompter':
            return heuristics.pretrain_prompter
        case 'gen-heuristics':
            return heuristics.gen_heuristics
        case 'inspect-heuristics':
            return heuristics.inspect
        case 'train-qa':
            return qa.train_qa
        case 'eval':
            return qa.evaluate
        case 'ablate':
            return qa.ablate
        case 'plot-losses':
            return qa.plot_losses
        case 'grad-check':
            return diagnostics.grad_check
    raise KeyError(f'no command named {name!r}')


cli = build_cli(route)


def main(argv: list | None = None) -> int:
    return dispatch(sys.argv[1:] if argv is None else argv, cli)


if __name__ == '__main__':
    logging.basicConfig(level=logging.INFO, format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    sys.exit(main())
