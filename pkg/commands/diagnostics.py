import click

from heurvidqa.cli import EXIT_ERROR, EXIT_OK
from heurvidqa.config import ARTIFACTS, RunConfig, prepare_run
from heurvidqa.training import grad_check_report


def grad_check(config: RunConfig) -> int:
    report = grad_check_report(config.seed)
    out = prepare_run('grad-check', config)
    report.to_csv(out / ARTIFACTS['grad_check'], index=False, lineterminator='\n')
    for row in report.itertuples():
        status = 'ok' if row.passed else 'FAILED'
        click.echo(f'{row.component:<24} {row.max_rel_error:.3e}  threshold {row.threshold:.0e}  {status}')
    return EXIT_OK if report.passed.all() else EXIT_ERROR
