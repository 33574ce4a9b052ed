"""
Command-line group: `python manage.py <command> --config run.json`.

Global options come before the command name:

    --config PATH        JSON run configuration
    --set PATH=VALUE     override one configuration value (repeatable)
    --jobs N             worker threads for attacks
    --output-dir DIR     where artifacts go (wins over config and DWP_OUTPUT_DIR)
    --progress           show progress bars
"""

import json
import logging
import os
from dataclasses import replace

import click
import django
from django.apps import apps
from django.conf import settings

from .commands import COMMANDS, dispatch
from .config import default_output_dir, load_config, parse_config
from .exceptions import LabError
from .export import json_bytes, write_bytes

logger = logging.getLogger(__name__)


def error_record(exc):
    record = {'error': type(exc).__name__, 'message': str(exc)}
    if isinstance(exc, LabError):
        record.update(exc.context())
    return record


def report_error(exc, output_dir):
    """Print the JSON error record to stderr and leave a copy in output_dir."""
    record = error_record(exc)
    click.echo(json.dumps(record, sort_keys=True), err=True)
    try:
        write_bytes(os.path.join(output_dir, 'error.json'), json_bytes(record))
    except OSError:
        logger.warning("Could not write error.json to %s", output_dir)
    return record


class Options:
    def __init__(self, config_path, overrides, jobs, output_dir, progress):
        self.config_path = config_path
        self.overrides = overrides
        self.jobs = jobs
        self.output_dir = output_dir
        self.progress = progress

    def resolve(self):
        if self.config_path:
            config = load_config(self.config_path, self.overrides)
        else:
            config = parse_config(b'', self.overrides)
        if self.output_dir:
            config = replace(config, output_dir=self.output_dir)
        return config


@click.group()
@click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None,
              help='JSON run configuration.')
@click.option('--set', 'overrides', multiple=True, metavar='PATH=VALUE',
              help='Override one configuration value, e.g. attack.epsilon=0.05.')
@click.option('--jobs', type=click.IntRange(min=1), default=None, help='Worker threads for attacks.')
@click.option('--output-dir', type=click.Path(file_okay=False), default=None, help='Artifact directory.')
@click.option('--progress/--no-progress', default=False, help='Show progress bars.')
@click.pass_context
def main(ctx, config_path, overrides, jobs, output_dir, progress):
    """Targeted transfer-attack laboratory."""
    if not apps.ready:
        os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'labproject.settings')
        django.setup()
    ctx.obj = Options(config_path, overrides, jobs or settings.JOBS, output_dir, progress)


def _register(name, handler):
    @main.command(name=name, help=handler.__doc__)
    @click.pass_obj
    def command(options):
        output_dir = options.output_dir or default_output_dir()
        try:
            config = options.resolve()
            output_dir = config.output_dir
            manifest = dispatch(name, config, jobs=options.jobs, progress=options.progress)
        except (LabError, OSError) as exc:
            logger.error("%s failed: %s", name, exc)
            report_error(exc, output_dir)
            raise click.exceptions.Exit(1)
        click.echo(os.path.join(config.output_dir, name, 'manifest.json'))
        return manifest

    return command


for _name, _handler in COMMANDS.items():
    _register(_name, _handler)
