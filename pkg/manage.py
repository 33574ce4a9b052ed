#!/usr/bin/env python
"""Command-line utility for the DWP laboratory."""
import os
import sys


def main():
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'labproject.settings')
    try:
        import django
        from dwplab.cli import main as execute_from_command_line
    except ImportError as exc:
        raise ImportError(
            "Couldn't import Django or the lab dependencies. Are you sure they're "
            "installed and available on your PYTHONPATH environment variable? Did you "
            "forget to activate a virtual environment?"
        ) from exc
    django.setup()
    execute_from_command_line(args=sys.argv[1:], prog_name=os.path.basename(sys.argv[0]))


if __name__ == '__main__':
    main()
