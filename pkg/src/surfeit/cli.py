"""``surf-eit`` command line.

Exit codes: 0 success, 1 numerical failure, 2 configuration error.
"""

from __future__ import annotations

import json
import logging
import sys

import click

from . import experiments as ex
from .errors import ConfigError, NumericalFailure

RUNNERS = {
    "forward": ex.run_forward,
    "traces": ex.run_traces,
    "reconstruct": ex.run_reconstruct,
    "topology": ex.run_topology_probe,
}


def _run(name: str, config: str, out, seed, jobs) -> None:
    try:
        cfg = ex.load_config(config, seed=seed)
        if name == "sweep":
            res = ex.run_stability_sweep(cfg, out, jobs)
            summary = {"fits": {k: v.to_dict() for k, v in res.fits.items()}, "verdicts": res.verdicts}
        else:
            summary = RUNNERS[name](cfg, out)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    except NumericalFailure as exc:
        click.echo(f"numerical failure ({type(exc).__name__}): {exc}", err=True)
        sys.exit(1)
    click.echo(json.dumps(summary, indent=1, sort_keys=True, default=float))


def _command(name: str, help_text: str):
    @click.command(name=name, help=help_text)
    @click.option("--config", "config", required=True, type=click.Path(dir_okay=False), help="YAML config file.")
    @click.option("--out", "out", default=None, type=click.Path(file_okay=False), help="Output directory.")
    @click.option("--seed", "seed", default=None, type=int, help="Override the config seed.")
    @click.option("--jobs", "jobs", default=1, show_default=True, type=click.IntRange(min=1),
                  help="Worker processes for sweep rows.")
    def cmd(config, out, seed, jobs):
        _run(name, config, out, seed, jobs)

    return cmd


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool) -> None:
    """Surface EIT stability experiments."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")


for _name, _help in [("forward", "Solve the forward problem and write the DN map."),
                     ("traces", "Compute boundary traces and null-set bases."),
                     ("reconstruct", "Reconstruct the embedded surface from traces."),
                     ("topology", "Classify orientability and Euler characteristic."),
                     ("sweep", "Run a perturbation sweep with scaling-law fits.")]:
    main.add_command(_command(_name, _help))


if __name__ == "__main__":
    main()
