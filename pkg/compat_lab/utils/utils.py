import logging
import os
import warnings
from pathlib import Path
from typing import Callable, Mapping, Sequence

import rich
import rich.syntax
import rich.tree
from omegaconf import DictConfig, OmegaConf
from pytorch_lightning.utilities import rank_zero_only

from compat_lab.errors import ConfigError


def get_logger(name=__name__) -> logging.Logger:
    """Initializes a python logger whose levels only fire on rank zero."""

    logger = logging.getLogger(name)

    # this ensures all logging levels get marked with the rank zero decorator
    # otherwise logs would get multiplied when the runner is launched under a multi-process launcher
    for level in ("debug", "info", "warning", "error", "exception", "fatal", "critical"):
        setattr(logger, level, rank_zero_only(getattr(logger, level)))

    return logger


_REQUIRED = object()


def config_value(cfg: Mapping, key: str, kind: Callable = float, default=_REQUIRED, section: str = ""):
    """cfg[key] coerced with `kind`. A missing (or null) required key and a value `kind`
    rejects both raise ConfigError naming the key."""
    name = f"{section}.{key}" if section else key
    value = cfg.get(key) if cfg is not None else None
    if value is None:
        if default is _REQUIRED:
            raise ConfigError(f"{name} is required")
        return default
    try:
        return kind(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{name} must be {getattr(kind, '__name__', kind)}, got {value!r}") from e


def config_list(cfg: Mapping, key: str, kind: Callable = float, section: str = "") -> tuple:
    """Required sequence under cfg[key], each element coerced with `kind`."""
    name = f"{section}.{key}" if section else key
    values = cfg.get(key) if cfg is not None else None
    if values is None or isinstance(values, (str, bytes)):
        raise ConfigError(f"{name} must be a list, got {values!r}")
    try:
        return tuple(kind(v) for v in values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{name} must be a list of {getattr(kind, '__name__', kind)}, got {values!r}") from e


def resolve_threads(threads) -> int:
    if threads in (None, "auto"):
        return os.cpu_count() or 1
    threads = config_value({"threads": threads}, "threads", int)
    if threads < 1:
        raise ConfigError(f"threads must be positive or 'auto', got {threads}")
    return threads


def extras(config: DictConfig) -> None:
    """A couple of optional utilities, controlled by main config file:
    - disabling warnings
    - verifying experiment name is set when running in experiment mode
    - forcing debug friendly configuration
    - resolving `threads=auto` into a worker count
    Modifies DictConfig in place.
    Args:
        config (DictConfig): Configuration composed by Hydra.
    """

    log = get_logger(__name__)

    # disable python warnings if <config.ignore_warnings=True>
    if config.get("ignore_warnings"):
        log.info("Disabling python warnings! <config.ignore_warnings=True>")
        warnings.filterwarnings("ignore")

    # verify experiment name is set when running in experiment mode
    if config.get("experiment_mode") and OmegaConf.is_missing(config, "experiment_name"):
        raise ConfigError("Running in experiment mode without the experiment name specified! "
                          "Use `python run.py mode=exp experiment_name=my_run`")

    # force debugger friendly configuration if <config.debug_mode=True>
    # debuggers don't like thread pools
    if config.get("debug_mode") and config.get("threads", 1) != 1:
        log.info("Forcing debugger friendly configuration! <config.debug_mode=True>")
        config.threads = 1

    if config.get("threads", 1) == "auto":
        config.threads = resolve_threads("auto")
        log.info(f"Resolved <threads=auto> to {config.threads} workers")


@rank_zero_only
def print_config(
    config: DictConfig,
    fields: Sequence[str] = (
        "command",
        "spectrum",
        "instance",
        "trajectory",
        "bounds",
        "experiment_name",
        "seed",
        "threads",
    ),
    resolve: bool = True,
    output_dir=None,
) -> None:
    """Prints content of DictConfig using Rich library and its tree structure.
    Args:
        config (DictConfig): Configuration composed by Hydra.
        fields (Sequence[str], optional): Determines which main fields from config will
        be printed and in what order.
        resolve (bool, optional): Whether to resolve reference fields of DictConfig.
        output_dir: if given, the tree is also written to `config_tree.txt` there.
    """

    style = "dim"
    tree = rich.tree.Tree("CONFIG", style=style, guide_style=style)

    for field in fields:
        branch = tree.add(field, style=style, guide_style=style)

        config_section = config.get(field)
        branch_content = str(config_section)
        if isinstance(config_section, DictConfig):
            branch_content = OmegaConf.to_yaml(config_section, resolve=resolve)

        branch.add(rich.syntax.Syntax(branch_content, "yaml"))

    rich.print(tree)

    if output_dir is not None:
        Path(output_dir).mkdir(parents=True, exist_ok=True)
        with open(Path(output_dir) / "config_tree.txt", "w") as fp:
            rich.print(tree, file=fp)
