from pathlib import Path
from typing import Optional, Union
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from flowmc.errors import InvalidConfigError
from flowmc.schemas import RunConfig, parse_model


def load_run_config(
    path: Union[str, Path], seed: Optional[int] = None, out_dir: Optional[str] = None
) -> RunConfig:
    """Read a TOML run description; command-line seed/output overrides win"""
    try:
        with open(path, "rb") as handle:
            data = tomllib.load(handle)
    except OSError as e:
        raise InvalidConfigError(f"cannot read config {path}: {e}")
    except tomllib.TOMLDecodeError as e:
        raise InvalidConfigError(f"{path}: {e}")
    if seed is not None:
        data["seed"] = seed
    if out_dir is not None:
        data["out_dir"] = out_dir
    return parse_model(RunConfig, data)
