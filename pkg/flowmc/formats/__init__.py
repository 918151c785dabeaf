from flowmc.formats.checkpoint import load_flow, read_checkpoint, save_flow, write_checkpoint
from flowmc.formats.config_file import load_run_config
from flowmc.formats.pfm import read_pfm, write_pfm
from flowmc.formats.pgm import read_pgm, write_pgm
from flowmc.formats.reports import write_key_values, write_report_csv, write_rows

__all__ = [
    "load_flow",
    "load_run_config",
    "read_checkpoint",
    "read_pfm",
    "read_pgm",
    "save_flow",
    "write_checkpoint",
    "write_key_values",
    "write_pfm",
    "write_pgm",
    "write_report_csv",
    "write_rows",
]
