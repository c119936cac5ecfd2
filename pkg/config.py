"""
Configuration for the permutation-based VLAD search toolkit.
Contains default parameters, binary file magics, output locations and logging setup.
"""

import logging
import sys

# Search defaults
DEFAULT_CODEBOOK_SIZE = 64
DEFAULT_M_WHOLE = 4000
DEFAULT_M_BLOCKWISE = 20000
DEFAULT_K_X = 50
DEFAULT_K_Q = 10
DEFAULT_RERANK_C = 1000
DEFAULT_TOP_K = 10
DEFAULT_SEED = 0
DEFAULT_THREADS = 1

# k-means
KMEANS_MAX_ITER = 25

# Binary formats: (magic, version)
DESCRIPTOR_MAGIC = b"PDSC"
DESCRIPTOR_VERSION = 1
CODEBOOK_MAGIC = b"PCBK"
CODEBOOK_VERSION = 1
REFERENCE_MAGIC = b"PREF"
REFERENCE_VERSION = 1
INDEX_MAGIC = b"PIDX"
INDEX_VERSION = 1
STORE_MAGIC = b"PVST"
STORE_VERSION = 1

# Pipeline modes
MODE_STR = "STR"
MODE_RSTR = "rSTR"
MODE_BSTR = "BSTR"
MODE_BSTR_TFIDF = "BSTR_tfidf"
PIPELINE_MODES = (MODE_STR, MODE_RSTR, MODE_BSTR, MODE_BSTR_TFIDF)

# Reference set modes
REF_WHOLE = "whole"
REF_BLOCKWISE = "blockwise"

# Directory paths
RESULTS_DIR = "results"
REPORT_FILENAME = "eval_report.txt"
SWEEP_CSV_FILENAME = "eval_sweep.csv"

LOG_FORMAT = "%(asctime)s.%(msecs)03d [%(levelname)s] %(message)s [%(name)s@%(filename)s:%(lineno)d]"
LOG_DATEFMT = "%Y-%m-%d %H:%M:%S"
CONSOLE_HANDLER = "permsearch-console"
DEBUG_HANDLER = "permsearch-debug"


def setup_logging(verbose: bool = False, debug_fn: str = None, quiet: bool = False) -> None:
    """Console logging on stderr (errors only when quiet), plus an optional DEBUG log file."""
    logger = logging.getLogger()
    logger.setLevel("DEBUG")
    for handler in list(logger.handlers):
        if handler.get_name() in (CONSOLE_HANDLER, DEBUG_HANDLER):
            logger.removeHandler(handler)
            handler.close()

    console = logging.StreamHandler(sys.stderr)
    console.set_name(CONSOLE_HANDLER)
    console.setLevel("DEBUG" if verbose else ("ERROR" if quiet else "WARNING"))
    console.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    logger.addHandler(console)

    if debug_fn:
        formatter = logging.Formatter(LOG_FORMAT, datefmt=LOG_DATEFMT)
        handler = logging.FileHandler(debug_fn)
        handler.set_name(DEBUG_HANDLER)
        handler.setFormatter(formatter)
        logger.addHandler(handler)
        logger.debug("Starting to log")
