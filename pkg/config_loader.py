# -*- coding: utf-8 -*-
from json import load
from os import environ

from dotenv import dotenv_values

from tinc.errors import ConfigError

bools = {
    "true": True,
    "false": False,
    "none": None
}

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")

DEFAULT_CONFIG = {
    "TINC_LOG": "WARNING",
    "TINC_LOG_FILE": "",
    "TINC_OUT_DIR": "./results",
    "TINC_TRACE": False,

    #############
    ### Sweep ###
    #############
    "TINC_SWEEP_WORKERS": 0,

    ######################
    ### DDID benchmark ###
    ######################
    "TINC_BENCH_OPS": 1000,
    "TINC_BENCH_SEED": 0,
    "TINC_BENCH_THREADS": "1,2,4,8",
}


def load_config():

    CONFIG = dict(DEFAULT_CONFIG)

    for cfg in CONFIG:
        try:
            CONFIG[cfg] = environ[cfg]
        except KeyError:
            continue

    try:
        with open("config.json") as f:
            CONFIG.update(load(f))
    except FileNotFoundError:
        pass
    except ValueError as e:
        raise ConfigError(f"config.json is not valid JSON: {e}", "config.json")

    CONFIG.update({k: v for k, v in dotenv_values().items() if k in DEFAULT_CONFIG and v is not None})

    # Convert strings requiring an integer.
    for i in [
        "TINC_SWEEP_WORKERS",
        "TINC_BENCH_OPS",
        "TINC_BENCH_SEED",
    ]:
        try:
            CONFIG[i] = int(CONFIG[i])
        except (TypeError, ValueError):
            raise ConfigError(f"invalid configuration {i}: {CONFIG[i]!r}", i)

    # Convert strings requiring a boolean/null value.
    for i in [
        "TINC_TRACE",
    ]:
        if CONFIG[i] in (True, False, None):
            continue

        try:
            CONFIG[i] = bools[str(CONFIG[i]).lower()]
        except KeyError:
            raise ConfigError(f"invalid configuration {i}: {CONFIG[i]!r}", i)

    try:
        CONFIG["TINC_BENCH_THREADS"] = [int(t) for t in str(CONFIG["TINC_BENCH_THREADS"]).split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"invalid configuration TINC_BENCH_THREADS: {CONFIG['TINC_BENCH_THREADS']!r}",
                          "TINC_BENCH_THREADS")

    CONFIG["TINC_LOG"] = str(CONFIG["TINC_LOG"]).upper()
    if CONFIG["TINC_LOG"] not in LOG_LEVELS:
        raise ConfigError(f"invalid configuration TINC_LOG: {CONFIG['TINC_LOG']!r}", "TINC_LOG")

    if CONFIG["TINC_SWEEP_WORKERS"] < 0:
        CONFIG["TINC_SWEEP_WORKERS"] = 0

    if CONFIG["TINC_BENCH_OPS"] < 1:
        CONFIG["TINC_BENCH_OPS"] = 1

    return CONFIG
