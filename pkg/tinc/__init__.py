# -*- coding: utf-8 -*-
"""TINC: a three-plane sharded consortium blockchain and its simulation harness."""

__version__ = "0.1.0"

from .engine import RunResult, Simulation, replay, run_scenario
from .errors import TincException
from .scenario import Scenario, load_scenario, parse_scenario
