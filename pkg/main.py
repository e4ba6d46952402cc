# -*- coding: utf-8 -*-
import sys

from config_loader import load_config
from tinc.cli import main
from tinc.errors import ConfigError

try:
    config = load_config()
except ConfigError as e:
    print(f"error: {e}", file=sys.stderr)
    sys.exit(2)

sys.exit(main(sys.argv[1:], config))
