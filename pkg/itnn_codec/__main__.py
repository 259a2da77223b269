"""itnn-codec entry point."""

from __future__ import annotations

from itnn_codec.cli import main

main()
