"""
Core utilities for the SwinFi CLI.

Shared functionality used by the command-line front end:
- Configuration management (yaml tree, preset profiles, overrides)
- Run state tracking per output directory
- Session logging (text log plus structured metrics)
- UI components (Rich-based terminal output)
"""

__all__ = ['Config', 'RunState', 'SessionLogger', 'get_logger', 'console', 'show_table', 'show_status']
