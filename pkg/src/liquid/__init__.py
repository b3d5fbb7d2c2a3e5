"""Supervised checkpoint/restore migration for long-running services.

The daemon (``liquidd``) outlives the service it manages; ``liquidctl``
drives migrations, fault injection and benchmarks against daemons.
"""

__version__ = "0.1.0"
