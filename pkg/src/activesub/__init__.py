"""Query-efficient substitute training for transfer-based black-box attacks."""

__version__ = "0.1.0"
