"""Behavioral anomaly detection for router event streams.

Packets and syscalls are abstracted into tokens, embedded, encoded per
window by a small contrastively trained transformer, scored by an isolation
forest fit on benign windows, and monitored online with EMA smoothing.
"""

__version__ = "0.1.0"
