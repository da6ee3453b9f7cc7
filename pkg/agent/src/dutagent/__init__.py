"""Reference device-under-test agent for the wattbench monitor.

Connects over TCP, syncs clocks, fetches dataset samples, runs a pluggable
inference callable in a batch loop, and emits labeled events and top-k
results -- all through the documented wire protocol, with no dependency on
the monitor package.
"""

__version__ = "0.1.0"
