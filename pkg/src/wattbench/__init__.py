"""wattbench: a bench harness for inference latency, power draw and energy
per inference on devices under test.

The monitor half samples a programmable power supply over Modbus-RTU (or an
in-process simulator) and hosts the agent protocol; the analysis half aligns
power samples with labeled inference intervals and predicts energy use at
arbitrary inference rates.
"""

__version__ = "0.1.0"
