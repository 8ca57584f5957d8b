"""Simulator for asynchronous, event-driven CDMA backscatter sensor networks.

Modules: ``codes`` (Gold spreading codes), ``phy`` (waveforms, channel,
ADC), ``rx`` (matched-filter demodulation), ``netsim`` (populations and
scenarios), ``metrics`` (error rates, capacity, sweeps) and ``cli``.
"""

__version__ = "0.1.0"
