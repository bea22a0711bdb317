"""Approximate Markov tit-for-tat agents for two-player Markov social dilemmas."""

__version__ = "0.1.0"
