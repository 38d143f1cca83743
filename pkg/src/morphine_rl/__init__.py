"""Offline dueling double-DQN toolkit for hourly morphine dosing."""

__version__ = "0.1.0"
