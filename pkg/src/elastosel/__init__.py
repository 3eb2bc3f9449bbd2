"""Suitability classification of ultrasound RF frame pairs for strain imaging."""

__version__ = "0.1.0"
