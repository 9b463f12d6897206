"""Derivative-process laboratory."""
