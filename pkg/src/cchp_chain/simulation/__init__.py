"""Deterministic discrete-event simulation."""
