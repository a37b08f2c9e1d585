"""Deterministic discrete-event simulation of a cluster on virtual time."""
