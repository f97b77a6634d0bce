"""Parallel execution of independent scenario runs."""
