"""
Models module initialization.

Domain configuration types (scenario inputs) live in ``schemas``;
computed results and reports live in ``results``.
"""
