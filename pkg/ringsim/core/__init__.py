"""
Core module initialization.

This module contains core components including settings, physical
constants and the exception hierarchy.
"""
