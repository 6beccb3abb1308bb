# This file makes the 'app' directory a Python package.

__version__ = "0.3.0"
