# This file makes the 'optimize' directory a Python package.
