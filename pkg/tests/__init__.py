"""
Test suite for the low-rank compression toolkit.
"""
