"""
Test package for ckmm.
"""
