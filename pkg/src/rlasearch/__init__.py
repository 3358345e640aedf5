"""Temporary minimal init for incremental build."""
