"""Workbench helpers."""
