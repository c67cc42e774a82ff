"""Shared contracts and utilities for the nuigo pipeline."""
