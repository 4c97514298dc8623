"""Tests for the space-time EVMFE solver."""
