"""Test fixtures for speechlm-serve tests."""
