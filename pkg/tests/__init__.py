"""Tests for the midway package."""
