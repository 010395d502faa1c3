"""Tests for the ACR preconditioner."""
