"""Deterministic offline providers for tests, CI and desk-scale runs."""

from .provider import StubProvider

__all__ = ["StubProvider"]
