"""Evaluation harness for LLM-based knowledge tracing with optional reasoning traces."""

from __future__ import annotations

__version__ = "0.1.0"
