"""Context-adaptive language models for multi-turn conversational speech."""

__version__ = "0.1.0"
