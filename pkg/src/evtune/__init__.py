"""Event-camera bias tuning toolkit."""
