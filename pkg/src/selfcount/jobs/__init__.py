"""Command-line job entrypoints for selfcount."""
