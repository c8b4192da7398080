"""Bundled JSON configuration presets."""
