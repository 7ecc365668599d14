"""JSON device presets shipped with the package."""
