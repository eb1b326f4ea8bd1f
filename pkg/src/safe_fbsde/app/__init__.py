"""Task definitions, metrics, configuration and the command-line interface."""
