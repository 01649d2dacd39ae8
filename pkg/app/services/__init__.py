"""Service namespace exports."""
