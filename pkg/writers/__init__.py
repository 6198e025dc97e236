"""Output writers for CSV tables and legacy VTK snapshots."""
