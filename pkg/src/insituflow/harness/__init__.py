"""Synthetic workloads, benchmark scenarios and the command line."""
