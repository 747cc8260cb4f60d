"""Experiment harness: configs, training/evaluation engine, ablation grids, gradient checks."""
