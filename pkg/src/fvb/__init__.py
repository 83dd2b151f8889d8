"""Hybrid vision encoder kernels, reparameterization and token/latency budgeting."""
