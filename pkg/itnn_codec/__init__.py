"""Intra image codec with an iteratively trained neural-network prediction mode."""
