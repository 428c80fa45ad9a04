"""Future-aware speculative decoding on a tiny float64 transformer."""
