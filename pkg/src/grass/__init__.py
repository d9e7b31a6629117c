"""Gradient-guided sampling for self-supervised contrastive pretraining."""
