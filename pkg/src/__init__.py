"""Unsupervised speech separation by contrastive frame embeddings and modularity clustering."""
