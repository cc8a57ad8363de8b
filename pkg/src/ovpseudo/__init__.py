"""Open-vocabulary detection pseudo-labels from a three-step MLLM dialogue,
a contrastive background loss over precomputed embeddings, and AP50
evaluation with crowded / occluded subsets."""

__version__ = "0.1.0"
