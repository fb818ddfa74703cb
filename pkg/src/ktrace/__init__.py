"""Knowledge tracing toolkit.

A GRU-based deep knowledge tracer trained from scratch, a logit-probe client
for externally served language models, and the evaluation battery (ROC/AUC,
threshold analysis, learner-profile stage errors, temporal-coherence metrics,
multi-skill mastery heatmaps) that compares them on a shared prediction-dump
schema.
"""

__version__ = "0.1.0"
