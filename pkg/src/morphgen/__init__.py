"""Desk-scale lab for morphology-guided contrastive training.

Subpackages and modules:

- synthdata: procedural multi-domain nuclei patches with pixel-exact masks
- model: shared numpy encoder with exact analytic gradients
- losses: contrastive alignment (attract/repel) and dual BCE objectives
- optim: AdamW, warmup+cosine schedule, stochastic weight averaging
- robustness: graded corruptions and L-inf PGD evaluation
- attribution: integrated gradients with the completeness check
- harness: configs, training runs, experiments, reports
"""

__version__ = "0.1.0"
