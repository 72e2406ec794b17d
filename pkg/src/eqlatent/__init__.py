"""Equation discovery with a conditional graph VAE and latent-space BO.

Submodules:
  dag         equation DAG structure, validity, evaluation, canonical form
  expr        expression trees, infix/prefix parsing and printing
  generator   random equation corpus and synthetic dataset sampling
  embeddings  dataset condition vectors (polynomial fit, set encoder)
  model       the conditional graph VAE, training loop, checkpoints
  search      Gaussian-process Bayesian optimization over the latent space
  metrics     reconstruction / validity / uniqueness / novelty / equivalence
  latent      PCA plane scoring grid for latent-space visualization
  cli         the `eqlatent` command-line pipeline
"""

__version__ = "0.1.0"
