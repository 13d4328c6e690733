"""Latent-variable inference and learning toolkit.

One Gaussian/exponential-family core (gaussian) feeds exact-EM models (gmm,
factor_analysis, hmm, kalman), approximate inference (sparse_coding,
particle), energy-based learning (rbm), discriminative estimators
(regression), and information-theoretic accounting (information).  The cli
module wires everything to the `lvm` command; every component is verifiable
against brute-force oracles at desk scale.
"""

__version__ = "0.1.0"
