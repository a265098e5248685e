"""bedloop: adaptive Bayesian experimental design with refinable design policies.

The engine trains neural design policies by stochastic gradient ascent on
contrastive lower bounds of expected information gain, optionally refines
them mid-experiment against an importance-sampled posterior, and evaluates
design strategies with matched lower/upper bounds plus exact enumeration
oracles on small discrete models.
"""

__version__ = "0.1.0"
