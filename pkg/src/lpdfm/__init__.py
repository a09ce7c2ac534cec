"""Lineage-prior Dirichlet flow matching on the probability simplex.

Family-specific Dirichlet priors, analytic simplex transport, a
classifier-parameterized drift, mutate/select/amplify rerouting and a
desk-scale evaluation harness.
"""

__version__ = "0.1.0"

ALPHABET = "ACDEFGHIKLMNPQRSTVWY"
GAP = "-"
UNKNOWN = "X"
