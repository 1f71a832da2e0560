"""
Closed-form checks on small discrete problems
=============================================

The alignment method rests on a few facts about tabular distributions.  Each
one has a closed form that we can compare against brute force.
"""

import math

import numpy as np

from condalign import theory as th

# The weighted negative-log problem min_theta -sum alpha_i log theta_i over the
# simplex is solved by normalising alpha.  Projected gradient agrees.
alpha = np.array([0.5, 2.0, 1.5])
print("closed form :", th.lemma1_minimizer(alpha))
print("numeric     :", th.lemma1_numeric(alpha, seed=0).round(8))

# For two distributions P and Q on the same support, the symmetric
# "which one did this come from" loss is smallest when Q = P, at log 4.
p = np.array([0.2, 0.5, 0.3])
q, value = th.lemma2_grid_search(p, step=0.005)
print(f"grid argmin {q}, value {value:.6f}, log 4 = {math.log(4):.6f}")

###############################################################################
# A joint (domain, class) predictor trained on a table converges to the
# ratio of source mass to total mass in each bin.

dj = th.DiscreteJoint.from_tables([[0.3, 0.1], [0.1, 0.5]], [[0.2, 0.2], [0.4, 0.2]])
print(np.round(th.prop1_optimal_predictor(dj), 4))
print(np.round(th.prop1_gradient_fit(dj, seed=0), 4))

###############################################################################
# When the class-conditionals agree across domains and classes own disjoint
# bins, moving any 10% of a class's mass raises the encoder objective.

dj = th.aligned_disjoint_instance(n_bins=4, n_classes=2, seed=3)
base = th.encoder_objective(dj)
deltas = [th.encoder_objective(pert) - base for _, pert in th.mass_perturbations(dj)]
print(f"{len(deltas)} perturbations, smallest increase {min(deltas):.2e}")
