"""
The gradient tape and the adversarial perturbation
==================================================

Every loss term is built on a small reverse-mode tape.  Here we check the
tape against central differences, then look at where the virtual
adversarial direction points on a two-dimensional input.
"""

import numpy as np

from condalign import autodiff as ad
from condalign.data import gen_moons
from condalign.losses import LossWeights, build_objective, vat_loss, vat_perturbation
from condalign.networks import Arch, class_predict, encode, init_params

params = init_params(Arch(d_in=2, n_classes=2, widths=(16, 8)), seed=0)
src = gen_moons(16, 0.1, seed=0)
tgt = gen_moons(16, 0.1, seed=1).unlabeled()

weights = LossWeights(lambda_svat=1.0, eps_x=0.1)
graph, terms, total = build_objective(params, src, tgt, weights, rng=0)
for name, t in terms.items():
    print(f"L_{name:<4} = {t.value:.4f}   max rel. grad error "
          f"{ad.grad_check(graph.tape, None, 1e-5, output=t):.1e}")

###############################################################################
# The perturbation has norm eps_x per sample and, for a smooth classifier,
# points across the nearest decision boundary.

x = src.features[:4]
delta = vat_perturbation(params, x, eps_x=0.1, seed=0)
print(np.linalg.norm(delta, axis=1))
before = class_predict(params, encode(params, x)).probs[:, 0]
after = class_predict(params, encode(params, x + delta)).probs[:, 0]
print(np.c_[before, after].round(4))
print("vat loss:", vat_loss(params, x, 0.1, seed=0))
