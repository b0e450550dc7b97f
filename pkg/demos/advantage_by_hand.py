"""The advantage on a one-dimensional toy where every piece is known.

V(s) = s, P(s, a) = s + a, and a one-step behavior model whose noise
predictor is zero, so its proposals are wide Gaussian noise clamped to
[-1, 1] and mostly land on the box edges. An action's advantage is how
far its predicted next value clears the kappa-quantile of the proposals'
next values; once the kappa rank reaches the proposals clamped at +1 the
threshold is +1 and nothing scores positive.
"""
import numpy as np

from adac import nn
from adac.advantage import AdvantageConfig, AdvantageOracle, advantage, quantile, softclip, threshold
from adac.diffusion import BehaviorModel, make_vp_schedule
from adac.pretrain import TransitionModel, ValueModel


def linear(widths, weights):
    p = nn.init_params(nn.NetSpec(widths, activation="identity"), np.random.default_rng(0), np.float64)
    W, b = p.layers()[0]
    W[:] = np.asarray(weights, dtype=float).reshape(W.shape)
    b[:] = 0.0
    return p


value = ValueModel(linear((1, 1), [1.0]))
dynamics = TransitionModel(linear((2, 1), [1.0, 1.0]))
# zero noise predictor with one step: samples are scaled Gaussian noise, clamped to [-1, 1]
behavior = BehaviorModel(linear((4, 1), [0, 0, 0, 0]), make_vp_schedule(1), 2)

s = np.array([0.0])
for kappa in (0.55, 0.65, 0.95):
    oracle = AdvantageOracle(value, dynamics, behavior, AdvantageConfig(kappa, 25))
    thr = threshold(oracle, s, np.random.default_rng(0))
    adv = [advantage(oracle, s, np.array([a]), np.random.default_rng(0)) for a in (-0.5, 0.0, 0.5)]
    print(f"kappa {kappa}: threshold {thr:+.3f}; A(-0.5) {adv[0]:+.3f} A(0) {adv[1]:+.3f} A(0.5) {adv[2]:+.3f}")

print("quantile of 10,20,30,40 at 0.65:", quantile([10, 20, 30, 40], 0.65))
for x in (-10.0, -1.0, 0.5, 3.0, 50.0):
    print(f"softclip({x:+.1f}) = {softclip(x, 6.0, 4.0):+.4f}")
