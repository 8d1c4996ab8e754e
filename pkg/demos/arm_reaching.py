"""
Reactive reaching with a planar arm
===================================

A 5-link planar arm follows an SE(2) field on its end-effector pose.  Each
tick the body twist from the field is mapped to joint rates with a damped
pseudoinverse of the kinematic Jacobian.
"""
import sys
from collections import Counter

import numpy as np

from liesvf import cli, kinematics_demo as kd, msvf, trainer
from liesvf.lie_core import manifold

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 300

chain = kd.PlanarChain()               # five 0.2 m links, limits +-2 pi
kind = manifold("SE2", 4.0)            # chart box well outside the 1 m reach
target = cli.arm_target(chain)
print("target pose:\n", target.round(4))

# scripted curved reaches into the target serve as demonstrations
ds = cli.arm_reach_dataset(kind, cli.load_config(None), 10, seed=0)
init = msvf.MsvfModel.init(kind, target, np.random.default_rng(0))
model, _ = trainer.bc_train(ds, trainer.TrainConfig(iterations=iterations, seed=0), init)

starts = kd.random_reachable(chain, np.random.default_rng(1), 20)
for name, m in [("zero flow", model.with_params(0 * model.flow.params)), ("trained", model)]:
    eps = kd.run_episodes(chain, starts, m)
    steps = [len(e.joints) - 1 for e in eps if e.outcome == kd.REACHED]
    print(f"{name:9s}: {dict(Counter(e.outcome for e in eps))}, median steps {np.median(steps):.0f}")
