"""Why the policy keeps a history of observations.

Two buttons must be pressed in the instructed order with a return to the home
pose in between.  Pressed buttons look unpressed, so the scene before the
second press is pixel-identical to the scene before the first.  A policy that
sees only the current frame has to repeat its first choice; the full model
reads its own past frames and presses the other button.

Both models get the same data, seed and number of updates.  Expect roughly
25 minutes on one CPU core with the defaults.

    python3 demos/03_history_matters.py [iterations]
"""
import dataclasses
import sys

from mvpolicy import sim
from mvpolicy.episodes import episode_seed, generate_episode
from mvpolicy.evaluation import evaluate
from mvpolicy.policy import PolicyConfig
from mvpolicy.training import TrainConfig, train

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 3000
specs = [sim.TaskSpec("push_buttons", sim.variation_of("push_buttons", order), n_objects=2, return_home=True)
         for order in (("red", "green"), ("green", "red"))]
episodes = [generate_episode(t, episode_seed(0, t, i)) for t in specs for i in range(50)]
cfg = TrainConfig(learning_rate=1e-3, iterations=iters)

for name, pcfg in [("full", PolicyConfig()), ("no history", dataclasses.replace(PolicyConfig(), history=False))]:
    res = train(episodes, pcfg, cfg)
    rep = evaluate(res.policy.eval(), {"seen": specs}, 100, seed=1)
    print(f"{name:>10}: final loss {res.log[-1]['total']:.5f}  success {rep.success_rate('seen'):.2f}")
