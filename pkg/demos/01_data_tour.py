"""A tour of the simulator and the episode format.

Builds one push_buttons scene, lets the scripted expert solve it, writes the
demonstration to disk, reads it back and saves the three camera views per step
as a PNG strip.

    python3 demos/01_data_tour.py [out_dir]
"""
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from mvpolicy import sim
from mvpolicy.episodes import generate_episode, read_episode, write_episode

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(parents=True, exist_ok=True)

# variation 16 of push_buttons is "green, then red"; two buttons, back to HOME in between
task = sim.TaskSpec("push_buttons", sim.variation_of("push_buttons", ("green", "red")), n_objects=2,
                    return_home=True)
ep = generate_episode(task, seed=7)
print(f"instruction: {ep.instruction!r}")
for t, (obs, act) in enumerate(ep.steps):
    print(f"step {t + 1}: gripper goes to {np.round(act.position, 3)} open={act.open:.0f}")

path = out / "tour.ep"
write_episode(ep, path)
back = read_episode(path)
print(f"wrote {path.stat().st_size} bytes; read back equal: {back == ep}")

# the pressed button is not drawn, so the first and last frames are identical
first, last = ep.observations[0], ep.observations[-1]
print("step 1 and step 3 render identically:", np.array_equal(first.rgb, last.rgb))

T, K = len(ep), len(sim.CAMERA_NAMES)
fig, axes = plt.subplots(T, K, figsize=(2 * K, 2 * T))
for t, obs in enumerate(ep.observations):
    for k, name in enumerate(sim.CAMERA_NAMES):
        ax = axes[t, k]
        ax.imshow(obs.rgb[k], interpolation="nearest")
        ax.contour(obs.gripper_map[k], levels=[0.5], colors="magenta", linewidths=0.8)
        ax.set_xticks([])
        ax.set_yticks([])
        if t == 0:
            ax.set_title(name)
    axes[t, 0].set_ylabel(f"step {t + 1}")
fig.tight_layout()
fig.savefig(out / "tour.png", dpi=100)
print(f"views saved to {out / 'tour.png'}")
