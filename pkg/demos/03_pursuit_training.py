"""Train EF and Typical decoders on a small pursuit set and compare them.

Small on purpose (a minute or two on one core); the acceptance suite runs the
full-size version. Writes runs/demo/clip0.svg.

Run: python3 demos/03_pursuit_training.py
"""

from pathlib import Path

import numpy as np

from efformer import EFTransformer, ModelConfig, SynthSpec, TrainConfig, fad, generate, mad, rollout, to_batch, train
from efformer.plotting import emit_svg
from efformer.rollout import Spike

train_clips, manifest = generate(SynthSpec(n_clips=1000, seed=100, coupling=0.9))
test_clips, _ = generate(SynthSpec(n_clips=100, seed=200, coupling=0.9))
tr, te = to_batch(train_clips), to_batch(test_clips)
C = len(manifest.actions)

# target starts at a known spot; the leader (observed row 0) pulls it along
gap = np.linalg.norm(te.obs_pos[:, 0] - te.tgt_pos[:, 0], axis=-1).mean()
print(f"mean leader-target distance {gap:.1f} px")

estimates = {}
for decoder in ("ef", "typical"):
    cfg = ModelConfig(n_obs=3, n_tgt=1, n_actions=C, decoder=decoder, geom_dim=16, action_dim=16, heads=2, head_dim=8,
                      ffn_dim=64, pred_hidden=64, dtype="float32")
    model = EFTransformer(cfg, seed=0)
    res = train(tr, model, TrainConfig(epochs=15, seed=0))
    clean = rollout(model, te, 1)
    spiked = rollout(model, te, 1, spike=Spike((6,)))
    print(f"{decoder:>8}: loss {res.losses[0]:.3f} -> {res.losses[-1]:.3f}   "
          f"MAD {mad(clean.positions, te.tgt_pos):6.2f}  FAD {fad(clean.positions, te.tgt_pos):6.2f}  "
          f"spiked FAD {fad(spiked.positions, te.tgt_pos):6.2f}")
    estimates[decoder] = clean.positions[0]

out = Path("runs/demo")
out.mkdir(parents=True, exist_ok=True)
w, h = te.wh[0]
emit_svg(out / "clip0.svg", te.obs_pos[0], te.tgt_pos[0], estimates, float(w), float(h), te.clip_ids[0])
print("wrote", out / "clip0.svg")
