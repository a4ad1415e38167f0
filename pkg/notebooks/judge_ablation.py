"""One judge or five?

Train an evaluator on each simulated judge alone, then on all of them
together, and score every model on the same held-out pairs.  The fused model
should match the best single judge without being told which one that is.

    python3 notebooks/judge_ablation.py [--seeds 0 1 2]
"""
import argparse

import numpy as np

from judgefuse import OVERALL, JudgePanel, PreferenceRecord, TrainConfig, train
from judgefuse.synth import JudgeSpec, SynthSpec, child_rng, flip_correct, generate, held_out_items, sample_latent_pairs

parser = argparse.ArgumentParser()
parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
parser.add_argument("--epochs", type=int, default=50)
args = parser.parse_args()

truth = (0.65, 0.72, 0.80, 0.88, 0.95)


def accuracy(model, true_panel, x, a, b, r):
    _, flipped = flip_correct(model.panel, true_panel, OVERALL)
    s = model.score(x) * (-1 if flipped else 1)
    return 100 * np.mean((s[b] > s[a]) == r.astype(bool))


print(f"{'seed':>4} " + " ".join(f"{'only ' + str(t):>9}" for t in truth) + f" {'all five':>9}")
for seed in args.seeds:
    spec = SynthSpec(n_items=1000, dim=16, n_pairs=2000, judges=tuple(JudgeSpec(p, p, 0.15) for p in truth), seed=seed)
    data = generate(spec)
    store, q = held_out_items(spec, data, 200)
    x = store.matrix.astype(np.float64)
    pairs = sample_latent_pairs(q[OVERALL], 2000, spec.sigma_true, child_rng(seed, "eval"))
    cfg = TrainConfig(epochs=args.epochs, seed=seed)

    row = []
    for k, judge in enumerate(data.spec.judge_names):
        alone = [PreferenceRecord(p.pair_id, p.item_a, p.item_b, {judge: p.labels[judge]}) for p in data.records]
        tp = data.true_panel
        panel = JudgePanel((judge,), {OVERALL: tp.alpha_logit[OVERALL][k : k + 1]}, {OVERALL: tp.beta_logit[OVERALL][k : k + 1]})
        row.append(accuracy(train(alone, data.store, cfg)[0], panel, x, *pairs))
    fused = accuracy(train(data.records, data.store, cfg)[0], data.true_panel, x, *pairs)
    print(f"{seed:>4} " + " ".join(f"{v:9.2f}" for v in row) + f" {fused:9.2f}")
