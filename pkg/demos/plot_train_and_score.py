"""
Train, score and evaluate on the synthetic split
================================================

Train the small encoder with the inverted context for a few hundred steps,
then score the test split with the nearest-neighbour and Gaussian scores.
"""

# %%
import matplotlib.pyplot as plt

from con2 import TestTimePolicy, auroc, final_scores, fit_gaussian, fit_nnd, train
from con2.config import load_config
from con2.evaluation import context_silhouette

cfg = load_config("configs/synthetic.yaml")
split = cfg.load_dataset()
ckpt = train(cfg.model, cfg.train, split)

# %%
# The context term falls first; the content term takes over as alpha grows.
hist = ckpt.history
plt.plot([r["context"] for r in hist], label="context")
plt.plot([r["content"] for r in hist], label="content")
plt.xlabel("step")
plt.legend()

# %%
policy = TestTimePolicy.draw(A=8, content=cfg.train.content, context="invert", seed=0)
for name, fit in (("nnd", fit_nnd), ("lh", fit_gaussian)):
    model = fit(ckpt, split.train, policy)
    scores = final_scores(model, ckpt, split.test)
    print(f"AUROC {name}: {auroc(scores, split.test_labels):.4f}")

print(f"context silhouette: {context_silhouette(ckpt, split.test, 'invert'):.3f}")
