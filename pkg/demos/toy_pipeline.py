"""Train on a small synthetic dataset, export summaries and serve from the cache.

Run: python3 demos/toy_pipeline.py   (about a minute on one core)
"""
import numpy as np

from vista.data import SyntheticConfig, generate_dataset
from vista.delivery import ExportLog, SummaryCache, SummaryTokens, consume, fetch_for_inference, publish
from vista.model import ModelConfig, VistaModel
from vista.training import TrainConfig, evaluate_model, train

ds = generate_dataset(SyntheticConfig(n_users=6000, min_len=32, max_len=128, seed=1))
train_b, eval_b = ds.split(0.8)
print(f"{len(train_b)} training users, {len(eval_b)} held out, Bayes AUC {ds.bayes_auc():.3f}")

model = VistaModel.create(ModelConfig(d=32, k=8, recon_weight=0.1), seed=0)
history = train(model, train_b, TrainConfig(epochs=2, log_every=0))
print(f"trained {model.step} steps in {history.seconds:.0f}s, "
      f"recon loss {history.recon[0]:.3f} -> {history.smoothed('recon')[-1]:.3f}")
print(f"held-out AUC {evaluate_model(model, eval_b).auc:.3f}")

# Stage one: summarise each user once and publish to the export log.
log, cache = ExportLog(), SummaryCache()
for b in eval_b:
    publish(log, SummaryTokens(b.user_id, model.step, model.summary_tokens(b)))
print(f"applied {consume(log, cache)} records; replay applies {consume(log, cache, 0)}")

# Stage two: score candidates from the cached 8-bit summary only.
user = eval_b[0]
fetched = fetch_for_inference(cache, user.user_id, current_version=model.step, max_staleness=0)
cached = model.predict_from_tokens(fetched.tokens, user.cand_items, user.cand_cats)
full = model.predict_batch(user)
print("cached scores", np.round(cached, 3))
print(f"max |cached - full| {np.abs(cached - full).max():.1e}")
