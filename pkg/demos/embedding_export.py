"""Train briefly, then write 2-D PCA embeddings of every extractor to CSV for
plotting (x, y, class, domain, extractor).

    python demos/embedding_export.py OUT.csv
"""

import sys

from alfa.datasets import lodo_split, synth_generate
from alfa.evaluation import embedding_dump, normalized_cross_cov, write_embeddings
from alfa.model import encode
from alfa.train import TrainConfig, train_run

out = sys.argv[1] if len(sys.argv) > 1 else "embeddings.csv"
ds = synth_generate(200, seed=1)
split = lodo_split(ds, 3, seed=1)
result = train_run(ds, split, TrainConfig(iterations=200, lr=1e-3, seed=1))

dumps = [embedding_dump(result.params, ds.images, ds.y, ds.h, name) for name in ("alpha", "beta", "gamma", "all")]
write_embeddings(out, dumps)
print(f"wrote {sum(len(d.y) for d in dumps)} rows to {out}")

# how strongly the self-supervised and invariant features co-vary on held-out source data
feats = encode(result.final_params.detached(), ds.images[split.val_indices()])
print("normalised alpha-beta cross-covariance:", round(normalized_cross_cov(feats.alpha.data, feats.beta.data), 3))
