"""Compare the two attention-gate orderings on one random feature vector."""

import numpy as np

from gdpnet.model import attention_block

rng = np.random.default_rng(0)
c = 8
x = rng.normal(size=(1, c))
w1 = rng.normal(0, 0.5, (c // 2, c))
w2 = rng.normal(0, 0.5, (c, c // 2))

for order in ("paper_literal", "se_standard"):
    y = attention_block(x, w1, w2, order)
    print(f"{order:>13}: gate = {np.round(y / x, 3).ravel()}")
# paper_literal gates are unbounded above (ReLU outside); se_standard gates lie in (0, 1)
