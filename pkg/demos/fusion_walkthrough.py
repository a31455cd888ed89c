# Walk through one fusion adapter step by step on random inputs.
import numpy as np

from clinsum import tensor as T
from clinsum.fusion import (FusionParams, attention_weights, conditioned_kv, fusion_forward,
                            modality_lambdas, project_qkv)
from clinsum.tensor import Tensor

rng = np.random.default_rng(0)
l, d = 5, 8
params = FusionParams.init(d, {"visual": 6, "knowledge": 7}, rng)
H = Tensor(rng.normal(size=(l, d)))
evidence = {"visual": Tensor(rng.normal(size=(1, 6))), "knowledge": Tensor(rng.normal(size=(1, 7)))}

# text states projected to queries, keys and values
Q, K, V = project_qkv(H, params)
print("Q, K, V shapes:", Q.shape, K.shape, V.shape)

# how much of each key/value row is replaced by the evidence projection
for m in ("visual", "knowledge"):
    lam_k, lam_v = modality_lambdas(K, V, evidence[m], params, m)
    print(f"{m:9s} lambda_k:", np.round(lam_k.values.ravel(), 3))
    K_hat, V_hat = conditioned_kv(K, V, evidence[m], lam_k, lam_v, params, m)
    A = attention_weights(Q, K_hat)
    print(f"{m:9s} attention row sums:", np.round(A.values.sum(axis=1), 12))

H_hat = fusion_forward(H, evidence, params)
print("change in states:", np.abs(H_hat.values - H.values).max())

# with the gates zeroed the adapter is the identity
params.zero_gates()
print("after zero_gates:", np.abs(fusion_forward(H, evidence, params).values - H.values).max())

# gradients through the adapter agree with finite differences
params = FusionParams.init(d, {"visual": 6, "knowledge": 7}, rng)
rep = T.check_gradients(lambda: T.sum_all(fusion_forward(H, evidence, params)), params.parameters())
print(f"gradient check: max rel err {rep.max_rel_err:.2e} over {rep.n_checked} entries")
