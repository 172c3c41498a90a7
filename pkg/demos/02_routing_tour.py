"""Tour of the prompt-expert router: closed forms, noise, selection, similarity.

Shows the gate arithmetic on paper-sized examples: softmax of known logits,
the softplus noise scale at zero, exhaustive-selection behavior at K=N,
stochastic exploration with noise enabled, and the prompt cosine-similarity
matrix before any training.
"""

import math

import numpy as np
import torch

from codecrestore.moe_prompt import (
    PromptBank,
    aggregate_prompts,
    prompt_similarity_matrix,
    route,
)

torch.manual_seed(0)


def main() -> None:
    print("== closed forms")
    probs = torch.softmax(torch.tensor([2.0, 1.0, 0.0]), dim=0)
    print(f"   softmax(2,1,0)   = {np.round(probs.numpy(), 4)}  (0.6652, 0.2447, 0.0900)")
    print(f"   softplus(0)      = {torch.nn.functional.softplus(torch.tensor(0.0)):.6f}"
          f"  (ln 2 = {math.log(2):.6f})")

    bank = PromptBank(n_prompts=7, top_k=3, d_prompt=8, rank=8, d_route=16)
    x = torch.randn(16)

    print("== deterministic routing (noise off): pure function of (x, W_g)")
    decision = route(x, bank, noise_enabled=False)
    print(f"   probs   = {np.round(decision.probs.detach().numpy(), 4)}")
    print(f"   top-3   = {decision.indices.tolist()} weights "
          f"{np.round(decision.weights.detach().numpy(), 4)}")

    print("== noisy routing: 2000 seeded draws, per-expert selection counts")
    rng = torch.Generator().manual_seed(7)
    counts = np.zeros(7, dtype=int)
    for _ in range(2000):
        noisy = route(x, bank, noise_enabled=True, rng=rng)
        counts[noisy.indices.numpy()] += 1
    print(f"   counts  = {counts.tolist()}  (every expert explored)")

    print("== K = N degenerates to exhaustive selection")
    full_bank = PromptBank(n_prompts=4, top_k=4, d_prompt=8, rank=8, d_route=16)
    full = route(torch.randn(16), full_bank, noise_enabled=False)
    print(f"   indices = {sorted(full.indices.tolist())}, "
          f"weights sum = {float(full.weights.sum()):.6f}")

    print("== aggregation: selected prompts sum, multiply channels, residual-add")
    feats = torch.randn(1, 8, 4, 4)
    out = aggregate_prompts(bank, decision, feats)
    with torch.no_grad():
        bank.prompts.zero_()
    identity = aggregate_prompts(bank, decision, feats)
    print(f"   output shape {tuple(out.shape)}; zero prompts => identity: "
          f"{torch.equal(identity, feats)}")

    print("== prompt cosine similarity at initialization (off-diagonal near 0)")
    torch.manual_seed(1)
    fresh = PromptBank(n_prompts=7, top_k=3, d_prompt=8, rank=8, d_route=16)
    sim = prompt_similarity_matrix(fresh)
    off = sim[~np.eye(7, dtype=bool)]
    print(f"   diag = {np.round(np.diag(sim), 3)}")
    print(f"   mean |off-diagonal| = {np.abs(off).mean():.4f}")


if __name__ == "__main__":
    main()
