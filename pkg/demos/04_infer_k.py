"""Can the host guess K from the gradients it sees?

For each candidate c the attacker clusters the last-epoch gradients with
k-means and scores the partition with Calinski-Harabasz. The best-scoring c
is its guess.
"""

from splitlab.experiment import AttackSpec, DataSpec, ExperimentConfig, cmd_infer_k
from splitlab.secdt import DefenseConfig

for mu in (0.0, 0.5):
    cfg = ExperimentConfig(
        data=DataSpec(n=4000), epochs=10,
        defense=DefenseConfig(K=10, mu=mu),
        attacks=AttackSpec(names=["infer_k"], k_max=20),
    )
    hist, _ = cmd_infer_k(cfg, trials=5, write=False)
    print(f"mu={mu}: guesses {dict(sorted(hist.items()))} (true K=10)")
