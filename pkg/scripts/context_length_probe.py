"""Rollout CTR as a function of context length K on the synthetic env.

    python3 scripts/context_length_probe.py --K 1 2 4 8 --iters 2000
"""

import argparse

from cdt4rec.config import ModelConfig
from cdt4rec.env import EnvSpec, OraclePolicy, RecEnv, collect_dataset, default_target_rtg, evaluate_policy
from cdt4rec.evaluation import ModelPolicy
from cdt4rec.training import TrainConfig, TrainState, train_steps


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--K", type=int, nargs="+", default=[1, 2, 4, 8])
    ap.add_argument("--iters", type=int, default=2000)
    ap.add_argument("--trajectories", type=int, default=2000)
    ap.add_argument("--episodes", type=int, default=500)
    args = ap.parse_args()

    spec = EnvSpec(m=50, d_s=16, latent_dim=8, horizon=20, seed=0)
    env = RecEnv(spec)
    ds = collect_dataset(env, OraclePolicy(env, epsilon=0.1, seed=1), args.trajectories, seed=1)
    mc = ModelConfig(state_dim=spec.d_s, num_items=spec.m, max_timestep=int(ds.lengths.max()) + spec.horizon,
                     d_h=32, n_heads=2, n_layers=3)
    target = default_target_rtg(ds)
    print("K  ctr     half_width  final_loss")
    for K in args.K:
        state = train_steps(TrainState.create(mc, TrainConfig(K=K, batch_size=64, n_it=args.iters)), ds, args.iters)
        m = evaluate_policy(env, ModelPolicy(state.model, K), args.episodes, target, seed=99)
        print(f"{K:<2} {m.ctr:.4f}  {m.ctr_half_width:.4f}      {state.history[-1][1]:.4f}")


if __name__ == "__main__":
    main()
