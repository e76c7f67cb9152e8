import json
import math
import sys
import tempfile
import unittest
from pathlib import Path
from unittest import mock


class TestPpo(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        root = Path(__file__).resolve().parents[1]
        sys.path.insert(0, str(root))
        try:
            import torch  # noqa: F401
            import scipy  # noqa: F401
            import gymnasium  # noqa: F401
        except Exception as e:  # pragma: no cover
            raise unittest.SkipTest(f"required dependency not installed: {e}")

    def _buffer(self, rewards, values, dones):
        from echelon.ppo import TrajectoryBuffer

        buf = TrajectoryBuffer(len(rewards), 2, 1)
        for r, v, d in zip(rewards, values, dones):
            buf.add([0.0, 0.0], [0.0], 0.0, r, v, d)
        return buf

    def test_gae_matches_brute_force(self):
        import numpy as np

        from echelon.ppo import compute_gae

        rng = np.random.default_rng(0)
        n = 12
        rewards = rng.normal(size=n)
        values = rng.normal(size=n)
        dones = np.zeros(n, dtype=bool)
        dones[[4, 9]] = True
        gamma, lam, last = 0.9, 0.8, 0.7
        adv, ret = compute_gae(self._buffer(rewards, values, dones), gamma, lam, last)

        def delta(t):
            nxt = last if t == n - 1 else values[t + 1]
            return rewards[t] + gamma * nxt * (0.0 if dones[t] else 1.0) - values[t]

        for t in range(n):
            expected = 0.0
            for k in range(t, n):
                expected += (gamma * lam) ** (k - t) * delta(k)
                if dones[k]:
                    break
            self.assertAlmostEqual(float(adv[t]), expected, delta=1e-12)
        np.testing.assert_allclose(ret, adv + values)

    def test_gae_without_discount_gives_reward_to_go(self):
        import numpy as np

        from echelon.ppo import compute_gae

        rewards = np.array([1.0, -2.0, 3.0, 0.5])
        values = np.array([0.3, 0.1, -0.4, 2.0])
        _, ret = compute_gae(self._buffer(rewards, values, [False] * 4), 1.0, 1.0, 5.0)
        expected = np.cumsum(rewards[::-1])[::-1] + 5.0
        np.testing.assert_allclose(ret, expected, atol=1e-12)

    def test_gae_rejects_empty_buffer(self):
        from echelon.errors import ContractError
        from echelon.ppo import TrajectoryBuffer, compute_gae

        with self.assertRaises(ContractError):
            compute_gae(TrajectoryBuffer(4, 2, 1), 0.99, 0.95, 0.0)

    def _batch(self, advantages, returns):
        import torch

        from echelon.ppo import Minibatch

        n = len(advantages)
        return Minibatch(
            observations=torch.zeros(n, 2, dtype=torch.float64),
            actions=torch.zeros(n, 1, dtype=torch.float64),
            old_log_probs=torch.zeros(n, dtype=torch.float64),
            advantages=torch.tensor(advantages, dtype=torch.float64),
            returns=torch.tensor(returns, dtype=torch.float64),
        )

    def test_ppo_loss_hand_case(self):
        import torch

        from echelon.ppo import PpoConfig, ppo_loss

        batch = self._batch([1.0, -1.0], [0.0, 0.0])
        new_lp = torch.log(torch.tensor([1.5, 0.5], dtype=torch.float64))
        loss, diag = ppo_loss(
            batch,
            new_lp,
            torch.ones(2, dtype=torch.float64),
            torch.tensor([1.0, 2.0], dtype=torch.float64),
            PpoConfig(),
        )
        # min(1.5, 1.2) and min(-0.5, -0.8)
        self.assertAlmostEqual(diag["policy_loss"], -0.2, places=12)
        self.assertAlmostEqual(diag["value_loss"], 2.5, places=12)
        self.assertAlmostEqual(diag["entropy"], 1.0, places=12)
        self.assertAlmostEqual(float(loss), -0.2 + 0.5 * 2.5 - 0.01, places=12)
        self.assertEqual(diag["clip_fraction"], 1.0)
        expected_kl = ((0.5 - math.log(1.5)) + (-0.5 - math.log(0.5))) / 2
        self.assertAlmostEqual(diag["approx_kl"], expected_kl, places=12)

    def test_clipped_and_zero_advantage_samples_have_no_policy_gradient(self):
        import torch

        from echelon.ppo import PpoConfig, ppo_loss

        cfg = PpoConfig(vf_coef=0.0, ent_coef=0.0)
        batch = self._batch([1.0, 0.0, 1.0], [0.0, 0.0, 0.0])
        new_lp = torch.log(torch.tensor([1.5, 1.1, 1.1], dtype=torch.float64)).requires_grad_(True)
        zeros = torch.zeros(3, dtype=torch.float64)
        loss, _ = ppo_loss(batch, new_lp, zeros, zeros, cfg)
        (grad,) = torch.autograd.grad(loss, new_lp)
        self.assertEqual(float(grad[0]), 0.0)
        self.assertEqual(float(grad[1]), 0.0)
        # unclipped: d/dlp of -ratio*adv/3
        self.assertAlmostEqual(float(grad[2]), -1.1 / 3, places=12)

    def test_loss_decreases_on_a_frozen_batch(self):
        import torch
        from torch.distributions import Normal

        from echelon.netcore import DTYPE, Adam, GradientTape, backward, make_generator
        from echelon.ppo import Minibatch, PpoConfig, normalize_advantages, ppo_loss
        from echelon.policy import PolicyConfig, build_actor, build_critic

        cfg = PolicyConfig(kind="mlp", hidden_layers=2, hidden_width=16, critic_widths=(32,))
        actor = build_actor(cfg, 33, 3, generator=make_generator(0))
        critic = build_critic(cfg, 33, generator=make_generator(1))
        gen = make_generator(2)
        obs = torch.empty(32, 33, dtype=DTYPE).uniform_(-1.0, 1.0, generator=gen)
        actions = torch.randn(32, 3, dtype=DTYPE, generator=gen)
        with torch.no_grad():
            old = Normal(actor(obs), actor.log_std.exp()).log_prob(actions).sum(-1)
        batch = Minibatch(
            observations=obs,
            actions=actions,
            old_log_probs=old,
            advantages=normalize_advantages(torch.randn(32, dtype=DTYPE, generator=gen)),
            returns=3.0 * torch.randn(32, dtype=DTYPE, generator=gen),
        )
        ppo = PpoConfig()
        params = {f"actor.{n}": p for n, p in actor.named_parameters()}
        params.update({f"critic.{n}": p for n, p in critic.named_parameters()})
        optimizer = Adam(params, 1e-2, max_grad_norm=ppo.max_grad_norm)

        losses = []
        for _ in range(300):
            dist = Normal(actor(obs), actor.log_std.exp())
            loss, diag = ppo_loss(
                batch, dist.log_prob(actions).sum(-1), dist.entropy().sum(-1), critic(obs), ppo
            )
            losses.append(diag["loss"])
            optimizer.step(backward(GradientTape(loss, params)))
        self.assertLess(losses[-1], 0.5 * losses[0])
        self.assertLess(min(losses[-10:]), min(losses[:10]))

    def test_ppo_config_validation(self):
        from echelon.errors import ConfigError
        from echelon.ppo import PpoConfig

        with self.assertRaises(ConfigError) as ctx:
            PpoConfig(n_steps=32, batch_size=64)
        self.assertEqual(ctx.exception.field, "ppo.batch_size")
        with self.assertRaises(ConfigError):
            PpoConfig(clip_eps=0.0)
        self.assertEqual(PpoConfig(n_steps=64, total_steps=10).num_updates, 1)
        self.assertEqual(PpoConfig(n_steps=64, total_steps=130).num_updates, 3)

    def _tiny(self):
        from echelon.env import SupplyChainConfig
        from echelon.policy import PolicyConfig
        from echelon.ppo import PpoConfig

        env = SupplyChainConfig(horizon=12)
        policy = PolicyConfig(hidden_layers=1, hidden_width=4, num_subnets=2, critic_widths=(8,))
        ppo = PpoConfig(n_steps=30, n_epochs=2, batch_size=16, total_steps=10)
        return env, policy, ppo

    def test_train_runs_one_update_and_is_deterministic(self):
        import torch

        from echelon.ppo import train

        env, policy, ppo = self._tiny()
        with tempfile.TemporaryDirectory() as tmp:
            log_path = Path(tmp) / "log.jsonl"
            first = train(env, "nam", ppo, policy, seed=5, log_path=log_path)
            lines = [json.loads(s) for s in log_path.read_text().splitlines()]
        second = train(env, "nam", ppo, policy, seed=5)

        self.assertEqual(len(first.log), 1)
        self.assertEqual(lines, first.log)
        self.assertEqual(first.log, second.log)
        # 30 steps over 12-step episodes: two finished episodes
        self.assertEqual(len(first.episode_returns), 2)
        self.assertEqual(first.checkpoint.metadata["updates"], 1)
        self.assertEqual(first.checkpoint.metadata["timesteps"], 30)
        for name, p in first.checkpoint.actor.state_dict().items():
            self.assertTrue(torch.equal(p, second.checkpoint.actor.state_dict()[name]), name)
        keys = (
            "loss",
            "policy_loss",
            "value_loss",
            "entropy",
            "clip_fraction",
            "approx_kl",
            "grad_norm",
        )
        for key in keys:
            self.assertIn(key, first.log[0])
            self.assertTrue(math.isfinite(first.log[0][key]), key)

    def test_train_mlp_and_env_factory(self):
        from echelon.ppo import train

        env, policy, ppo = self._tiny()
        result = train(lambda: env, "mlp", ppo, policy, seed=1)
        self.assertEqual(result.checkpoint.kind, "mlp")
        other = train(env, "mlp", ppo, policy, seed=2)
        self.assertNotEqual(result.log, other.log)

    def test_training_error_carries_last_good_checkpoint(self):
        from echelon import ppo as ppo_module
        from echelon.errors import TrainingError

        env, policy, ppo = self._tiny()
        diverged = TrainingError("non-finite probability ratio")
        with mock.patch.object(ppo_module, "ppo_loss", side_effect=diverged):
            with self.assertRaises(TrainingError) as ctx:
                ppo_module.train(env, "nam", ppo, policy, seed=0)
        ckpt = ctx.exception.checkpoint
        self.assertIsNotNone(ckpt)
        self.assertEqual(ckpt.metadata["updates"], 0)

    def test_non_finite_actor_output_during_rollout_is_a_training_error(self):
        from echelon import ppo as ppo_module
        from echelon.errors import TrainingError
        from echelon.policy import NamActor

        def nan_forward(actor, x):
            return (actor.task_bias + actor.contributions(x).sum(-1)) * float("nan")

        env, policy, ppo = self._tiny()
        with mock.patch.object(NamActor, "forward", nan_forward):
            with self.assertRaises(TrainingError) as ctx:
                ppo_module.train(env, "nam", ppo, policy, seed=0)
        self.assertIn("during rollout", str(ctx.exception))
        self.assertEqual(ctx.exception.checkpoint.metadata["updates"], 0)


if __name__ == "__main__":
    unittest.main()
