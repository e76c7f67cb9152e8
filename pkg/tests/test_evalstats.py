import json
import sys
import tempfile
import unittest
from pathlib import Path


class _ZeroPolicy:
    def act(self, observation, rng, deterministic=True):
        import numpy as np

        return np.zeros(3, dtype=np.int64)


class TestEvalStats(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        root = Path(__file__).resolve().parents[1]
        sys.path.insert(0, str(root))
        try:
            import torch  # noqa: F401
            import scipy  # noqa: F401
            import yaml  # noqa: F401
            import gymnasium  # noqa: F401
        except Exception as e:  # pragma: no cover
            raise unittest.SkipTest(f"required dependency not installed: {e}")

    def test_iqm_small_cases(self):
        import numpy as np

        from echelon.evalstats import iqm

        self.assertAlmostEqual(iqm([1, 2, 3, 4]), 2.5, places=12)
        self.assertAlmostEqual(iqm([7.0] * 9), 7.0, places=12)
        # replicating every value leaves the statistic unchanged
        values = [1.0, 2.0, 3.0, 4.0, 10.0]
        self.assertAlmostEqual(iqm(np.repeat(values, 4)), iqm(values), places=12)
        columns = np.array([[1, 5], [2, 6], [3, 7], [4, 8]])
        np.testing.assert_allclose(iqm(columns, axis=0), [2.5, 6.5])

    def test_iqm_matches_brute_force(self):
        import numpy as np

        from echelon.evalstats import iqm

        rng = np.random.default_rng(0)
        for n in (5, 8, 13):
            x = rng.normal(size=n)
            # expand each value into 4 copies; the middle half is then whole items
            expanded = np.sort(np.repeat(x, 4))
            expected = expanded[n : 3 * n].mean()
            self.assertAlmostEqual(iqm(x), float(expected), delta=1e-12)

    def test_iqm_empty_sample(self):
        from echelon.errors import ContractError
        from echelon.evalstats import iqm

        with self.assertRaises(ContractError):
            iqm([])

    def test_bootstrap_ci(self):
        import numpy as np

        from echelon.errors import ContractError
        from echelon.evalstats import bootstrap_ci

        lo, hi = bootstrap_ci([3.0] * 10, n_resamples=200, rng=np.random.default_rng(1))
        self.assertEqual((lo, hi), (3.0, 3.0))

        data = np.random.default_rng(2).normal(size=40)
        a = bootstrap_ci(data, n_resamples=500, rng=np.random.default_rng(9))
        b = bootstrap_ci(data, n_resamples=500, rng=np.random.default_rng(9))
        self.assertEqual(a, b)
        self.assertLessEqual(a[0], a[1])

        # statistics without an axis argument are applied per resample
        c = bootstrap_ci(
            data,
            statistic=lambda row: float(np.median(row)),
            n_resamples=200,
            rng=np.random.default_rng(3),
        )
        self.assertLessEqual(c[0], c[1])

        with self.assertRaises(ContractError):
            bootstrap_ci([1.0])
        with self.assertRaises(ContractError):
            bootstrap_ci([1.0, 2.0], n_resamples=50)

    def test_evaluate_counts_and_matches_manual_rollouts(self):
        import numpy as np

        from echelon import seeding
        from echelon.config import EvalConfig
        from echelon.env import SupplyChainConfig
        from echelon.evalstats import evaluate, rollout_policy
        from echelon.policy import BaseStockPolicy, RandomPolicy

        env_cfg = SupplyChainConfig()
        eval_cfg = EvalConfig(
            num_seeds=2, rollouts_per_seed=3, horizon=10, bootstrap_samples=200, seed=11
        )
        policies = {4: BaseStockPolicy(env_cfg), 9: RandomPolicy(env_cfg)}
        report = evaluate(policies, env_cfg, eval_cfg, label="mixed")
        self.assertEqual(report.returns.shape, (2, 3))
        self.assertEqual(report.seeds, [4, 9])
        self.assertEqual(report.step_rewards.shape, (6, 10))
        self.assertLessEqual(report.ci[0], report.ci[1])
        np.testing.assert_allclose(
            report.step_rewards.sum(axis=1), report.returns.ravel(), atol=1e-9
        )

        config = env_cfg.with_horizon(10)
        total, _ = rollout_policy(
            policies[9],
            config,
            seeding.stream(11, seeding.EVAL, 1, 2),
            policy_rng=seeding.stream(11, seeding.EVAL, 1, 2, 1),
        )
        self.assertEqual(total, report.returns[1, 2])

        again = evaluate(policies, env_cfg, eval_cfg, label="mixed")
        np.testing.assert_array_equal(again.returns, report.returns)
        self.assertEqual(again.ci, report.ci)
        self.assertEqual(again.config_digest, report.config_digest)

    def test_zero_orders_without_demand_only_pay_holding(self):
        import numpy as np

        from echelon import seeding
        from echelon.config import EvalConfig
        from echelon.env import SupplyChainConfig, reset
        from echelon.evalstats import evaluate

        env_cfg = SupplyChainConfig()
        eval_cfg = EvalConfig(
            num_seeds=1, rollouts_per_seed=4, horizon=15, bootstrap_samples=100, seed=5
        )
        report = evaluate({0: _ZeroPolicy()}, env_cfg, eval_cfg, demand=0)
        h = np.asarray(env_cfg.holding_cost)
        config = env_cfg.with_horizon(15)
        for r in range(4):
            state, _ = reset(config, seeding.stream(5, seeding.EVAL, 0, r))
            expected = -15 * float(h @ state.inventory)
            self.assertAlmostEqual(float(report.returns[0, r]), expected, delta=1e-9)

    def test_report_files(self):
        try:
            import pandas as pd
        except Exception as e:  # pragma: no cover
            self.skipTest(f"required dependency not installed: {e}")
        import numpy as np

        from echelon.config import EvalConfig
        from echelon.env import SupplyChainConfig
        from echelon.evalstats import EvalReport, evaluate
        from echelon.policy import RandomPolicy

        env_cfg = SupplyChainConfig()
        eval_cfg = EvalConfig(num_seeds=2, rollouts_per_seed=2, horizon=5, bootstrap_samples=100)
        policies = {0: RandomPolicy(env_cfg), 1: RandomPolicy(env_cfg)}
        report = evaluate(policies, env_cfg, eval_cfg, label="random")

        with tempfile.TemporaryDirectory() as tmp:
            path = report.to_json(Path(tmp) / "report.json")
            loaded = EvalReport.from_json(path)
            self.assertEqual(json.loads(path.read_text())["ci_percentiles"], [5.0, 95.0])
            returns = pd.read_csv(report.write_returns_csv(Path(tmp) / "returns.csv"))
            traj = pd.read_csv(report.write_trajectories_csv(Path(tmp) / "traj.csv"))

        np.testing.assert_array_equal(loaded.returns, report.returns)
        self.assertEqual(loaded.iqm, report.iqm)
        self.assertEqual(list(returns.columns), ["seed", "rollout", "return"])
        self.assertEqual(len(returns), 4)
        self.assertEqual(len(traj), 4 * 5)
        sums = traj.groupby(["seed", "rollout"])["reward"].sum().to_numpy()
        np.testing.assert_allclose(sums, report.returns.ravel(), atol=1e-9)
        self.assertEqual(report.per_step_iqm().shape, (5,))

    def test_from_json_errors(self):
        from echelon.errors import FormatError
        from echelon.evalstats import EvalReport

        with self.assertRaises(FileNotFoundError):
            EvalReport.from_json("/nonexistent/report.json")
        with tempfile.TemporaryDirectory() as tmp:
            bad = Path(tmp) / "bad.json"
            bad.write_text('{"label": "x"}')
            with self.assertRaises(FormatError):
                EvalReport.from_json(bad)

    def test_load_checkpoints_names_missing_seed(self):
        from echelon.evalstats import load_checkpoints

        with self.assertRaises(FileNotFoundError) as ctx:
            load_checkpoints({17: "/nonexistent/seed_17.h5"})
        self.assertIn("seed 17", str(ctx.exception))
        self.assertIn("/nonexistent/seed_17.h5", str(ctx.exception))


if __name__ == "__main__":
    unittest.main()
