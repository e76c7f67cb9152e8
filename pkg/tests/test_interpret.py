import sys
import tempfile
import unittest
from pathlib import Path


def _checkpoint(kind="nam", num_subnets=2, hidden=(4,), seed=0, horizon=12):
    from echelon.env import SupplyChainConfig
    from echelon.netcore import make_generator
    from echelon.policy import (
        PolicyCheckpoint,
        PolicyConfig,
        Standardizer,
        build_actor,
        build_critic,
    )

    env_cfg = SupplyChainConfig(horizon=horizon)
    cfg = PolicyConfig(
        kind=kind,
        hidden_layers=len(hidden),
        hidden_width=hidden[0],
        num_subnets=num_subnets,
        critic_widths=(4,),
    )
    return PolicyCheckpoint(
        actor=build_actor(cfg, 33, 3, generator=make_generator(seed)),
        critic=build_critic(cfg, 33, generator=make_generator(seed + 1)),
        standardizer=Standardizer.for_config(env_cfg),
        env_config=env_cfg,
        policy_config=cfg,
        metadata={"seed": seed},
    )


class TestInterpret(unittest.TestCase):
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

    def test_collect_states(self):
        import numpy as np

        from echelon.interpret import collect_states

        ckpt = _checkpoint()
        one = collect_states(ckpt, ckpt.env_config, 1, seed=3)
        self.assertEqual(one.shape, (12, 33))
        three = collect_states(ckpt, ckpt.env_config, 3, seed=3)
        self.assertEqual(three.shape, (36, 33))
        np.testing.assert_array_equal(three[:12], one)
        np.testing.assert_array_equal(collect_states(ckpt, ckpt.env_config, 3, seed=3), three)

    def test_zero_weights_give_flat_curves_and_zero_importance(self):
        import numpy as np
        import torch

        from echelon.interpret import collect_states, feature_importance, trace_shape_functions

        ckpt = _checkpoint()
        with torch.no_grad():
            ckpt.actor.task_weights.zero_()
        states = collect_states(ckpt, ckpt.env_config, 2, seed=0)
        table = trace_shape_functions(ckpt, states, grid_points=16, bins=4)
        self.assertEqual(table.contributions.shape, (3, 33, 16))
        self.assertTrue(np.all(table.contributions == 0.0))
        report = feature_importance(ckpt, states)
        self.assertTrue(np.all(report.importance == 0.0))

    def test_identity_subnet_gives_linear_curve(self):
        import numpy as np
        import torch

        from echelon.interpret import trace_shape_functions

        ckpt = _checkpoint(num_subnets=1, hidden=(1,))
        shift = 5.0
        with torch.no_grad():
            bank = ckpt.actor.bank
            # elu(z + shift) == z + shift for z > -shift
            bank.weights[0].fill_(1.0)
            bank.biases[0].fill_(shift)
            bank.weights[1].fill_(1.0)
            bank.biases[1].fill_(-shift)
            ckpt.actor.task_weights.fill_(1.0)
        rng = np.random.default_rng(0)
        states = rng.uniform(0.0, 80.0, size=(50, 33))
        table = trace_shape_functions(ckpt, states, grid_points=32, bins=4)
        std = ckpt.standardizer
        for t in range(3):
            for i in (0, 2, 17):
                slope = np.diff(table.contributions[t, i]) / np.diff(table.grids[i])
                np.testing.assert_allclose(slope, std.act_scale[t] / std.obs_scale[i], rtol=1e-9)

    def test_table_reconstructs_network_means(self):
        import numpy as np

        from echelon.interpret import collect_states, compile_lookup_policy, trace_shape_functions
        from echelon.netcore import as_tensor

        ckpt = _checkpoint(seed=4)
        states = collect_states(ckpt, ckpt.env_config, 5, seed=1)
        table = trace_shape_functions(ckpt, states, grid_points=256, bins=8)
        self.assertEqual(int(table.hist_counts[0].sum()), states.shape[0])

        # exact at grid nodes
        nodes = table.grids[:, [0, 17, 255]].T
        np.testing.assert_allclose(table.reconstruct(nodes), ckpt.means(nodes), atol=1e-9)

        lookup = compile_lookup_policy(table)
        np.testing.assert_allclose(lookup.means(nodes), ckpt.means(nodes), atol=1e-9)
        lo, hi = table.grids[:, 0], table.grids[:, -1]
        points = np.random.default_rng(2).uniform(lo, hi, size=(2000, 33))
        import torch

        with torch.no_grad():
            network = ckpt.actor(as_tensor(ckpt.standardizer.standardize_obs(points))).numpy()
        self.assertLess(float(np.max(np.abs(lookup.standardized_means(points) - network))), 1e-3)

        # the lookup policy acts on table means, clipped and rounded
        action = lookup.act(states[0], np.random.default_rng(0))
        expected = np.floor(np.clip(table.reconstruct(states[0])[0], 0, [100, 90, 80]) + 0.5)
        np.testing.assert_array_equal(action, expected)

    def test_queries_beyond_the_grid_clamp(self):
        import numpy as np

        from echelon.interpret import collect_states, trace_shape_functions

        ckpt = _checkpoint(seed=2)
        states = collect_states(ckpt, ckpt.env_config, 2, seed=0)
        table = trace_shape_functions(ckpt, states, grid_points=16, bins=4)
        for t, i in ((0, 0), (2, 32)):
            below = table.contribution(t, i, table.grids[i, 0] - 1e3)
            above = table.contribution(t, i, table.grids[i, -1] + 1e3)
            self.assertEqual(below, table.contributions[t, i, 0])
            self.assertEqual(above, table.contributions[t, i, -1])
        self.assertTrue(np.isfinite(table.reconstruct(np.full(33, 1e6))).all())

    def test_centered_importance_hand_cases(self):
        import numpy as np

        from echelon.interpret import centered_importance

        fi, means = centered_importance(np.array([[[-1.0]], [[1.0]]]))
        self.assertEqual(float(fi[0, 0]), 1.0)
        self.assertEqual(float(means[0, 0]), 0.0)
        fi, _ = centered_importance(np.full((7, 2, 3), 4.5))
        self.assertTrue(np.all(fi == 0.0))

    def test_feature_importance_centering_keeps_means(self):
        import numpy as np

        from echelon.interpret import collect_states, feature_importance, trace_shape_functions

        ckpt = _checkpoint(seed=6)
        states = collect_states(ckpt, ckpt.env_config, 3, seed=2)
        report = feature_importance(ckpt, states, {"rollouts": 3})
        self.assertEqual(report.importance.shape, (3, 33))
        self.assertTrue(np.all(report.importance >= 0))
        self.assertEqual(report.num_states, 36)
        self.assertTrue(report.state_set["centered"])
        # bias plus centered contributions still reproduce the mean action
        table = trace_shape_functions(ckpt, states, grid_points=8, bins=2)
        np.testing.assert_allclose(report.centered_bias, ckpt.means(states).mean(axis=0), atol=1e-9)
        self.assertEqual(table.task_names, report.task_names)

    def test_aggregate_and_top_features(self):
        import numpy as np

        from echelon.interpret import FeatureImportanceReport, aggregate_importance, top_features

        names = ["I0", "I1", "R0(t-1)", "R1(t-1)"]

        def report(values):
            return FeatureImportanceReport(
                importance=np.array([values], dtype=float),
                feature_names=names,
                task_names=["R0"],
                centered_bias=np.zeros(1),
                num_states=1,
            )

        reports = [
            report([4.0, 1.0, 2.0, 0.0]),
            report([2.0, 2.0, 1.0, 0.0]),
            report([6.0, 3.0, 0.0, 0.0]),
        ]
        agg = aggregate_importance(reports)
        np.testing.assert_allclose(agg.median[0], [4.0, 2.0, 1.0, 0.0])
        np.testing.assert_allclose(agg.median_normalized[0], [1.0, 0.5, 0.5, 0.0])
        self.assertEqual(agg.num_reports, 3)
        self.assertEqual(top_features(agg, "R0", k=2), ["I0", "I1"])
        self.assertEqual(top_features(reports[0], 0, k=2, exclude=("I",)), ["R0(t-1)", "R1(t-1)"])

        zero = aggregate_importance([report([0.0, 0.0, 0.0, 0.0])])
        self.assertTrue(np.all(zero.median_normalized == 0.0))

    def test_table_files(self):
        try:
            import pandas  # noqa: F401
        except Exception as e:  # pragma: no cover
            self.skipTest(f"required dependency not installed: {e}")
        import numpy as np

        from echelon.errors import FormatError
        from echelon.interpret import (
            FeatureImportanceReport,
            LookupPolicy,
            ShapeFunctionTable,
            collect_states,
            feature_importance,
            trace_shape_functions,
        )

        ckpt = _checkpoint(seed=8)
        states = collect_states(ckpt, ckpt.env_config, 2, seed=5)
        table = trace_shape_functions(ckpt, states, grid_points=12, bins=3)
        with tempfile.TemporaryDirectory() as tmp:
            written = table.write_csv(Path(tmp) / "shapes")
            self.assertEqual(
                sorted(p.name for p in written),
                ["R0.csv", "R1.csv", "R2.csv", "bias.csv", "histograms.csv"],
            )
            from_csv = ShapeFunctionTable.read_csv(Path(tmp) / "shapes", metadata=table.metadata)
            lookup = LookupPolicy.from_json(table.to_json(Path(tmp) / "shapes.json"))
            fi_path = feature_importance(ckpt, states).write_csv(Path(tmp) / "fi.csv")
            fi = FeatureImportanceReport.read_csv(fi_path)

            broken = Path(tmp) / "broken.json"
            broken.write_text(
                '{"feature_names": ["I0"], "task_names": ["R0"], "grids": [[0.0, 0.0]]}'
            )
            with self.assertRaises(FormatError):
                ShapeFunctionTable.from_json(broken)

        self.assertEqual(from_csv.feature_names, table.feature_names)
        np.testing.assert_allclose(from_csv.contributions, table.contributions)
        np.testing.assert_array_equal(from_csv.hist_counts, table.hist_counts)
        np.testing.assert_allclose(lookup.means(states), table.reconstruct(states))
        self.assertEqual(fi.feature_names[0], "I0")
        self.assertEqual(fi.importance.shape, (3, 33))

        stripped = ShapeFunctionTable.from_dict({**table.to_dict(), "metadata": {}})
        with self.assertRaises(FormatError):
            LookupPolicy(stripped)

    def test_mlp_checkpoints_are_refused(self):
        import numpy as np

        from echelon.errors import ContractError
        from echelon.interpret import feature_importance, trace_shape_functions

        ckpt = _checkpoint(kind="mlp")
        states = np.zeros((4, 33))
        for fn in (trace_shape_functions, feature_importance):
            with self.assertRaises(ContractError) as ctx:
                fn(ckpt, states)
            self.assertIn("requires a NAM checkpoint", str(ctx.exception))

    def test_empty_state_set(self):
        import numpy as np

        from echelon.errors import ContractError
        from echelon.interpret import trace_shape_functions

        with self.assertRaises(ContractError):
            trace_shape_functions(_checkpoint(), np.zeros((0, 33)))


if __name__ == "__main__":
    unittest.main()
