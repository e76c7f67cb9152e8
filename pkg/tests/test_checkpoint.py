import sys
import tempfile
import unittest
from pathlib import Path


class TestCheckpoint(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        root = Path(__file__).resolve().parents[1]
        sys.path.insert(0, str(root))
        try:
            import h5py  # noqa: F401
            import torch  # noqa: F401
            import scipy  # noqa: F401
            import gymnasium  # noqa: F401
        except Exception as e:  # pragma: no cover
            raise unittest.SkipTest(f"required dependency not installed: {e}")

    def _checkpoint(self, kind="nam"):
        from echelon.env import SupplyChainConfig
        from echelon.netcore import make_generator
        from echelon.policy import (
            PolicyCheckpoint,
            PolicyConfig,
            Standardizer,
            build_actor,
            build_critic,
        )

        env_cfg = SupplyChainConfig(horizon=12, init_inv_std=10.0)
        cfg = PolicyConfig(
            kind=kind, hidden_layers=1, hidden_width=4, num_subnets=2, critic_widths=(5,)
        )
        return PolicyCheckpoint(
            actor=build_actor(cfg, 33, 3, generator=make_generator(3)),
            critic=build_critic(cfg, 33, generator=make_generator(4)),
            standardizer=Standardizer.for_config(env_cfg),
            env_config=env_cfg,
            policy_config=cfg,
            metadata={"seed": 3, "timesteps": 128},
        )

    def test_round_trip_is_bit_exact(self):
        import numpy as np
        import torch

        from echelon.checkpoint import load_checkpoint, save_checkpoint

        for kind in ("nam", "mlp"):
            ckpt = self._checkpoint(kind)
            with tempfile.TemporaryDirectory() as tmp:
                path = save_checkpoint(ckpt, Path(tmp) / "nested" / f"{kind}.h5")
                loaded = load_checkpoint(path)

            self.assertEqual(loaded.kind, kind)
            self.assertEqual(loaded.env_config, ckpt.env_config)
            self.assertEqual(loaded.policy_config, ckpt.policy_config)
            self.assertEqual(loaded.metadata, {"seed": 3, "timesteps": 128})
            for a, b in ((ckpt.actor, loaded.actor), (ckpt.critic, loaded.critic)):
                sa, sb = a.state_dict(), b.state_dict()
                self.assertEqual(set(sa), set(sb))
                for name in sa:
                    self.assertTrue(torch.equal(sa[name], sb[name]), name)
            np.testing.assert_array_equal(
                loaded.standardizer.obs_offset, ckpt.standardizer.obs_offset
            )

            obs = np.concatenate([[40.0, 90.0, 210.0], np.arange(30, dtype=float)])
            np.testing.assert_array_equal(loaded.means(obs), ckpt.means(obs))

    def test_missing_file(self):
        from echelon.checkpoint import load_checkpoint

        with self.assertRaises(FileNotFoundError) as ctx:
            load_checkpoint("/nonexistent/seed_0.h5")
        self.assertIn("seed_0.h5", str(ctx.exception))

    def test_malformed_files(self):
        import h5py

        from echelon.checkpoint import load_checkpoint, save_checkpoint
        from echelon.errors import FormatError

        with tempfile.TemporaryDirectory() as tmp:
            bare = Path(tmp) / "bare.h5"
            with h5py.File(bare, "w") as f:
                f.create_group("actor")
            with self.assertRaises(FormatError):
                load_checkpoint(bare)

            path = save_checkpoint(self._checkpoint(), Path(tmp) / "ok.h5")
            with h5py.File(path, "a") as f:
                del f["critic"]
            with self.assertRaises(FormatError):
                load_checkpoint(path)

            path = save_checkpoint(self._checkpoint(), Path(tmp) / "v.h5")
            with h5py.File(path, "a") as f:
                f.attrs["metadata"] = '{"format_version": 99}'
            with self.assertRaises(FormatError):
                load_checkpoint(path)


if __name__ == "__main__":
    unittest.main()
