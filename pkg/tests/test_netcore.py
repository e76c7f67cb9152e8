import sys
import unittest
from pathlib import Path


class TestNetcore(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        root = Path(__file__).resolve().parents[1]
        sys.path.insert(0, str(root))
        try:
            import torch  # noqa: F401
        except Exception as e:  # pragma: no cover
            raise unittest.SkipTest(f"required dependency not installed: {e}")

    def _check_gradients(self, module, loss_fn, samples=4, tol=1e-6):
        import torch

        from echelon.netcore import GradientTape, backward

        named = dict(module.named_parameters())
        grads = backward(GradientTape(loss_fn(), named))
        h = 1e-5
        gen = torch.Generator().manual_seed(0)
        with torch.no_grad():
            for name, p in named.items():
                flat = p.view(-1)
                idx = torch.randperm(flat.numel(), generator=gen)[:samples]
                for k in idx.tolist():
                    orig = float(flat[k])
                    flat[k] = orig + h
                    up = float(loss_fn())
                    flat[k] = orig - h
                    down = float(loss_fn())
                    flat[k] = orig
                    numeric = (up - down) / (2 * h)
                    exact = float(grads[name].view(-1)[k])
                    delta = tol * max(1.0, abs(numeric))
                    self.assertAlmostEqual(exact, numeric, delta=delta, msg=name)

    def test_dense_net_gradients_match_finite_differences(self):
        import torch

        from echelon.netcore import DTYPE, DenseNet, make_generator

        net = DenseNet((5, 7, 6, 2), generator=make_generator(1))
        x = torch.randn(9, 5, dtype=DTYPE, generator=make_generator(2))
        self._check_gradients(net, lambda: (net(x) ** 2).sum())

    def test_subnet_bank_gradients_match_finite_differences(self):
        import torch

        from echelon.netcore import DTYPE, SubnetBank, make_generator

        bank = SubnetBank(4, (3, 3), generator=make_generator(3))
        x = torch.randn(6, 4, dtype=DTYPE, generator=make_generator(4))
        self._check_gradients(bank, lambda: torch.tanh(bank(x)).sum())

    def test_random_actor_critic_configurations(self):
        try:
            import numpy as np
            import scipy  # noqa: F401
            import gymnasium  # noqa: F401
        except Exception as e:  # pragma: no cover
            self.skipTest(f"required dependency not installed: {e}")
        import torch
        from torch.distributions import Normal

        from echelon.netcore import DTYPE, make_generator
        from echelon.policy import PolicyConfig, build_actor, build_critic

        rng = np.random.default_rng(11)
        for trial in range(100):
            cfg = PolicyConfig(
                kind=("nam", "mlp")[trial % 2],
                hidden_layers=int(rng.integers(1, 5)),
                hidden_width=int(rng.integers(8, 33)),
                num_subnets=int(rng.choice([1, 3, 8])),
                critic_widths=(int(rng.integers(8, 65)),) * int(rng.integers(1, 3)),
            )
            actor = build_actor(cfg, 33, 3, generator=make_generator(trial))
            critic = build_critic(cfg, 33, generator=make_generator(1000 + trial))
            x = torch.empty(4, 33, dtype=DTYPE)
            x.uniform_(-1.0, 1.0, generator=make_generator(2000 + trial))
            a = torch.randn(4, 3, dtype=DTYPE, generator=make_generator(3000 + trial))
            both = torch.nn.ModuleDict({"actor": actor, "critic": critic})

            def loss():
                dist = Normal(actor(x), actor.log_std.exp())
                return -dist.log_prob(a).sum() + ((critic(x) - 1.0) ** 2).sum()

            with self.subTest(trial=trial, config=cfg):
                self._check_gradients(both, loss, samples=1, tol=1e-4)

    def test_subnet_units_are_independent(self):
        import torch

        from echelon.netcore import DTYPE, SubnetBank, make_generator

        bank = SubnetBank(6, (4,), generator=make_generator(5))
        x = torch.randn(10, 6, dtype=DTYPE, generator=make_generator(6))
        out = bank(x)
        self.assertEqual(tuple(out.shape), (10, 6))

        shifted = x.clone()
        shifted[:, 2] += 1.0
        moved = bank(shifted)
        self.assertTrue(torch.equal(out[:, [0, 1, 3, 4, 5]], moved[:, [0, 1, 3, 4, 5]]))

        column = x[:, 0]
        units = bank.evaluate_units(2, 5, column)
        for j, unit in enumerate(range(2, 5)):
            full = bank(column.unsqueeze(1).expand(-1, 6).contiguous())[:, unit]
            self.assertTrue(torch.allclose(units[:, j], full, atol=1e-12, rtol=0))

    def test_dense_net_rejects_wrong_width(self):
        import torch

        from echelon.errors import ContractError
        from echelon.netcore import DTYPE, DenseNet

        net = DenseNet((3, 2, 1))
        with self.assertRaises(ContractError):
            net(torch.zeros(1, 4, dtype=DTYPE))

    def test_tape_can_only_be_consumed_once(self):
        import torch

        from echelon.errors import ProtocolError
        from echelon.netcore import DTYPE, DenseNet, GradientTape, backward

        net = DenseNet((2, 3, 1))
        tape = GradientTape(net(torch.ones(1, 2, dtype=DTYPE)).sum(), net.named_parameters())
        grads = backward(tape)
        self.assertEqual(set(grads), {n for n, _ in net.named_parameters()})
        with self.assertRaises(ProtocolError):
            backward(tape)

    def test_adam_zero_gradient_leaves_parameters(self):
        import torch

        from echelon.netcore import Adam, DenseNet

        net = DenseNet((2, 3, 1))
        before = {n: p.detach().clone() for n, p in net.named_parameters()}
        opt = Adam(net.named_parameters(), lr=0.1)
        opt.step({n: torch.zeros_like(p) for n, p in net.named_parameters()})
        for n, p in net.named_parameters():
            self.assertTrue(torch.equal(before[n], p.detach()), n)

    def test_adam_first_step_moves_by_learning_rate(self):
        import torch

        from echelon.netcore import Adam, DenseNet

        net = DenseNet((2, 3, 1))
        before = {n: p.detach().clone() for n, p in net.named_parameters()}
        opt = Adam(net.named_parameters(), lr=0.01)
        grads = {n: torch.full_like(p, 3.0) for n, p in net.named_parameters()}
        opt.step(grads)
        for n, p in net.named_parameters():
            delta = (p.detach() - before[n]).abs()
            self.assertTrue(torch.allclose(delta, torch.full_like(delta, 0.01), atol=1e-9), n)
        self.assertEqual(opt.step_count, 1)

    def test_adam_clips_and_rejects_non_finite(self):
        import torch

        from echelon.errors import TrainingError
        from echelon.netcore import Adam, DenseNet

        net = DenseNet((2, 3, 1))
        opt = Adam(net.named_parameters(), lr=0.01, max_grad_norm=0.5)
        norm = opt.step({n: torch.full_like(p, 2.0) for n, p in net.named_parameters()})
        total = sum(p.numel() for p in net.parameters())
        self.assertAlmostEqual(norm, 2.0 * total ** 0.5, places=9)

        bad = {n: torch.zeros_like(p) for n, p in net.named_parameters()}
        name = next(iter(bad))
        bad[name][...] = float("nan")
        with self.assertRaises(TrainingError) as ctx:
            opt.step(bad)
        self.assertEqual(ctx.exception.parameter, name)


if __name__ == "__main__":
    unittest.main()
