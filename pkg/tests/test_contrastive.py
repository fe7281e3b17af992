import math
import random

import pytest
import torch

from dacl import contrastive as C
from dacl.errors import ContractError
from dacl.losses import info_nce
from dacl.networks import Encoder, ProjectionHead
from dacl.optim import Adam


def small_pair(seed=0, m=0.99):
    net = Encoder("f", seed, channels=(4, 4, 8, 8))
    head = ProjectionHead("psi", seed + 1, d_in=8, d_out=16)
    return C.EncoderPair.from_query(net, head, m)


def images(n, seed):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, 16, 16, generator=g) * 2 - 1


def scalar_pair(k, q, m):
    """EncoderPair whose only parameter is one scalar per side."""
    pair = small_pair(m=m)
    for net, value in ((pair.query_net, q), (pair.key_net, k)):
        for name, _ in list(net.named_parameters()):
            delattr(net, name)
        net.register_parameter("theta", torch.nn.Parameter(torch.tensor([value], dtype=torch.float64)))
    for head in (pair.query_head, pair.key_head):
        for name, _ in list(head.named_parameters()):
            delattr(head, name)
    return pair


class TestQueue:
    def test_fifo_trace(self):
        a, b, c, d, e, f = torch.eye(6)
        q = C.ContrastiveQueue(4, dim=6)
        q.enqueue(torch.stack([a, b, c, d]))
        q.enqueue(torch.stack([e, f]))
        assert torch.equal(C.negatives_from_queue(q), torch.stack([c, d, e, f]))

    def test_empty_queue_gives_no_negatives(self):
        q = C.ContrastiveQueue(8, dim=3)
        negs = C.negatives_from_queue(q)
        assert negs.shape == (0, 3)
        v = torch.tensor([0.6, 0.8, 0.0])
        assert info_nce(v, v, negs, 0.07).item() == 0.0

    def test_list_oracle_over_random_traces(self):
        rng = random.Random(0)
        counter = 0
        for _ in range(1000):
            cap = rng.randint(1, 12)
            q, oracle = C.ContrastiveQueue(cap, dim=1, dtype=torch.float64), []
            for _ in range(rng.randint(1, 8)):
                batch = list(range(counter, counter + rng.randint(1, 6)))
                counter += len(batch)
                q.enqueue(torch.tensor(batch, dtype=torch.float64).unsqueeze(1))
                oracle = (oracle + batch)[-cap:]
                assert q.size <= cap
            assert q.entries.squeeze(1).tolist() == oracle

    def test_bad_capacity(self):
        with pytest.raises(ContractError):
            C.ContrastiveQueue(0)


class TestMomentum:
    @pytest.mark.parametrize("m,expected", [(1.0, 1.0), (0.0, 0.0), (0.5, 0.5), (0.9, 0.9)])
    def test_scalar_cases(self, m, expected):
        pair = C.momentum_update(scalar_pair(1.0, 0.0, m))
        assert pair.key_net.theta.item() == expected

    @pytest.mark.parametrize("m", [0.5, 0.9, 0.99])
    def test_geometric_contraction(self, m):
        pair = scalar_pair(3.0, 1.0, m)
        gap = 2.0
        for t in range(1, 60):
            C.momentum_update(pair)
            gap = m * gap
            assert abs(pair.key_net.theta.item() - 1.0) == pytest.approx(gap, rel=1e-12)
        assert abs(pair.key_net.theta.item() - 1.0) == pytest.approx(2.0 * m**59, rel=1e-12)

    def test_exact_elementwise(self):
        pair = small_pair(m=0.9)
        with torch.no_grad():
            for p in pair.query_params().values():
                p.add_(0.5)
        before = {k: v.clone() for k, v in pair.key_params().items()}
        C.momentum_update(pair)
        for n, k in pair.key_params().items():
            assert torch.equal(k, 0.9 * before[n] + (1 - 0.9) * pair.query_params()[n])

    def test_structure_mismatch(self):
        pair = small_pair()
        pair.key_head = ProjectionHead("psi", 0, d_in=8, d_out=4)
        with pytest.raises(ContractError):
            C.momentum_update(pair)

    def test_momentum_out_of_range(self):
        with pytest.raises(ContractError):
            C.momentum_update(small_pair(m=1.5))


class TestPairs:
    def test_unit_norm_and_alignment(self):
        pair = small_pair()
        q, k = C.form_pairs_target(images(5, 0), lambda x: -x, pair)
        assert q.shape == k.shape == (5, 16)
        assert torch.allclose(q.norm(dim=1), torch.ones(5), atol=1e-6)
        assert torch.allclose(k.norm(dim=1), torch.ones(5), atol=1e-6)
        assert not k.requires_grad

    def test_identity_generator_gives_unit_similarity(self):
        pair = small_pair()
        q, k = C.form_pairs_target(images(4, 1), lambda x: x, pair)
        assert torch.allclose((q * k).sum(dim=1), torch.ones(4), atol=1e-6)

    def test_source_mirror(self):
        pair = small_pair()
        x_t = images(3, 2)
        q, k = C.form_pairs_source(x_t, lambda x: x * 0.5, pair)
        q2, k2 = C.form_pairs(x_t * 0.5, x_t, pair)
        assert torch.equal(q, q2) and torch.equal(k, k2)

    def test_identical_embeddings_loss(self):
        v = C.normalize(torch.randn(16))
        assert info_nce(v, v, v.expand(7, 16), 0.07).item() == pytest.approx(math.log(8), abs=1e-5)


def run_steps(n_steps, batch=4, capacity=10, seed=0):
    pair = small_pair(seed)
    queue = C.ContrastiveQueue(capacity, dim=16)
    opt = Adam(pair.query_params(), lr=1e-2)
    losses = [C.contrastive_step(images(batch, 100 + s), pair, queue, lambda x: x.flip(-1), 0.07, opt)
              for s in range(n_steps)]
    return pair, queue, losses


class TestStep:
    def test_first_step_fills_queue_with_batch(self):
        _, queue, losses = run_steps(1, batch=4)
        assert queue.size == 4
        assert losses[0] == 0.0

    @pytest.mark.parametrize("n", [1, 2, 3, 7])
    def test_queue_size(self, n):
        _, queue, _ = run_steps(n, batch=4, capacity=10)
        assert queue.size == min(n * 4, 10)

    def test_key_side_never_receives_gradient(self):
        pair, _, losses = run_steps(50, batch=2, capacity=16)
        assert all(math.isfinite(v) for v in losses)
        for p in pair.key_params().values():
            assert p.grad is None and not p.requires_grad

    def test_step_replay(self):
        pair = small_pair(3, m=0.9)
        queue = C.ContrastiveQueue(8, dim=16)
        opt = Adam(pair.query_params(), lr=1e-2)
        G = lambda x: x.flip(-2)
        C.contrastive_step(images(4, 0), pair, queue, G, 0.07, opt)
        key_before = {k: v.clone() for k, v in pair.key_params().items()}
        queue_before = queue.entries.clone()
        x = images(4, 1)
        _, k_expected = C.form_pairs(G(x), x, pair)
        C.contrastive_step(x, pair, queue, G, 0.07, opt)
        for n, k in pair.key_params().items():
            assert torch.equal(k, 0.9 * key_before[n] + (1 - 0.9) * pair.query_params()[n])
        # the positives were embedded with the pre-update key network
        assert torch.equal(queue.entries, torch.cat([queue_before, k_expected]))

    def test_deterministic(self):
        a, qa, la = run_steps(5)
        b, qb, lb = run_steps(5)
        assert la == lb and torch.equal(qa.entries, qb.entries)
        assert all(torch.equal(a.key_params()[n], b.key_params()[n]) for n in a.key_params())
