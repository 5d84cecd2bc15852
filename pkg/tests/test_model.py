"""Transformer forward/backward, checkpointing, optimizer, and KV caching."""

import numpy as np
import pytest

from maskdiff.model import (
    CHECKPOINT_MAGIC,
    AdamState,
    KvCache,
    Model,
    ModelConfig,
    desk_config,
    load_model,
)
from maskdiff.sequence import AttentionMask, block_mask_matrix, build_full_mask

SMALL = ModelConfig(
    n_layers=2, d_model=16, n_heads=2, d_ff=32, max_len=12, vocab_size=29, seed=3
)


def block_mask(length: int, boundary: int) -> AttentionMask:
    return AttentionMask(block_mask_matrix(length, boundary), boundary)


def _rows_nll(logits, b_idx, p_idx, targets, weights):
    rows = logits[b_idx, p_idx].astype(np.float64)
    m = rows.max(axis=-1, keepdims=True)
    lse = (m + np.log(np.exp(rows - m).sum(axis=-1, keepdims=True)))[:, 0]
    nll = lse - rows[np.arange(rows.shape[0]), targets]
    return float((nll * weights).sum())


class TestGradients:
    def test_analytic_gradients_match_central_differences(self):
        """Every parameter tensor's analytic gradient agrees with finite
        differences at f64, checking at least 50 entries overall."""
        model = Model(SMALL, dtype=np.float64)
        rng = np.random.default_rng(7)
        ids = rng.integers(0, SMALL.vocab_size, size=(2, 10))
        mask = block_mask(10, 4)
        b_idx = np.array([0, 0, 1, 1, 1])
        p_idx = np.array([4, 7, 5, 8, 9])
        targets = rng.integers(0, SMALL.vocab_size, size=5)
        weights = np.array([0.7, 1.3, 0.5, 1.0, 2.0])

        def loss_fn(mdl, h):
            rows_h = h[b_idx, p_idx]
            rows = rows_h @ mdl.params["head_w"] + mdl.params["head_b"]
            m = rows.max(axis=-1, keepdims=True)
            e = np.exp(rows - m)
            p = e / e.sum(axis=-1, keepdims=True)
            lse = (m + np.log(e.sum(axis=-1, keepdims=True)))[:, 0]
            nll = lse - rows[np.arange(5), targets]
            dlogits = p.copy()
            dlogits[np.arange(5), targets] -= 1.0
            dlogits *= weights[:, None]
            return float((nll * weights).sum()), dlogits, (b_idx, p_idx), {}

        loss0, grads, _ = model.loss_and_grad(ids, mask, loss_fn)
        assert np.isfinite(loss0) and loss0 > 0

        h_step = 1e-5
        checked = 0
        for name in model.param_order:
            flat = model.params[name].reshape(-1)
            gflat = grads[name].reshape(-1)
            # check the largest-magnitude gradient entries of every tensor
            top = np.argsort(-np.abs(gflat))[:3]
            for j in top:
                orig = flat[j]
                flat[j] = orig + h_step
                lp = _rows_nll(model.forward(ids, mask), b_idx, p_idx, targets, weights)
                flat[j] = orig - h_step
                lm = _rows_nll(model.forward(ids, mask), b_idx, p_idx, targets, weights)
                flat[j] = orig
                numeric = (lp - lm) / (2 * h_step)
                analytic = gflat[j]
                rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
                assert rel < 1e-4, (
                    f"{name}[{j}]: analytic {analytic:.8g} vs numeric {numeric:.8g} "
                    f"(rel {rel:.2e})"
                )
                checked += 1
        assert checked >= 50

    def test_untouched_rows_receive_zero_head_gradient(self):
        model = Model(SMALL, dtype=np.float64)
        ids = np.full((1, 6), 2, dtype=np.int64)
        mask = block_mask(6, 2)
        b_idx, p_idx = np.array([0]), np.array([3])

        def loss_fn(mdl, h):
            rows = h[b_idx, p_idx] @ mdl.params["head_w"] + mdl.params["head_b"]
            d = np.zeros_like(rows)
            d[0, 1] = 1.0
            return float(rows[0, 1]), d, (b_idx, p_idx), {}

        _, grads, _ = model.loss_and_grad(ids, mask, loss_fn)
        # head gradient only involves the selected row's hidden state
        assert grads["head_w"].shape == model.params["head_w"].shape
        assert np.any(grads["head_w"][:, 1] != 0)
        assert np.all(grads["head_w"][:, 0] == 0)


class TestForwardBasics:
    def test_attention_rows_sum_to_one(self):
        model = Model(SMALL)
        rng = np.random.default_rng(0)
        ids = rng.integers(0, SMALL.vocab_size, size=(2, 9))
        _, trace = model.hidden_states(ids, block_mask(9, 4), want_trace=True)
        seen = 0
        for kind, _, payload in trace:
            if kind == "attn":
                probs = payload[6]
                np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)
                seen += 1
        assert seen == SMALL.n_layers

    def test_fixed_seed_gives_identical_params_and_forward(self):
        a = Model(SMALL)
        b = Model(SMALL)
        for name in a.param_order:
            assert np.array_equal(a.params[name], b.params[name])
        ids = np.arange(8).reshape(1, 8) % SMALL.vocab_size
        mask = build_full_mask(8)
        assert np.array_equal(a.forward(ids, mask), b.forward(ids, mask))

    def test_rejects_out_of_vocab_and_overlong_input(self):
        model = Model(SMALL)
        with pytest.raises(ValueError, match="vocabulary"):
            model.forward(np.array([[0, SMALL.vocab_size]]), build_full_mask(2))
        with pytest.raises(ValueError, match="exceeds"):
            model.forward(np.zeros((1, SMALL.max_len + 1), dtype=np.int64),
                          build_full_mask(SMALL.max_len + 1))
        with pytest.raises(ValueError, match="wide"):
            model.forward(np.zeros((1, 4), dtype=np.int64), build_full_mask(5))

    def test_param_dict_order_is_enforced(self):
        model = Model(SMALL)
        shuffled = dict(reversed(list(model.params.items())))
        with pytest.raises(ValueError, match="order"):
            Model(SMALL, params=shuffled)

    def test_desk_config_capacity(self):
        cfg = desk_config(904)
        model = Model(cfg)
        assert model.n_params() > 500_000  # big enough to be non-trivial
        assert cfg.max_len >= 166  # fits the desk template


class TestBlockIndependence:
    def setup_method(self):
        self.cfg = ModelConfig(
            n_layers=2, d_model=16, n_heads=2, d_ff=32, max_len=16, vocab_size=41, seed=5
        )
        self.model = Model(self.cfg)
        self.L, self.b = 12, 5
        rng = np.random.default_rng(11)
        self.ids = rng.integers(0, 41, size=(2, self.L))
        self.rng = rng

    def test_prefix_hidden_states_bitwise_identical_under_b2_substitution(self):
        mask = block_mask(self.L, self.b)
        h1, _ = self.model.hidden_states(self.ids, mask)
        other = self.ids.copy()
        other[:, self.b:] = self.rng.integers(0, 41, size=(2, self.L - self.b))
        h2, _ = self.model.hidden_states(other, mask)
        assert np.array_equal(h1[:, : self.b], h2[:, : self.b])
        logits1 = self.model.forward(self.ids, mask)
        logits2 = self.model.forward(other, mask)
        assert np.array_equal(logits1[:, : self.b], logits2[:, : self.b])

    def test_full_attention_leaks_b2_into_prefix(self):
        mask = build_full_mask(self.L)
        h1, _ = self.model.hidden_states(self.ids, mask)
        other = self.ids.copy()
        other[:, self.b:] = (other[:, self.b:] + 1) % 41
        h2, _ = self.model.hidden_states(other, mask)
        assert not np.array_equal(h1[:, : self.b], h2[:, : self.b])

    def test_permuting_prefix_ids_changes_prefix_representations(self):
        mask = block_mask(self.L, self.b)
        ids = self.ids.copy()
        ids[0, 0], ids[0, 1] = 3, 17  # guarantee the swap changes content
        swapped = ids.copy()
        swapped[0, 0], swapped[0, 1] = ids[0, 1], ids[0, 0]
        l1 = self.model.forward(ids, mask)
        l2 = self.model.forward(swapped, mask)
        assert np.abs(l1[0, : self.b] - l2[0, : self.b]).max() > 0


class TestKvCache:
    def setup_method(self):
        self.cfg = ModelConfig(
            n_layers=2, d_model=16, n_heads=2, d_ff=32, max_len=16, vocab_size=37, seed=2
        )
        self.model = Model(self.cfg)
        self.L, self.b = 12, 5
        self.mask = block_mask(self.L, self.b)
        self.rng = np.random.default_rng(4)
        self.ids = self.rng.integers(0, 37, size=(2, self.L))

    def fresh_b2(self):
        out = self.ids.copy()
        out[:, self.b:] = self.rng.integers(0, 37, size=(2, self.L - self.b))
        return out

    def test_refresh_every_step_matches_uncached(self):
        cache = KvCache(self.b, refresh_interval=1)
        for _ in range(5):
            ids = self.fresh_b2()
            got = self.model.forward(ids, self.mask, cache)
            ref = self.model.forward(ids, self.mask)
            assert np.abs(got - ref).max() < 1e-5

    def test_prefix_logits_replayed_bitwise_across_steps(self):
        cache = KvCache(self.b, refresh_interval=1)
        first = self.model.forward(self.fresh_b2(), self.mask, cache)
        second = self.model.forward(self.fresh_b2(), self.mask, cache)
        assert np.array_equal(first[:, : self.b], second[:, : self.b])

    def test_prefix_reuse_exact_for_any_b2_ids(self):
        cache = KvCache(self.b, refresh_interval=1)
        for _ in range(6):
            ids = self.fresh_b2()
            got = self.model.forward(ids, self.mask, cache)
            ref = self.model.forward(ids, self.mask)
            assert np.abs(got[:, self.b:] - ref[:, self.b:]).max() < 1e-5

    def test_response_reuse_exact_when_ids_unchanged(self):
        cache = KvCache(self.b, refresh_interval=3)
        ids = self.fresh_b2()
        ref = self.model.forward(ids, self.mask)
        for _ in range(4):  # covers refresh and both reuse steps
            got = self.model.forward(ids, self.mask, cache)
            assert np.abs(got - ref).max() < 1e-5

    def test_response_reuse_is_stale_by_design_then_refreshes(self):
        cache = KvCache(self.b, refresh_interval=2)
        a = self.fresh_b2()
        self.model.forward(a, self.mask, cache)  # step 0: refresh
        b2 = self.fresh_b2()
        stale = self.model.forward(b2, self.mask, cache)  # step 1: reuse
        ref = self.model.forward(b2, self.mask)
        assert np.abs(stale[:, self.b:] - ref[:, self.b:]).max() > 0  # measurably stale
        again = self.model.forward(b2, self.mask, cache)  # step 2: refresh
        assert np.abs(again - ref).max() < 1e-5

    def test_zero_boundary_cache_handles_pure_response(self):
        mask = block_mask(self.L, 0)
        cache = KvCache(0, refresh_interval=1)
        ids = self.rng.integers(0, 37, size=(1, self.L))
        got = self.model.forward(ids, mask, cache)
        ref = self.model.forward(ids, mask)
        assert np.abs(got - ref).max() < 1e-5

    def test_rejects_non_blockwise_mask(self):
        cache = KvCache(0, refresh_interval=1)
        bad = np.ones((self.L, self.L), dtype=bool)
        bad[2, 7] = False
        with pytest.raises(ValueError, match="blockwise"):
            self.model.forward(self.ids, AttentionMask(bad, 0), cache)

    def test_rejects_boundary_mismatch(self):
        cache = KvCache(self.b + 1, refresh_interval=1)
        with pytest.raises(ValueError, match="boundary"):
            self.model.forward(self.ids, self.mask, cache)

    def test_rejects_prefix_change_mid_session(self):
        cache = KvCache(self.b, refresh_interval=1)
        self.model.forward(self.ids, self.mask, cache)
        changed = self.ids.copy()
        changed[0, 0] = (changed[0, 0] + 1) % 37
        with pytest.raises(ValueError, match="prefix ids changed"):
            self.model.forward(changed, self.mask, cache)

    def test_rejects_batch_change_on_reuse_step(self):
        cache = KvCache(0, refresh_interval=4)
        ids = self.rng.integers(0, 37, size=(2, self.L))
        mask = block_mask(self.L, 0)
        self.model.forward(ids, mask, cache)
        with pytest.raises(ValueError, match="batch or length"):
            self.model.forward(ids[:1], mask, cache)


class TestCheckpoint:
    def test_save_load_forward_bitwise(self, tmp_path):
        model = Model(SMALL)
        path = tmp_path / "model.ckpt"
        model.save(path)
        loaded = load_model(path)
        assert loaded.config == model.config
        for name in model.param_order:
            assert np.array_equal(loaded.params[name], model.params[name]), name
        rng = np.random.default_rng(1)
        ids = rng.integers(0, SMALL.vocab_size, size=(2, 10))
        mask = block_mask(10, 4)
        assert np.array_equal(model.forward(ids, mask), loaded.forward(ids, mask))

    def test_expected_vocab_guard_names_the_field(self, tmp_path):
        model = Model(SMALL)
        path = tmp_path / "model.ckpt"
        model.save(path)
        assert load_model(path, expected_vocab=SMALL.vocab_size) is not None
        with pytest.raises(ValueError, match="vocab_size"):
            load_model(path, expected_vocab=SMALL.vocab_size + 1)

    def test_truncated_file_fails_checksum(self, tmp_path):
        model = Model(SMALL)
        path = tmp_path / "model.ckpt"
        model.save(path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-10])
        with pytest.raises(ValueError, match="checksum|truncated"):
            load_model(path)

    def test_tiny_file_reports_truncation(self, tmp_path):
        path = tmp_path / "stub.ckpt"
        path.write_bytes(CHECKPOINT_MAGIC + b"\x01")
        with pytest.raises(ValueError, match="truncated"):
            load_model(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError, match="magic"):
            load_model(path)

    def test_corrupted_byte_fails_checksum(self, tmp_path):
        model = Model(SMALL)
        path = tmp_path / "model.ckpt"
        model.save(path)
        blob = bytearray(path.read_bytes())
        blob[50] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(ValueError, match="checksum"):
            load_model(path)

    def test_trailing_bytes_rejected_even_with_valid_checksum(self, tmp_path):
        import hashlib

        model = Model(SMALL)
        path = tmp_path / "model.ckpt"
        model.save(path)
        body = path.read_bytes()[:-32] + b"\x00\x00\x00\x00"
        path.write_bytes(body + hashlib.sha256(body).digest())
        with pytest.raises(ValueError, match="trailing"):
            load_model(path)


class TestAdam:
    def test_zero_learning_rate_leaves_params_unchanged(self):
        model = Model(SMALL)
        before = {k: v.copy() for k, v in model.params.items()}
        opt = AdamState(lr=0.0)
        grads = {k: np.ones_like(v) for k, v in model.params.items()}
        opt.step(model.params, grads)
        for name in model.param_order:
            assert np.array_equal(model.params[name], before[name])

    def test_step_moves_params_against_gradient(self):
        model = Model(SMALL)
        before = model.params["head_w"].copy()
        opt = AdamState(lr=1e-3)
        grads = {k: np.zeros_like(v) for k, v in model.params.items()}
        grads["head_w"] = np.ones_like(model.params["head_w"])
        opt.step(model.params, grads)
        assert np.all(model.params["head_w"] < before)
        # other tensors see zero gradient and must not move
        assert np.array_equal(model.params["tok_emb"], Model(SMALL).params["tok_emb"])

    def test_two_optimizers_same_inputs_same_trajectory(self):
        m1, m2 = Model(SMALL), Model(SMALL)
        o1, o2 = AdamState(lr=1e-3), AdamState(lr=1e-3)
        rng = np.random.default_rng(9)
        for _ in range(3):
            grads = {k: rng.normal(size=v.shape).astype(v.dtype) for k, v in m1.params.items()}
            o1.step(m1.params, grads)
            o2.step(m2.params, {k: g.copy() for k, g in grads.items()})
        for name in m1.param_order:
            assert np.array_equal(m1.params[name], m2.params[name])
