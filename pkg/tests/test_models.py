import numpy as np
import pytest

from flipdistill import tensor as T
from flipdistill.data import ANS, MATCH, SEP
from flipdistill.losses import ConfigError
from flipdistill.models import (CheckpointError, InputError, LoraAdapter,
                                StudentTransformer, TeacherEncoder,
                                build_prompt, config_hash, load_checkpoint,
                                lora_forward, p_yes, save_checkpoint)
from flipdistill.tensor import Tensor


class TestLoraAdapter:
    def test_rank_exceeds_min_rejected(self):
        with pytest.raises(ConfigError):
            LoraAdapter.init(8, 8, 9, np.random.default_rng(0))

    def test_full_rank_warns(self):
        with pytest.warns(UserWarning, match="rank"):
            LoraAdapter.init(8, 8, 8, np.random.default_rng(0))

    def test_zero_decoder_is_exact_identity(self):
        rng = np.random.default_rng(1)
        w0 = Tensor(rng.normal(size=(8, 8)))
        ad = LoraAdapter.init(8, 8, 4, rng)
        ad.b.data[:] = 0.0
        x = Tensor(rng.normal(size=(5, 8)))
        h, _, _ = lora_forward(w0, ad, x)
        base = T.matmul(x, w0.T)
        assert np.array_equal(h.data, base.data)  # bitwise

    def test_dense_recompute_oracle(self):
        rng = np.random.default_rng(2)
        w0 = Tensor(rng.normal(size=(8, 8)))
        ad = LoraAdapter.init(8, 8, 4, rng)
        ad.a.data[:] = rng.normal(size=(4, 8))
        ad.b.data[:] = rng.normal(size=(8, 4))
        x = Tensor(rng.normal(size=(6, 8)))
        h, z, _ = lora_forward(w0, ad, x)
        dense = x.data @ (w0.data + ad.b.data @ ad.a.data).T
        assert np.abs(h.data - dense).max() <= 1e-12
        assert np.abs(z.data - x.data @ ad.a.data.T).max() <= 1e-12

    def test_shape_mismatch(self):
        rng = np.random.default_rng(3)
        w0 = Tensor(rng.normal(size=(8, 8)))
        ad = LoraAdapter.init(8, 8, 4, rng)
        with pytest.raises(T.DimensionError):
            lora_forward(w0, ad, Tensor(rng.normal(size=(5, 7))))

    def test_dropout_only_in_training(self):
        rng = np.random.default_rng(4)
        w0 = Tensor(rng.normal(size=(8, 8)))
        ad = LoraAdapter.init(8, 8, 4, rng, dropout_rate=0.5)
        x = Tensor(rng.normal(size=(5, 8)))
        h1, _, _ = lora_forward(w0, ad, x)
        h2, _, _ = lora_forward(w0, ad, x)
        assert np.array_equal(h1.data, h2.data)
        ht, _, _ = lora_forward(w0, ad, x, training=True,
                                rng=np.random.default_rng(5))
        assert not np.array_equal(ht.data, h1.data)

    def test_predrop_z_matches_clean_projection(self):
        rng = np.random.default_rng(6)
        w0 = Tensor(rng.normal(size=(8, 8)))
        ad = LoraAdapter.init(8, 8, 4, rng, dropout_rate=0.5)
        x = Tensor(rng.normal(size=(5, 8)))
        _, z, z_pre = lora_forward(w0, ad, x, training=True,
                                   rng=np.random.default_rng(7),
                                   want_predrop_z=True)
        assert np.array_equal(z_pre.data, x.data @ ad.a.data.T)
        assert not np.array_equal(z.data, z_pre.data)


class TestBuildPrompt:
    def test_layout(self):
        prompt, si, sj = build_prompt([10, 11], [12, 13, 14], max_len=40)
        assert prompt == [MATCH, 10, 11, SEP, 12, 13, 14, ANS]
        assert prompt[si[0]:si[1]] == [10, 11]
        assert prompt[sj[0]:sj[1]] == [12, 13, 14]

    def test_empty_text_rejected(self):
        with pytest.raises(InputError):
            build_prompt([], [1], max_len=40)

    def test_overflow_rejected(self):
        with pytest.raises(InputError, match="max_len"):
            build_prompt(list(range(30)), list(range(30)), max_len=40)


class TestPYes:
    def test_symmetric_logits(self):
        assert p_yes(Tensor([0.0, 0.0])).item() == pytest.approx(0.5)

    def test_hand_arithmetic(self):
        assert p_yes(Tensor([2.0, 0.0])).item() == pytest.approx(0.8808, abs=1e-4)
        assert p_yes(Tensor([0.0, 2.0])).item() == pytest.approx(0.1192, abs=1e-4)

    def test_stable_at_large_logits(self):
        v = p_yes(Tensor([500.0, -500.0])).item()
        assert 0.0 < v <= 1.0 and np.isfinite(v)


class TestTeacherEncoder:
    def test_permutation_invariance(self, toy_model_cfg):
        t = TeacherEncoder(toy_model_cfg, np.random.default_rng(0))
        toks = [10, 25, 31, 40, 7]
        a = t.encode(toks).data
        b = t.encode(toks[::-1]).data
        assert np.allclose(a, b, atol=1e-12)

    def test_repeated_token_equals_single(self, toy_model_cfg):
        t = TeacherEncoder(toy_model_cfg, np.random.default_rng(0))
        assert np.allclose(t.encode([9]).data, t.encode([9, 9, 9]).data,
                           atol=1e-12)

    def test_out_of_vocab_maps_to_unk(self, toy_model_cfg):
        t = TeacherEncoder(toy_model_cfg, np.random.default_rng(0))
        assert np.array_equal(t.encode([99999]).data, t.encode([0]).data)

    def test_empty_sequence_rejected(self, toy_model_cfg):
        t = TeacherEncoder(toy_model_cfg, np.random.default_rng(0))
        with pytest.raises(InputError):
            t.encode([])

    def test_output_width(self, toy_model_cfg):
        t = TeacherEncoder(toy_model_cfg, np.random.default_rng(0))
        assert t.encode([6, 7, 8]).data.shape == (toy_model_cfg.teacher_dim,)

    def test_attention_toggle_changes_output(self, toy_model_cfg):
        t = TeacherEncoder(toy_model_cfg, np.random.default_rng(0))
        with_attn = t.encode([6, 7, 8]).data
        t.attention_enabled = False
        without = t.encode([6, 7, 8]).data
        assert not np.allclose(with_attn, without)

    def test_freeze_strips_grad_machinery(self, toy_model_cfg):
        t = TeacherEncoder(toy_model_cfg, np.random.default_rng(0))
        t.freeze()
        assert all(not p.requires_grad for p in t.parameters().values())
        out = t.encode([6, 7])
        T.reduce_sum(out).backward()
        assert t.emb.grad is None


class TestStudentTransformer:
    def test_zero_decoder_adapters_are_identity_over_prompts(
            self, toy_model_cfg, tiny_corpus):
        _, (train_ex, _, _) = tiny_corpus
        sa = StudentTransformer(toy_model_cfg, np.random.default_rng(1))
        sb = StudentTransformer(toy_model_cfg, np.random.default_rng(2))
        # same frozen base, different adapters
        for name, p in sa.parameters().items():
            if "lora" not in name:
                sb.parameters()[name].data[:] = p.data
        for s in (sa, sb):
            for name, p in s.trainable_parameters().items():
                if name.endswith(".b"):
                    p.data[:] = 0.0
        for ex in train_ex[:50]:
            prompt, _, _ = build_prompt(ex.text_i, ex.text_j, toy_model_cfg.max_len)
            la, _ = sa.forward(prompt)
            lb, _ = sb.forward(prompt)
            assert np.array_equal(la.data, lb.data)  # bitwise

    def test_trainable_census(self, student, toy_model_cfg):
        cfg = toy_model_cfg
        trainable = student.trainable_parameters()
        assert all("lora" in n for n in trainable)
        # 4 adapters per layer, each with a (r x k) and b (k x r)
        want = cfg.student_layers * 4 * 2 * cfg.rank() * cfg.student_width
        assert sum(p.size for p in trainable.values()) == want
        assert 0.0 < student.frozen_fraction() < 1.0
        frozen = [p for n, p in student.parameters().items() if "lora" not in n]
        assert all(not p.requires_grad for p in frozen)

    def test_forward_shapes_and_determinism(self, student):
        logits, z = student.forward([MATCH, 10, SEP, 11, ANS])
        assert logits.data.shape == (2,)
        assert z.data.shape == (5, student.cfg.rank())
        logits2, _ = student.forward([MATCH, 10, SEP, 11, ANS])
        assert np.array_equal(logits.data, logits2.data)

    def test_forward_length_guard(self, student):
        with pytest.raises(InputError):
            student.forward(list(range(6, 6 + student.cfg.max_len + 1)))
        with pytest.raises(InputError):
            student.forward([])

    def test_causality(self, student):
        # readout sits at the final position; changing a later token must
        # not affect earlier positions' pooled rows
        base_logits, base_z = student.forward([MATCH, 10, 11, SEP, 12, ANS])
        _, z2 = student.forward([MATCH, 10, 11, SEP, 13, ANS])
        assert np.allclose(base_z.data[:4], z2.data[:4], atol=1e-12)
        assert not np.array_equal(base_z.data[4], z2.data[4])

    def test_encode_pair_pools_span_rows(self, student):
        text_i, text_j = [10, 11, 12], [20, 21]
        enc = student.encode_pair(text_i, text_j)
        prompt, si, sj = build_prompt(text_i, text_j, student.cfg.max_len)
        logits, z = student.forward(prompt)
        assert np.abs(enc.r_i.data - z.data[si[0]:si[1]].mean(axis=0)).max() <= 1e-12
        assert np.abs(enc.r_j.data - z.data[sj[0]:sj[1]].mean(axis=0)).max() <= 1e-12
        assert np.array_equal(enc.logits.data, logits.data)

    def test_gradients_reach_only_adapters(self, student):
        enc = student.encode_pair([10, 11], [12, 13])
        T.reduce_sum(enc.logits).backward()
        grads = [p.grad is not None
                 for p in student.trainable_parameters().values()]
        assert any(grads)
        assert student.emb.grad is None and student.lm_head.grad is None

    def test_pool_source_variants(self, toy_model_cfg):
        import dataclasses
        base = None
        for src in ("q", "k", "v", "o"):
            cfg = dataclasses.replace(toy_model_cfg, pool_source=src)
            s = StudentTransformer(cfg, np.random.default_rng(3))
            _, z = s.forward([MATCH, 10, SEP, 11, ANS])
            if base is None:
                base = z.data
            else:
                assert not np.array_equal(z.data, base)


class TestCheckpoints:
    def test_round_trip_bitwise(self, tmp_path, toy_model_cfg):
        s = StudentTransformer(toy_model_cfg, np.random.default_rng(4))
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, s, toy_model_cfg)
        saved = {n: p.data.copy() for n, p in s.trainable_parameters().items()}
        for p in s.trainable_parameters().values():
            p.data[:] = 123.0
        load_checkpoint(path, s, toy_model_cfg)
        for n, p in s.trainable_parameters().items():
            assert np.array_equal(p.data, saved[n])

    def test_byte_determinism(self, tmp_path, toy_model_cfg):
        s = StudentTransformer(toy_model_cfg, np.random.default_rng(5))
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, s, toy_model_cfg)
        save_checkpoint(p2, s, toy_model_cfg)
        assert p1.read_bytes() == p2.read_bytes()

    def test_config_hash_mismatch_rejected(self, tmp_path, toy_model_cfg):
        import dataclasses
        s = StudentTransformer(toy_model_cfg, np.random.default_rng(6))
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, s, toy_model_cfg)
        other = dataclasses.replace(toy_model_cfg, lora_init_std=0.02)
        with pytest.raises(CheckpointError, match="hash"):
            load_checkpoint(path, s, other)

    def test_missing_file(self, tmp_path, toy_model_cfg):
        s = StudentTransformer(toy_model_cfg, np.random.default_rng(7))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "nope.ckpt", s, toy_model_cfg)

    def test_corrupt_magic_rejected(self, tmp_path, toy_model_cfg):
        s = StudentTransformer(toy_model_cfg, np.random.default_rng(8))
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, s, toy_model_cfg)
        raw = bytearray(path.read_bytes())
        raw[0] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError):
            load_checkpoint(path, s, toy_model_cfg)


class TestConfigHash:
    def test_stable(self, toy_model_cfg):
        assert config_hash(toy_model_cfg) == config_hash(toy_model_cfg)

    def test_sensitive_to_fields(self, toy_model_cfg):
        import dataclasses
        other = dataclasses.replace(toy_model_cfg, student_width=32)
        assert config_hash(other) != config_hash(toy_model_cfg)
