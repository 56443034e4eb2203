import numpy as np
import pytest

from convncf.data import derive_seed
from convncf.embeddings import EmbeddingTables, Variant, init_tables
from convncf.model import (
    ConfigurationError,
    ConvStack,
    FormatError,
    HeadKind,
    IdentityHead,
    LinearHead,
    MergeKind,
    MlpHead,
    ModelSpec,
    convncf_backward,
    convncf_forward,
    head_sections,
    init_conv_stack,
    init_linear_head,
    init_mlp_head,
    load_checkpoint,
    merge,
    merge_backward,
    new_head,
    param_count,
    predict,
    predict_batch,
    save_checkpoint,
)
from convncf.tensor import conv2x2s2_forward, outer, relu

from _oracles import numeric_grad_full


def spec_for(variant, merge_kind, head_kind, K=8, C=4, mlp_layers=2, seed=5):
    head = new_head(head_kind, merge_kind, K, C, mlp_layers, derive_seed(seed, "init_head"))
    return ModelSpec(variant=variant, merge=merge_kind, head=head, K=K)


ALL_COMBOS = [
    (Variant.MF, MergeKind.OUTER, HeadKind.CNN),
    (Variant.FISM, MergeKind.OUTER, HeadKind.CNN),
    (Variant.SVDPP, MergeKind.OUTER, HeadKind.CNN),
    (Variant.MF, MergeKind.OUTER, HeadKind.MLP),
    (Variant.MF, MergeKind.ELEMENTWISE, HeadKind.LINEAR),
    (Variant.MF, MergeKind.ELEMENTWISE, HeadKind.MLP),
    (Variant.MF, MergeKind.CONCAT, HeadKind.MLP),
    (Variant.MF, MergeKind.INNER, HeadKind.IDENTITY),
]


class TestMerge:
    def test_values(self):
        a = np.array([1.0, 2.0])
        b = np.array([3.0, -4.0])
        np.testing.assert_array_equal(merge(MergeKind.ELEMENTWISE, a, b), [3.0, -8.0])
        np.testing.assert_array_equal(merge(MergeKind.CONCAT, a, b), [1.0, 2.0, 3.0, -4.0])
        np.testing.assert_array_equal(merge(MergeKind.OUTER, a, b), [[3.0, -4.0], [6.0, -8.0]])
        assert merge(MergeKind.INNER, a, b) == -5.0

    @pytest.mark.parametrize("kind", list(MergeKind))
    def test_adjoint_matches_finite_difference(self, kind):
        rng = np.random.default_rng(17)
        fU, fI = rng.normal(size=5), rng.normal(size=5)
        d_merged = rng.normal(size=np.shape(merge(kind, fU, fI)))

        def objective(concat_vec):
            m = merge(kind, concat_vec[:5], concat_vec[5:])
            return float(np.sum(np.asarray(m) * d_merged))

        d_fU, d_fI = merge_backward(kind, fU, fI, d_merged)
        got = np.concatenate([d_fU, d_fI])
        want = numeric_grad_full(objective, np.concatenate([fU, fI]))
        np.testing.assert_allclose(got, want, rtol=1e-7, atol=1e-9)

    def test_length_mismatch(self):
        from convncf.tensor import DimensionError

        with pytest.raises(DimensionError):
            merge(MergeKind.OUTER, np.zeros(3), np.zeros(4))


class TestModelSpec:
    def test_every_allowed_combination_constructs(self):
        for variant, mk, hk in ALL_COMBOS:
            spec = spec_for(variant, mk, hk)
            assert spec.head_kind is hk

    def test_rejects_cnn_off_outer(self):
        stack = init_conv_stack(8, 4, 0)
        with pytest.raises(ConfigurationError):
            ModelSpec(variant=Variant.MF, merge=MergeKind.ELEMENTWISE, head=stack, K=8)

    def test_rejects_identity_off_inner(self):
        with pytest.raises(ConfigurationError):
            ModelSpec(variant=Variant.MF, merge=MergeKind.OUTER, head=IdentityHead(), K=8)

    def test_rejects_depth_k_mismatch(self):
        stack = init_conv_stack(8, 4, 0)  # depth 3 covers K=8 only
        with pytest.raises(ConfigurationError):
            ModelSpec(variant=Variant.MF, merge=MergeKind.OUTER, head=stack, K=16)

    def test_rejects_mlp_width_mismatch(self):
        head = init_mlp_head(16, 2, 0)
        with pytest.raises(ConfigurationError):
            ModelSpec(variant=Variant.MF, merge=MergeKind.CONCAT, head=head, K=4)

    def test_rejects_linear_width_mismatch(self):
        with pytest.raises(ConfigurationError):
            ModelSpec(
                variant=Variant.MF, merge=MergeKind.ELEMENTWISE, head=LinearHead(w=np.ones(3)), K=8
            )

    def test_merged_width(self):
        assert spec_for(Variant.MF, MergeKind.OUTER, HeadKind.CNN, K=8).merged_width() == 64
        assert spec_for(Variant.MF, MergeKind.CONCAT, HeadKind.MLP, K=8).merged_width() == 16


class TestConvHead:
    def test_forward_matches_manual_composition(self):
        """The tower score equals explicitly chaining the layer primitives."""
        rng = np.random.default_rng(23)
        stack = init_conv_stack(8, 4, derive_seed(1, "init_head"))
        E = rng.normal(size=(8, 8))
        cache, y = convncf_forward(stack, E)
        x = E.reshape(8, 8, 1)
        for layer in stack.layers:
            _, x = conv2x2s2_forward(x, layer.kernel, float(layer.bias))
        assert y == pytest.approx(float(stack.w @ x.reshape(4)), abs=1e-12)
        np.testing.assert_array_equal(cache.g, x.reshape(4))

    def test_backward_matches_finite_difference_on_E(self):
        rng = np.random.default_rng(29)
        stack = init_conv_stack(8, 2, derive_seed(2, "init_head"))
        E = rng.normal(size=(8, 8)) + 0.5
        cache, _ = convncf_forward(stack, E)
        _, d_E = convncf_backward(stack, cache, 1.0)

        def objective(flat):
            _, y = convncf_forward(stack, flat.reshape(8, 8))
            return y

        want = numeric_grad_full(objective, E.reshape(-1)).reshape(8, 8)
        np.testing.assert_allclose(d_E, want, rtol=1e-6, atol=1e-9)

    def test_rejects_wrong_map_size(self):
        stack = init_conv_stack(8, 2, 0)
        with pytest.raises(ConfigurationError):
            convncf_forward(stack, np.zeros((16, 16)))

    def test_head_grad_keys_cover_sections(self):
        stack = init_conv_stack(8, 2, 0)
        cache, _ = convncf_forward(stack, np.random.default_rng(0).normal(size=(8, 8)))
        grads, _ = convncf_backward(stack, cache, 1.0)
        assert set(grads) == {name for name, _ in head_sections(stack)}


class TestGmfReduction:
    def test_ones_weights_equal_inner_product(self):
        """GMF with all-ones projection is exactly the dot product."""
        t = init_tables(4, 6, 5, Variant.MF, 3, scale=1.0)
        gmf = ModelSpec(
            variant=Variant.MF, merge=MergeKind.ELEMENTWISE, head=init_linear_head(5), K=5
        )
        inner = ModelSpec(variant=Variant.MF, merge=MergeKind.INNER, head=IdentityHead(), K=5)
        for u in range(4):
            for i in range(6):
                assert predict(gmf, t, u, i) == pytest.approx(predict(inner, t, u, i), abs=1e-12)


class TestPredictBatch:
    @pytest.mark.parametrize("variant,mk,hk", ALL_COMBOS)
    def test_matches_predict(self, variant, mk, hk):
        """The vectorized path agrees with per-pair scoring to float64 noise
        whenever no candidate is in the history (the ranking protocol)."""
        t = init_tables(5, 12, 8, variant, derive_seed(7, "init"), scale=1.0)
        spec = spec_for(variant, mk, hk)
        history = [0, 3, 5]
        items = np.array([1, 2, 4, 6, 7, 8, 9, 10, 11])
        batch = predict_batch(spec, t, 2, items, history)
        single = np.array([predict(spec, t, 2, int(i), history) for i in items])
        np.testing.assert_allclose(batch, single, rtol=1e-10, atol=1e-12)

    def test_mlp_over_outer_flattens_row_major(self):
        """Flattening convention: entry (k1, k2) of the map lands at k1*K+k2."""
        t = init_tables(3, 6, 4, Variant.MF, 11, scale=1.0)
        spec = spec_for(Variant.MF, MergeKind.OUTER, HeadKind.MLP, K=4, mlp_layers=1)
        E = outer(t.P[0], t.Q[1])
        x = E.reshape(-1)
        layer = spec.head.layers[0]
        manual = float(spec.head.w @ relu(layer.W @ x + layer.b))
        assert predict(spec, t, 0, 1) == pytest.approx(manual, abs=1e-12)


class TestParamCount:
    def test_flagship_head_sizes(self):
        spec = spec_for(Variant.MF, MergeKind.OUTER, HeadKind.CNN, K=64, C=32)
        pc = param_count(spec)
        assert pc.head_total == 20646
        assert dict(pc.head_sections)["conv.1.kernel"] == 128
        assert dict(pc.head_sections)["conv.6.kernel"] == 4096

    def test_wide_mlp_first_layer(self):
        spec = spec_for(Variant.MF, MergeKind.OUTER, HeadKind.MLP, K=64, mlp_layers=1)
        pc = param_count(spec)
        assert dict(pc.head_sections)["mlp.1.W"] == 4096 * 2048 == 8388608

    def test_small_tower(self):
        spec = spec_for(Variant.MF, MergeKind.OUTER, HeadKind.CNN, K=8, C=4)
        assert param_count(spec).head_total == 151

    def test_embedding_side(self):
        spec = spec_for(Variant.SVDPP, MergeKind.OUTER, HeadKind.CNN, K=8, C=4)
        pc = param_count(spec, M=10, N=20)
        assert dict(pc.embedding_sections) == {"P": 80, "Q": 160, "Qp": 160}
        assert pc.embedding_total == 400

    def test_identity_head_is_empty(self):
        spec = spec_for(Variant.MF, MergeKind.INNER, HeadKind.IDENTITY)
        assert param_count(spec).head_total == 0


class TestCheckpoint:
    def roundtrip(self, tmp_path, variant, mk, hk, **kw):
        t = init_tables(4, 7, 8, variant, derive_seed(13, "init"), scale=1.0, alpha=0.4)
        spec = spec_for(variant, mk, hk, **kw)
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(spec, t, path)
        spec2, t2 = load_checkpoint(path)
        return spec, t, spec2, t2, path

    @pytest.mark.parametrize("variant,mk,hk", ALL_COMBOS)
    def test_bit_exact_roundtrip(self, tmp_path, variant, mk, hk):
        spec, t, spec2, t2, _ = self.roundtrip(tmp_path, variant, mk, hk)
        assert (spec2.variant, spec2.merge, spec2.K) == (spec.variant, spec.merge, spec.K)
        assert t2.alpha == t.alpha
        np.testing.assert_array_equal(t.P, t2.P)
        np.testing.assert_array_equal(t.Q, t2.Q)
        for (n1, a1), (n2, a2) in zip(head_sections(spec.head), head_sections(spec2.head)):
            assert n1 == n2
            assert a1.tobytes() == a2.tobytes()

    def test_save_is_deterministic(self, tmp_path):
        t = init_tables(3, 5, 8, Variant.MF, 1)
        spec = spec_for(Variant.MF, MergeKind.OUTER, HeadKind.CNN)
        save_checkpoint(spec, t, str(tmp_path / "a.ckpt"))
        save_checkpoint(spec, t, str(tmp_path / "b.ckpt"))
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_loaded_arrays_are_writable(self, tmp_path):
        _, _, _, t2, _ = self.roundtrip(tmp_path, Variant.MF, MergeKind.INNER, HeadKind.IDENTITY)
        t2.P[0, 0] = 42.0  # training resumes in place on loaded tables
        assert t2.P[0, 0] == 42.0

    def test_bad_magic(self, tmp_path):
        *_, path = self.roundtrip(tmp_path, Variant.MF, MergeKind.INNER, HeadKind.IDENTITY)
        blob = open(path, "rb").read()
        open(path, "wb").write(b"XXXXX" + blob[5:])
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(path)

    def test_truncated_payload(self, tmp_path):
        *_, path = self.roundtrip(tmp_path, Variant.MF, MergeKind.OUTER, HeadKind.CNN)
        blob = open(path, "rb").read()
        open(path, "wb").write(blob[:-9])
        with pytest.raises(FormatError, match="truncated"):
            load_checkpoint(path)

    def test_missing_section(self, tmp_path):
        *_, path = self.roundtrip(tmp_path, Variant.MF, MergeKind.INNER, HeadKind.IDENTITY)
        blob = open(path, "rb").read()
        # rename section Q in the directory; the loader must notice its absence
        open(path, "wb").write(blob.replace(b"\nQ 2 ", b"\nZ 2 ", 1))
        with pytest.raises(FormatError, match="Q missing"):
            load_checkpoint(path)

    def test_missing_qp_for_history_variant(self, tmp_path):
        *_, path = self.roundtrip(tmp_path, Variant.MF, MergeKind.INNER, HeadKind.IDENTITY)
        blob = open(path, "rb").read()
        open(path, "wb").write(blob.replace(b"variant=mf", b"variant=fism", 1))
        with pytest.raises(FormatError, match="Qp"):
            load_checkpoint(path)

    def test_garbled_directory_line(self, tmp_path):
        *_, path = self.roundtrip(tmp_path, Variant.MF, MergeKind.INNER, HeadKind.IDENTITY)
        blob = open(path, "rb").read()
        open(path, "wb").write(blob.replace(b"\nP 2 ", b"\nP two ", 1))
        with pytest.raises(FormatError, match="directory"):
            load_checkpoint(path)


class TestInit:
    def test_conv_stack_shape_and_seeding(self):
        a = init_conv_stack(16, 8, 3)
        b = init_conv_stack(16, 8, 3)
        assert a.depth == 4 and a.C == 8
        assert a.layers[0].kernel.shape == (2, 2, 1, 8)
        assert a.layers[1].kernel.shape == (2, 2, 8, 8)
        assert all(float(layer.bias) == 0.0 for layer in a.layers)
        np.testing.assert_array_equal(a.w, b.w)

    def test_conv_rejects_non_power_of_two(self):
        with pytest.raises(ConfigurationError):
            init_conv_stack(12, 4, 0)

    def test_mlp_halving_widths(self):
        head = init_mlp_head(64, 3, 0)
        assert [layer.W.shape for layer in head.layers] == [(32, 64), (16, 32), (8, 16)]
        assert head.w.shape == (8,)

    def test_mlp_rejects_collapse(self):
        with pytest.raises(ConfigurationError):
            init_mlp_head(2, 3, 0)

    def test_linear_head_is_ones(self):
        np.testing.assert_array_equal(init_linear_head(6).w, np.ones(6))
