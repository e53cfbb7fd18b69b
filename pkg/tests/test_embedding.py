"""Vocabulary, patch grids, the embedding table, rounding, and clamping."""

import math

import numpy as np
import pytest
import torch

from viewcap.embedding import (
    EmbeddingTable,
    InputPair,
    MODALITY_CAP,
    MODALITY_IMG,
    clamp_to_embedding,
    embed_pair,
    embed_view,
    load_embedding_table,
    round_to_tokens,
    sample_x0,
    save_embedding_table,
    token_logits,
)
from viewcap.patchgrid import FeatureSpace, ViewPatchGrid
from viewcap.tensorio import load_tensors, save_tensors
from viewcap.vocab import BOS_ID, EOS_ID, PAD_ID, UNK_ID, Vocabulary


def small_space():
    return FeatureSpace(
        part_kinds=("seat", "leg", "top"),
        colors=("red", "blue"),
        materials=("wood", "metal"),
        textures=("smooth", "rough"),
    )


def grid_with_one_patch(space, G=2, r=0, c=1):
    cells = np.zeros((G, G, 5), dtype=np.int64)
    cells[r, c] = (1, 0, 1, 0, 1)  # leg, red, metal, smooth
    return ViewPatchGrid(space=space, cells=cells)


def make_table(vocab_size=9, H=6, max_len=8, seed=7, dtype=torch.float64):
    table = EmbeddingTable(
        vocab_size=vocab_size,
        patch_feat_dim=small_space().patch_feat_dim,
        H=H,
        max_len=max_len,
        dtype=dtype,
    )
    gen = torch.Generator().manual_seed(seed)
    table.reset_parameters(gen)
    return table


class TestVocabulary:
    def test_reserved_and_bijection(self):
        v = Vocabulary.from_words(["red", "chair", "red"])
        assert v.tokens[:4] == ("<pad>", "<bos>", "<eos>", "<unk>")
        assert len(v) == 6
        assert v.id("red") == 4 and v.token(4) == "red"
        assert v.id("missing") == UNK_ID

    def test_encode_decode_round_trip(self):
        v = Vocabulary.from_words(["a", "b", "c"])
        ids = v.encode(["a", "c"], length=6)
        assert ids == [BOS_ID, v.id("a"), v.id("c"), EOS_ID, PAD_ID, PAD_ID]
        assert v.decode(ids) == ["a", "c"]

    def test_encode_rejects_overflow(self):
        v = Vocabulary.from_words(["a"])
        with pytest.raises(ValueError, match="does not fit"):
            v.encode(["a"] * 5, length=6)

    def test_file_round_trip(self, tmp_path):
        v = Vocabulary.from_words(["chair", "red", "leg"])
        path = tmp_path / "vocab.txt"
        v.save(path)
        assert Vocabulary.load(path).tokens == v.tokens
        # line number = id
        lines = path.read_text().splitlines()
        assert lines[v.id("red")] == "red"

    def test_rejects_malformed(self):
        with pytest.raises(ValueError, match="reserved"):
            Vocabulary(tokens=("a", "b", "c", "d"))
        with pytest.raises(ValueError, match="duplicate"):
            Vocabulary(tokens=("<pad>", "<bos>", "<eos>", "<unk>", "x", "x"))
        with pytest.raises(ValueError, match="whitespace"):
            Vocabulary(tokens=("<pad>", "<bos>", "<eos>", "<unk>", "two words"))


class TestViewPatchGrid:
    def test_feature_one_hot_layout(self):
        space = small_space()
        g = grid_with_one_patch(space)
        feats = g.features()
        assert feats.shape == (4, space.patch_feat_dim)
        # Cell (0, 1) is flat index 1: part=leg(1), color=red(0), material=metal(1), smooth(0).
        row = feats[1]
        expected = np.zeros(space.patch_feat_dim)
        expected[1] = 1.0  # part one-hot
        expected[3 + 0] = 1.0  # color block starts after 3 part kinds
        expected[3 + 2 + 1] = 1.0  # material block
        expected[3 + 2 + 2 + 0] = 1.0  # texture block
        expected[-1] = 1.0  # present flag
        assert np.array_equal(row, expected)
        assert np.array_equal(feats[0], np.zeros(space.patch_feat_dim))

    def test_validation(self):
        space = small_space()
        cells = np.zeros((2, 2, 5), dtype=np.int64)
        cells[0, 0] = (7, 0, 0, 0, 1)  # part id out of range
        with pytest.raises(ValueError, match="column 0"):
            ViewPatchGrid(space=space, cells=cells)
        cells = np.zeros((2, 2, 5), dtype=np.int64)
        cells[0, 0] = (1, 0, 0, 0, 0)  # absent but nonzero
        with pytest.raises(ValueError, match="all-zeros"):
            ViewPatchGrid(space=space, cells=cells)
        with pytest.raises(ValueError, match="shape"):
            ViewPatchGrid(space=space, cells=np.zeros((2, 3, 5), dtype=np.int64))


class TestEmbedPair:
    def test_all_pad_caption_empty_view(self):
        table = make_table()
        space = small_space()
        pair = InputPair(
            view=ViewPatchGrid.empty(space, 2),
            caption_ids=np.full(3, PAD_ID, dtype=np.int64),
        )
        latent = embed_pair(table, pair)
        assert latent.img_len == 4 and latent.cap_len == 3
        for k in range(3):
            expected = (
                table.token_rows[PAD_ID]
                + table.modality_vectors[MODALITY_CAP]
                + table.position_vectors[k]
            )
            assert torch.equal(latent.cap[k], expected)
        # Empty patches contribute nothing beyond modality + position.
        for j in range(4):
            expected = table.modality_vectors[MODALITY_IMG] + table.position_vectors[j]
            assert torch.equal(latent.img[j], expected)

    def test_determinism(self):
        table = make_table()
        pair = InputPair(
            view=grid_with_one_patch(small_space()),
            caption_ids=np.array([BOS_ID, 5, EOS_ID]),
        )
        a = embed_pair(table, pair)
        b = embed_pair(table, pair)
        assert torch.equal(a.values, b.values)

    def test_single_patch_locality(self):
        table = make_table()
        space = small_space()
        base = grid_with_one_patch(space, r=0, c=1)
        cells = base.cells.copy()
        cells[1, 0] = (2, 1, 0, 1, 1)
        changed = base.with_cells(cells)
        ids = np.array([BOS_ID, 4, EOS_ID])
        a = embed_pair(table, InputPair(view=base, caption_ids=ids))
        b = embed_pair(table, InputPair(view=changed, caption_ids=ids))
        diff_rows = (a.values != b.values).any(dim=1).nonzero().flatten().tolist()
        assert diff_rows == [2]  # flat index of cell (1, 0) in a 2x2 grid

    def test_rejects_bad_ids(self):
        table = make_table(vocab_size=9)
        pair = InputPair(
            view=ViewPatchGrid.empty(small_space(), 2),
            caption_ids=np.array([BOS_ID, 9, EOS_ID]),
        )
        with pytest.raises(ValueError, match="caption ids"):
            embed_pair(table, pair)


class TestSampleX0:
    def test_zero_beta_is_the_clean_embedding(self):
        table = make_table()
        pair = InputPair(
            view=grid_with_one_patch(small_space()), caption_ids=np.array([BOS_ID, EOS_ID])
        )
        rng = torch.Generator().manual_seed(0)
        out = sample_x0(table, pair, beta0=0.0, rng=rng)
        assert torch.equal(out.values, embed_pair(table, pair).values)

    def test_seeded_determinism(self):
        table = make_table()
        pair = InputPair(
            view=grid_with_one_patch(small_space()), caption_ids=np.array([BOS_ID, EOS_ID])
        )
        a = sample_x0(table, pair, 0.01, torch.Generator().manual_seed(11))
        b = sample_x0(table, pair, 0.01, torch.Generator().manual_seed(11))
        assert torch.equal(a.values, b.values)

    def test_rejects_bad_beta0(self):
        table = make_table()
        pair = InputPair(
            view=ViewPatchGrid.empty(small_space(), 1), caption_ids=np.array([PAD_ID])
        )
        for bad in (-0.1, 1.0, 1.5):
            with pytest.raises(ValueError, match="beta0"):
                sample_x0(table, pair, bad, torch.Generator())

    def test_monte_carlo_moments(self):
        # 10^5 draws per coordinate; mean within 4 sigma/sqrt(N), variance within 5%.
        table = make_table(vocab_size=5, H=2, max_len=4)
        space = small_space()
        pair = InputPair(view=ViewPatchGrid.empty(space, 1), caption_ids=np.array([3, 4]))
        beta0 = 0.04
        base = embed_pair(table, pair).values
        rng = torch.Generator().manual_seed(123)
        n = 100_000
        draws = torch.empty((n,) + tuple(base.shape), dtype=base.dtype)
        for i in range(n):
            draws[i] = sample_x0(table, pair, beta0, rng).values
        mean_err = (draws.mean(dim=0) - base).abs().max().item()
        assert mean_err <= 4.0 * math.sqrt(beta0 / n)
        var = draws.var(dim=0)
        assert ((var - beta0).abs() / beta0).max().item() <= 0.05


class TestRounding:
    def test_round_trip_over_whole_vocabulary(self):
        table = make_table(vocab_size=50, H=16, max_len=60, seed=3)
        tokens, logits = round_to_tokens(table, table.token_rows)
        assert np.array_equal(tokens, np.arange(50))
        assert logits.shape == (50, 50)

    def test_tie_breaks_to_smallest_id(self):
        table = make_table(vocab_size=8, H=4)
        with torch.no_grad():
            table.token_rows[5] = table.token_rows[2]
        tokens, _ = round_to_tokens(table, table.token_rows[5:6])
        assert tokens[0] == 2
        # Symmetric rows equidistant from the origin.
        with torch.no_grad():
            table.token_rows[6] = -table.token_rows[7]
        zero = torch.zeros(1, 4, dtype=torch.float64)
        d6 = token_logits(table, zero)[0, 6]
        d7 = token_logits(table, zero)[0, 7]
        assert d6 == d7

    def test_matches_exhaustive_scan(self):
        table = make_table(vocab_size=8, H=4, seed=13)
        rng = np.random.default_rng(29)
        latent = torch.tensor(rng.normal(size=(5, 4)))
        tokens, logits = round_to_tokens(table, latent)
        rows = table.token_rows.detach().numpy()
        for k in range(5):
            dists = [float(((latent[k].numpy() - rows[v]) ** 2).sum()) for v in range(8)]
            best = min(range(8), key=lambda v: (dists[v], v))
            assert tokens[k] == best
            assert logits[k, best].item() == pytest.approx(-dists[best], rel=1e-12)

    def test_softmax_logits_shape_and_sign(self):
        table = make_table()
        latent = table.token_rows[:3] + 0.01
        _, logits = round_to_tokens(table, latent)
        assert (logits <= 0).all()

    def test_rejects_non_finite(self):
        table = make_table()
        bad = torch.full((2, 6), float("nan"), dtype=torch.float64)
        with pytest.raises(ValueError, match="non-finite"):
            round_to_tokens(table, bad)


class TestClamp:
    def test_idempotent_and_in_codomain(self):
        table = make_table(vocab_size=12, H=5, seed=21)
        rng = np.random.default_rng(5)
        latent = torch.tensor(rng.normal(size=(7, 5)))
        once = clamp_to_embedding(table, latent)
        twice = clamp_to_embedding(table, once)
        assert torch.equal(once, twice)
        rows = {tuple(r.tolist()) for r in table.token_rows}
        assert all(tuple(r.tolist()) in rows for r in once)

    def test_clamp_then_round_matches_round(self):
        table = make_table(vocab_size=12, H=5, seed=22)
        rng = np.random.default_rng(6)
        latent = torch.tensor(rng.normal(size=(7, 5)))
        direct, _ = round_to_tokens(table, latent)
        clamped, _ = round_to_tokens(table, clamp_to_embedding(table, latent))
        assert np.array_equal(direct, clamped)


class TestEmbeddingFiles:
    def test_save_load_save_is_byte_identical(self, tmp_path):
        table = make_table(dtype=torch.float32)
        (tmp_path / "a").mkdir()
        (tmp_path / "b").mkdir()
        first = tmp_path / "a" / "emb.json"
        second = tmp_path / "b" / "emb.json"
        save_embedding_table(table, first)
        loaded = load_embedding_table(first)
        save_embedding_table(loaded, second)
        assert first.read_bytes() == second.read_bytes()
        assert (tmp_path / "a" / "emb.bin").read_bytes() == (
            tmp_path / "b" / "emb.bin"
        ).read_bytes()

    def test_import_projection(self, tmp_path):
        rng = np.random.default_rng(17)
        h_in, h_out = 6, 4
        tensors = {
            "token_rows": rng.normal(size=(10, h_in)),
            "patch_projector": rng.normal(size=(5, h_in)),
            "modality_vectors": rng.normal(size=(2, h_in)),
            "position_vectors": rng.normal(size=(8, h_in)),
            "import_projection": rng.normal(size=(h_in, h_out)),
        }
        path = tmp_path / "foreign.json"
        save_tensors(path, tensors)
        table = load_embedding_table(path, H=h_out)
        assert table.H == h_out
        stored, _ = load_tensors(path)
        expected = stored["token_rows"].astype(np.float64) @ stored[
            "import_projection"
        ].astype(np.float64)
        assert np.allclose(table.token_rows.detach().numpy(), expected, atol=1e-6)

    def test_width_mismatch_without_projection_fails(self, tmp_path):
        table = make_table(H=6, dtype=torch.float32)
        path = tmp_path / "emb.json"
        save_embedding_table(table, path)
        with pytest.raises(ValueError, match="does not match configured"):
            load_embedding_table(path, H=4)
