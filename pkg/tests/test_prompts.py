import numpy as np
import pytest

from clicklabel.attention import (
    AttentionParams,
    pixel_word_attention,
    pixel_word_attention_backward,
)
from clicklabel.errors import FormatError, InvalidInputError
from clicklabel.prompts import (
    PromptFeature,
    TextEmbedderConfig,
    average_prompt_feature,
    embed_prompt,
    format_instruction,
    load_embeddings,
    load_prompt_file,
    sample_training_feature,
    save_embeddings,
    tokenize,
)

CFG = TextEmbedderConfig(kind="hashed-toy", q=16, z=6, seed=42)


class TestFormatInstruction:
    def test_template(self):
        assert (
            format_instruction("scratch", "capsule", 45)
            == "Give 45 phrase describing the scratch defect on a capsule"
        )

    def test_substitution(self):
        assert (
            format_instruction("crack", "tile", 1)
            == "Give 1 phrase describing the crack defect on a tile"
        )

    def test_empty_rejected(self):
        with pytest.raises(InvalidInputError):
            format_instruction("", "tile", 5)
        with pytest.raises(InvalidInputError):
            format_instruction("crack", "  ", 5)
        with pytest.raises(InvalidInputError):
            format_instruction("crack", "tile", 0)


class TestEmbedPrompt:
    def test_deterministic(self):
        a = embed_prompt("a deep scratch", CFG)
        b = embed_prompt("a deep scratch", CFG)
        assert np.array_equal(a.matrix, b.matrix)
        assert np.array_equal(a.valid, b.valid)

    def test_token_order_swap(self):
        ab = embed_prompt("alpha beta", CFG)
        ba = embed_prompt("beta alpha", CFG)
        assert np.array_equal(ab.matrix[:, 0], ba.matrix[:, 1])
        assert np.array_equal(ab.matrix[:, 1], ba.matrix[:, 0])

    def test_single_token(self):
        f = embed_prompt("scratch", CFG)
        assert f.valid.tolist() == [True] + [False] * 5
        assert abs(np.linalg.norm(f.matrix[:, 0]) - 1.0) < 1e-9
        assert np.all(f.matrix[:, 1:] == 0)

    def test_truncation(self):
        f = embed_prompt("one two three four five six seven eight", CFG)
        assert f.valid.sum() == 6

    def test_tokenize_punctuation(self):
        assert tokenize("A small, dark-grey spot!") == [
            "a", "small", "dark", "grey", "spot",
        ]


class TestAveragePromptFeature:
    def test_identity(self):
        f = embed_prompt("a scratch", CFG)
        avg = average_prompt_feature([f] * 5)
        assert np.allclose(avg.matrix, f.matrix)

    def test_cancellation(self):
        f = embed_prompt("a scratch", CFG)
        neg = PromptFeature(matrix=-f.matrix, valid=f.valid.copy())
        avg = average_prompt_feature([f, neg])
        assert np.allclose(avg.matrix, 0.0)

    def test_matches_scalar_mean(self, rng):
        feats = []
        for i in range(5):
            m = rng.normal(size=(4, 3))
            valid = np.array([True, True, i % 2 == 0])
            m[:, ~valid] = 0
            feats.append(PromptFeature(matrix=m, valid=valid))
        avg = average_prompt_feature(feats)
        expected = np.zeros((4, 3))
        for f in feats:
            for i in range(4):
                for j in range(3):
                    expected[i, j] += f.matrix[i, j] / 5.0
        assert np.allclose(avg.matrix, expected, atol=1e-12)
        assert avg.valid.tolist() == [True, True, True]

    def test_permutation_invariant(self, rng):
        feats = [embed_prompt(p, CFG) for p in ("a b", "c d", "e f")]
        a = average_prompt_feature(feats)
        b = average_prompt_feature(feats[::-1])
        assert np.array_equal(a.matrix, b.matrix)

    def test_empty_rejected(self):
        with pytest.raises(InvalidInputError):
            average_prompt_feature([])


class TestSampleTrainingFeature:
    def test_singleton_always_member(self):
        f = embed_prompt("scratch", CFG)
        rng = np.random.default_rng(0)
        for _ in range(10):
            got = sample_training_feature([f], rng)
            assert np.allclose(got.matrix, f.matrix)

    def test_average_frequency(self):
        feats = [embed_prompt("a b", CFG), embed_prompt("c d", CFG)]
        avg = average_prompt_feature(feats)
        rng = np.random.default_rng(7)
        hits = sum(
            np.array_equal(sample_training_feature(feats, rng).matrix, avg.matrix)
            for _ in range(10_000)
        )
        assert abs(hits / 10_000 - 0.5) < 0.02

    def test_reproducible(self):
        feats = [embed_prompt("a b", CFG), embed_prompt("c d", CFG)]
        seq1 = [sample_training_feature(feats, np.random.default_rng(3)).matrix
                for _ in range(1)]
        rng_a, rng_b = np.random.default_rng(9), np.random.default_rng(9)
        for _ in range(50):
            a = sample_training_feature(feats, rng_a)
            b = sample_training_feature(feats, rng_b)
            assert np.array_equal(a.matrix, b.matrix)
        del seq1


def random_attention_params(rng, d_e=6, d_a=4, q=16):
    return AttentionParams(
        w_query=rng.normal(size=(d_e, d_a)),
        w_key=rng.normal(size=(q, d_a)),
        w_value=rng.normal(size=(q, d_a)),
        w_out=rng.normal(size=(d_a, d_e)),
        w_gate=rng.normal(size=(d_e, d_e)),
    )


class TestPixelWordAttention:
    def test_single_valid_word(self, rng):
        params = random_attention_params(rng)
        f = embed_prompt("scratch", CFG)
        pixels = rng.normal(size=(5, 6))
        inc = pixel_word_attention(pixels, f, params)
        word = f.matrix[:, 0]
        gate = 1.0 / (1.0 + np.exp(-(pixels @ params.w_gate)))
        expected = gate * ((word @ params.w_value) @ params.w_out)
        assert np.allclose(inc, expected, atol=1e-12)

    def test_row_sums(self, rng):
        params = random_attention_params(rng)
        f = embed_prompt("a deep dark scratch", CFG)
        pixels = rng.normal(size=(7, 6))
        _, cache = pixel_word_attention(pixels, f, params, with_cache=True)
        sums = cache.att.sum(axis=1)
        assert np.allclose(sums, 1.0, atol=1e-6)
        assert np.all(cache.att[:, ~f.valid] == 0)

    def test_masked_columns_ignored(self, rng):
        params = random_attention_params(rng)
        f = embed_prompt("two words", CFG)
        corrupted = PromptFeature(matrix=f.matrix.copy(), valid=f.valid.copy())
        # huge junk inside invalid columns must not alter the increment
        corrupted.matrix[:, ~corrupted.valid] = 1e9
        pixels = rng.normal(size=(4, 6))
        a = pixel_word_attention(pixels, f, params)
        b = pixel_word_attention(pixels, corrupted, params)
        assert np.array_equal(a, b)

    def test_no_valid_words(self, rng):
        params = random_attention_params(rng)
        empty = PromptFeature(matrix=np.zeros((16, 6)), valid=np.zeros(6, bool))
        pixels = rng.normal(size=(4, 6))
        assert np.all(pixel_word_attention(pixels, empty, params) == 0)

    def test_backward_matches_finite_differences(self, rng):
        params = random_attention_params(rng, d_e=5, d_a=3)
        f = embed_prompt("a dark scratch", CFG)
        pixels = rng.normal(size=(6, 5))
        upstream = rng.normal(size=(6, 5))

        def loss(p, px):
            return float((pixel_word_attention(px, f, p) * upstream).sum())

        _, cache = pixel_word_attention(pixels, f, params, with_cache=True)
        d_pixel, grads = pixel_word_attention_backward(upstream, params, cache)
        h = 1e-6
        for name in ("w_query", "w_key", "w_value", "w_out", "w_gate"):
            arr = getattr(params, name)
            analytic = getattr(grads, name)
            fd = np.zeros_like(arr)
            it = np.nditer(arr, flags=["multi_index"])
            while not it.finished:
                i = it.multi_index
                orig = arr[i]
                arr[i] = orig + h
                up = loss(params, pixels)
                arr[i] = orig - h
                down = loss(params, pixels)
                arr[i] = orig
                fd[i] = (up - down) / (2 * h)
                it.iternext()
            assert np.allclose(analytic, fd, rtol=1e-5, atol=1e-7), name
        fd_px = np.zeros_like(pixels)
        it = np.nditer(pixels, flags=["multi_index"])
        while not it.finished:
            i = it.multi_index
            orig = pixels[i]
            pixels[i] = orig + h
            up = loss(params, pixels)
            pixels[i] = orig - h
            down = loss(params, pixels)
            pixels[i] = orig
            fd_px[i] = (up - down) / (2 * h)
            it.iternext()
        assert np.allclose(d_pixel, fd_px, rtol=1e-5, atol=1e-7)


class TestPromptFiles:
    def test_load_skips_comments(self, tmp_path):
        p = tmp_path / "panel__smudge.txt"
        p.write_text("a greasy smudge\n# struck-through line\n\n  a dark wipe mark \n",
                     encoding="utf-8")
        assert load_prompt_file(p) == ["a greasy smudge", "a dark wipe mark"]

    def test_embeddings_round_trip(self, tmp_path, rng):
        feats = [embed_prompt(p, CFG) for p in ("a b c", "d e", "f")]
        path = tmp_path / "feats.adpe"
        save_embeddings(feats, path)
        loaded = load_embeddings(path)
        assert len(loaded) == 3
        for a, b in zip(feats, loaded):
            assert np.allclose(a.matrix, b.matrix, atol=1e-7)
            assert np.array_equal(a.valid, b.valid)

    def test_embeddings_bad_magic(self, tmp_path):
        p = tmp_path / "x.adpe"
        p.write_bytes(b"WHAT" + b"\0" * 20)
        with pytest.raises(FormatError, match="bad magic"):
            load_embeddings(p)
