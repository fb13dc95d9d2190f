import numpy as np
import pytest

from clicklabel.errors import FormatError, InvalidInputError
from clicklabel.features import global_descriptor
from clicklabel.residual import (
    MatchConfig,
    ReferenceBank,
    _match_unconstrained,
    build_bank,
    knn_global,
    load_bank,
    match_residual,
    qualified_set,
    save_bank,
)

from conftest import random_bank, random_tensor


def bruteforce_match(bank, query, k, sigma):
    """Independent matcher: full distance matrix masked by the
    image/space constraints, argmin with lowest-index ties."""
    sims = []
    qd = global_descriptor(query)
    for i, d in enumerate(bank.global_descs):
        nu, nv = np.linalg.norm(qd), np.linalg.norm(d)
        sims.append(0.0 if nu == 0 or nv == 0 else float(qd @ d / (nu * nv)))
    order = sorted(range(bank.n_images), key=lambda i: (-sims[i], i))
    theta = set(idx + 1 for idx in order[: min(k, bank.n_images)])

    h, w, df = query.values.shape
    q = query.values.astype(np.float64).reshape(-1, df)
    feats = bank.features.astype(np.float64)
    idx_out = np.zeros((h, w), dtype=np.int64)
    res_out = np.zeros((h, w, df))
    for y in range(h):
        for x in range(w):
            allowed = np.array([
                bank.image_index[i] in theta
                and (bank.coords[i, 0] - x) ** 2 + (bank.coords[i, 1] - y) ** 2
                < sigma * sigma
                for i in range(bank.n_features)
            ])
            cand = np.nonzero(allowed)[0]
            cell = q[y * w + x]
            diffs = feats[cand] - cell
            d2 = (diffs * diffs).sum(axis=1)
            best = cand[np.nonzero(d2 == d2.min())[0]].min()
            idx_out[y, x] = best
            res_out[y, x] = cell - feats[best]
    return idx_out, res_out


class TestBuildBank:
    def test_counts_and_indices(self, rng):
        tensors = [random_tensor(rng, 4, 4, 8) for _ in range(2)]
        bank = build_bank(tensors)
        assert bank.n_features == 32
        assert set(bank.image_index.tolist()) == {1, 2}
        for img in (1, 2):
            coords = bank.coords[bank.image_index == img]
            assert len({(int(x), int(y)) for x, y in coords}) == 16

    def test_single_image(self, rng):
        bank = build_bank([random_tensor(rng, 4, 4, 8)])
        assert bank.n_images == 1
        assert np.all(bank.image_index == 1)

    def test_deterministic_bytes(self, tmp_path, rng):
        tensors = [random_tensor(rng, 4, 4, 8) for _ in range(3)]
        bank1 = build_bank(tensors)
        bank2 = build_bank(tensors)
        save_bank(bank1, tmp_path / "a.adbk")
        save_bank(bank2, tmp_path / "b.adbk")
        assert (tmp_path / "a.adbk").read_bytes() == (tmp_path / "b.adbk").read_bytes()

    def test_mismatched_dims_rejected(self, rng):
        with pytest.raises(InvalidInputError):
            build_bank([random_tensor(rng, 4, 4, 8), random_tensor(rng, 4, 4, 9)])


class TestKnnGlobal:
    def test_k_at_least_r_returns_all(self, rng):
        bank = random_bank(rng, n_images=3)
        assert sorted(knn_global(bank, rng.normal(size=bank.d_f), k=50)) == [1, 2, 3]

    def test_self_descriptor_ranks_first(self, rng):
        bank = random_bank(rng, n_images=5)
        assert knn_global(bank, bank.global_descs[2], k=5)[0] == 3

    def test_matches_sort_oracle(self, rng):
        bank = random_bank(rng, n_images=6)
        q = rng.normal(size=bank.d_f)
        got = knn_global(bank, q, k=3)
        sims = [float(q @ d / (np.linalg.norm(q) * np.linalg.norm(d)))
                for d in bank.global_descs]
        expect = [i + 1 for i in sorted(range(6), key=lambda i: (-sims[i], i))[:3]]
        assert got == expect


class TestQualifiedSet:
    def test_boundary_distances(self, rng):
        bank = random_bank(rng, n_images=1, h=8, w=8)
        idx = qualified_set(bank, [1], (0, 0), sigma=3.2)
        coords = {(int(x), int(y)) for x, y in bank.coords[idx]}
        assert (3, 0) in coords  # distance 3 < 3.2
        assert (4, 0) not in coords  # distance 4 >= 3.2
        assert (0, 3) in coords
        assert (3, 1) in coords  # sqrt(10) ~ 3.162 < 3.2

    def test_empty_theta(self, rng):
        bank = random_bank(rng, n_images=1)
        assert qualified_set(bank, [], (0, 0)).size == 0

    def test_matches_double_loop_oracle(self, rng):
        bank = random_bank(rng, n_images=4, h=8, w=8)
        for _ in range(10):
            x, y = rng.integers(8), rng.integers(8)
            theta = [1, 3]
            got = set(qualified_set(bank, theta, (int(x), int(y)), sigma=3.2).tolist())
            expect = {
                i for i in range(bank.n_features)
                if bank.image_index[i] in theta
                and (bank.coords[i, 0] - x) ** 2 + (bank.coords[i, 1] - y) ** 2 < 3.2 ** 2
            }
            assert got == expect


class TestMatchResidual:
    def test_self_match_is_zero(self, rng):
        tensors = [random_tensor(rng, 8, 8, 8, source_id=str(i)) for i in range(4)]
        bank = build_bank(tensors)
        res = match_residual(bank, tensors[2], MatchConfig(k=4, sigma=3.2))
        assert np.abs(res.values).max() < 1e-6

    def test_singleton_qualified_set(self, rng):
        # one reference image, sigma barely above zero: only the (0,0) offset
        bank = random_bank(rng, n_images=1, h=4, w=4, d=4)
        query = random_tensor(rng, 4, 4, 4)
        res = match_residual(bank, query, MatchConfig(k=1, sigma=0.5))
        feats = bank.features.reshape(4, 4, 4)
        expected = query.values.astype(np.float64) - feats.astype(np.float64)
        assert np.allclose(res.values, expected)

    def test_matches_bruteforce_sampled(self, rng):
        for trial in range(25):
            bank = random_bank(rng, n_images=4, h=8, w=8, d=8)
            query = random_tensor(rng, 8, 8, 8)
            cfg = MatchConfig(k=3, sigma=3.2)
            res = match_residual(bank, query, cfg)
            idx, vals = bruteforce_match(bank, query, cfg.k, cfg.sigma)
            assert np.array_equal(res.matched_index, idx)
            assert np.array_equal(res.values, vals)

    def test_absolute_kind(self, rng):
        bank = random_bank(rng, n_images=2)
        query = random_tensor(rng)
        a = match_residual(bank, query, MatchConfig(k=2, residual_kind="difference"))
        b = match_residual(bank, query, MatchConfig(k=2, residual_kind="absolute"))
        assert np.allclose(np.abs(a.values), b.values)

    def test_monotone_in_sigma_and_k(self, rng):
        bank = random_bank(rng, n_images=5, h=8, w=8, d=6)
        query = random_tensor(rng, 8, 8, 6)
        norms = {}
        for k, sigma in [(2, 1.5), (2, 3.2), (5, 3.2), (5, 6.0)]:
            res = match_residual(bank, query, MatchConfig(k=k, sigma=sigma))
            norms[(k, sigma)] = np.linalg.norm(res.values, axis=2)
        eps = 1e-12
        assert np.all(norms[(2, 3.2)] <= norms[(2, 1.5)] + eps)
        assert np.all(norms[(5, 3.2)] <= norms[(2, 3.2)] + eps)
        assert np.all(norms[(5, 6.0)] <= norms[(5, 3.2)] + eps)

    def test_bank_order_invariance(self, rng):
        tensors = [random_tensor(rng, 6, 6, 5) for _ in range(3)]
        bank = build_bank(tensors)
        perm = rng.permutation(bank.n_features)
        shuffled = ReferenceBank(
            features=bank.features[perm],
            image_index=bank.image_index[perm],
            coords=bank.coords[perm],
            global_descs=bank.global_descs,
            h_f=6, w_f=6,
        )
        query = random_tensor(rng, 6, 6, 5)
        a = match_residual(bank, query, MatchConfig(k=3))
        b = match_residual(shuffled, query, MatchConfig(k=3))
        assert np.array_equal(a.values, b.values)
        assert np.array_equal(a.matched_index, b.matched_index)

    def test_unconstrained_fallback(self, rng):
        bank = random_bank(rng, n_images=3, h=4, w=4, d=4)
        cell = rng.normal(size=4)
        best = _match_unconstrained(cell, bank, [1, 3])
        allowed = np.nonzero(np.isin(bank.image_index, [1, 3]))[0]
        d2 = ((bank.features[allowed].astype(np.float64) - cell) ** 2).sum(axis=1)
        assert best == allowed[np.argmin(d2)]

    def test_query_dim_mismatch(self, rng):
        bank = random_bank(rng, n_images=2, h=4, w=4, d=4)
        with pytest.raises(InvalidInputError):
            match_residual(bank, random_tensor(rng, 4, 4, 5), MatchConfig())


class TestBankFile:
    def test_round_trip(self, tmp_path, rng):
        bank = random_bank(rng, n_images=3, h=4, w=4, d=6)
        path = tmp_path / "bank.adbk"
        save_bank(bank, path)
        loaded = load_bank(path)
        assert np.array_equal(loaded.features, bank.features)
        assert np.array_equal(loaded.image_index, bank.image_index)
        assert np.array_equal(loaded.coords, bank.coords)
        assert loaded.n_images == 3

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.adbk"
        p.write_bytes(b"NOPE" + b"\0" * 40)
        with pytest.raises(FormatError, match="bad magic"):
            load_bank(p)

    def test_payload_mismatch(self, tmp_path):
        import struct
        p = tmp_path / "x.adbk"
        p.write_bytes(b"ADBK" + struct.pack("<IIIII", 1, 2, 4, 4, 6) + b"\0" * 8)
        with pytest.raises(FormatError, match="payload size"):
            load_bank(p)
