import hashlib
from pathlib import Path

import numpy as np
import pytest

from reflectdiff.data import (
    CompositionParams,
    batch_indices,
    blur,
    compose_reflection,
    iterate_paired,
    iterate_unpaired,
    make_toy_dataset,
    read_manifest,
    sample_composition_params,
    write_manifest,
)
from reflectdiff.images import load_image, save_image
from reflectdiff.util import mix_seed


def rand_img(seed, shape=(16, 16, 3)):
    return np.random.default_rng(seed).uniform(0, 1, size=shape)


class TestCompose:
    def test_zero_weight_returns_transmission(self):
        s, r = rand_img(0), rand_img(1)
        x = compose_reflection(s, r, CompositionParams(w=0.0))
        np.testing.assert_array_equal(x, s)

    def test_full_weight_no_blur(self):
        r = rand_img(2) * 1.5  # push above 1 so the clip matters
        s = np.zeros_like(r)
        p = CompositionParams(w=1.0, blur_sigma=0.0, ghost_weight=0.0, clip=True)
        np.testing.assert_allclose(compose_reflection(s, r, p), np.clip(r, 0, 1))

    def test_blur_preserves_mean(self):
        r = rand_img(3, (32, 32, 3))
        for sigma in (0.5, 1.5, 3.0):
            assert abs(blur(r, sigma).mean() - r.mean()) < 1e-6

    def test_monotone_in_weight_before_clip(self):
        s, r = rand_img(4), rand_img(5)
        p1 = CompositionParams(w=0.3, blur_sigma=1.0, clip=False)
        p2 = CompositionParams(w=0.5, blur_sigma=1.0, clip=False)
        x1 = compose_reflection(s, r, p1)
        x2 = compose_reflection(s, r, p2)
        positive = blur(r, 1.0) > 0
        assert np.all(x2[positive] >= x1[positive])

    def test_clip_bounds(self):
        s, r = rand_img(6), rand_img(7)
        x = compose_reflection(s, r, CompositionParams(w=1.0, ghost_weight=1.0))
        assert x.min() >= 0.0 and x.max() <= 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            compose_reflection(np.zeros((4, 4, 3)), np.zeros((8, 8, 3)), CompositionParams())

    def test_param_validation(self):
        for kwargs in ({"w": 1.5}, {"blur_sigma": -1.0}, {"ghost_weight": 2.0}):
            with pytest.raises(ValueError):
                CompositionParams(**kwargs)


def _tree_hash(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


class TestToyDataset:
    def test_deterministic_bytes(self, tmp_path):
        m1 = make_toy_dataset(3, (16, 16), seed=42, root=tmp_path / "a")
        m2 = make_toy_dataset(3, (16, 16), seed=42, root=tmp_path / "b")
        assert _tree_hash(tmp_path / "a") == _tree_hash(tmp_path / "b")
        assert [e.id for e in m1.entries] == [e.id for e in m2.entries]
        m3 = make_toy_dataset(3, (16, 16), seed=43, root=tmp_path / "c")
        assert _tree_hash(tmp_path / "a") != _tree_hash(tmp_path / "c")

    def test_entries_exist_and_load_at_size(self, tmp_path):
        m = make_toy_dataset(4, (16, 24), seed=0, root=tmp_path)
        for e in m.entries:
            for rel in (e.x_path, e.s_path, e.r_path):
                img = load_image(tmp_path / rel)
                assert img.shape == (16, 24, 3)

    def test_split_sizes(self, tmp_path):
        m = make_toy_dataset(10, (16, 16), seed=0, root=tmp_path, test_fraction=0.2)
        assert len(m.subset("train")) == 8
        assert len(m.subset("test")) == 2

    def test_manifest_round_trip(self, tmp_path):
        m = make_toy_dataset(3, (16, 16), seed=5, root=tmp_path)
        loaded = read_manifest(tmp_path / "manifest.jsonl")
        assert Path(loaded.root).resolve() == Path(m.root).resolve()
        assert loaded.seed == m.seed
        assert loaded.entries == m.entries

    def test_sampled_weight_distribution(self):
        # w ~ U[0.2, 0.6]: empirical mean within 3 SE of 0.4 over 1e4 draws
        n = 10_000
        ws = np.array(
            [
                sample_composition_params(np.random.default_rng(mix_seed(9, i))).w
                for i in range(n)
            ]
        )
        se = (0.6 - 0.2) / np.sqrt(12) / np.sqrt(n)
        assert abs(ws.mean() - 0.4) < 3 * se

    def test_png_round_trip_error_bounded(self, tmp_path):
        img = rand_img(8)
        save_image(tmp_path / "t.png", img)
        back = load_image(tmp_path / "t.png")
        assert np.max(np.abs(back - img)) <= 1.0 / 255.0 + 1e-12


class TestIteration:
    @pytest.fixture(scope="class")
    def manifest(self, tmp_path_factory):
        return make_toy_dataset(7, (16, 16), seed=1, root=tmp_path_factory.mktemp("it"))

    def test_epoch_visits_every_entry_once(self, manifest):
        seen = []
        for batch_step, batch in enumerate(iterate_paired(manifest, 2, seed=3, epochs=1)):
            assert set(batch) == {"x", "s", "r"}
            seen.append(batch["x"].shape[0])
        assert sum(seen) == 7  # 2+2+2+1

    def test_same_seed_same_order(self, manifest):
        a = [b["x"] for b in iterate_paired(manifest, 3, seed=5, epochs=2)]
        b = [b["x"] for b in iterate_paired(manifest, 3, seed=5, epochs=2)]
        for x1, x2 in zip(a, b):
            np.testing.assert_array_equal(x1, x2)

    def test_batch_size_guard(self, manifest):
        with pytest.raises(ValueError, match="exceeds"):
            next(iterate_paired(manifest, 100, seed=0))

    def test_batch_indices_pure(self):
        a = batch_indices(10, 3, seed=7, step=5)
        b = batch_indices(10, 3, seed=7, step=5)
        np.testing.assert_array_equal(a, b)

    def test_unpaired_streams_decorrelate(self, manifest):
        # collision rate of matching indices across the two pools ~ 1/N
        n = len(manifest.entries)
        steps = 400
        hits = 0
        draws = 0
        for step in range(steps):
            ix = batch_indices(n, 2, mix_seed(11, "x-pool"), step)
            js = batch_indices(n, 2, mix_seed(11, "s-pool"), step)
            hits += int(np.sum(ix == js))
            draws += len(ix)
        rate = hits / draws
        p = 1.0 / n
        se = np.sqrt(p * (1 - p) / draws)
        assert abs(rate - p) < 4 * se

    def test_unpaired_iterator_shapes(self, manifest):
        it = iterate_unpaired(manifest, manifest, 2, seed=0, epochs=1)
        bx, bs = next(it)
        assert bx["x"].shape == (2, 16, 16, 3)
        assert bs["s"].shape == (2, 16, 16, 3)
