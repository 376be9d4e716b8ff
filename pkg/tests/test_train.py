import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nmrmos import nn
from nmrmos.audio import AudioClip
from nmrmos.checkpoint import load_checkpoint
from nmrmos.model import ModelConfig, PairOutput, QualityNet
from nmrmos.synth import CorpusConfig, RatedClip, gen_corpus, synth_clean
from nmrmos.train import (
    TrainConfig,
    TrainingError,
    load_rated,
    mtl_loss,
    pair_labels,
    random_crop,
    sample_pair,
    train,
    train_model,
)
from nmrmos.synth import read_manifest

SMALL = ModelConfig(excerpt_samples=4000)


def output(p, r):
    p = nn.Tensor(np.atleast_2d(np.asarray(p, dtype=np.float64)))
    r = nn.Tensor(np.atleast_1d(np.asarray(r, dtype=np.float64)))
    return PairOutput(p=p, r=r, attn_pref=nn.Tensor(np.ones((1, 1))), attn_rel=nn.Tensor(np.ones((1, 1))))


def clip(seed, mos, system="x", dur=0.5):
    return RatedClip(synth_clean(seed, dur), mos, system, f"u{seed}")


@pytest.fixture(scope="module")
def toy_corpus(tmp_path_factory):
    """44 clips: 4 sources x 10 noise levels plus the 4 clean sources."""
    out = tmp_path_factory.mktemp("toy")
    gen_corpus(CorpusConfig(out_dir=str(out), n_sources=4, kinds=("additive_noise",), clip_seconds=0.5,
                            train_fraction=0.75, dev_fraction=0.25, n_nmr=2))
    return out


class TestLabels:
    def test_better_first(self):
        y, s = pair_labels(4.2, 3.0)
        np.testing.assert_array_equal(y, [1, 0])
        assert s == pytest.approx(1.2)

    def test_equal_goes_to_second_slot(self):
        y, s = pair_labels(5.0, 5.0)
        np.testing.assert_array_equal(y, [0, 1])
        assert s == 0.0

    @settings(max_examples=50, deadline=None)
    @given(st.floats(1, 5), st.floats(1, 5))
    def test_antisymmetry(self, a, b):
        y_ab, s_ab = pair_labels(a, b)
        y_ba, s_ba = pair_labels(b, a)
        assert s_ab == s_ba == abs(a - b)
        if a != b:
            np.testing.assert_array_equal(y_ab, y_ba[::-1])


class TestSamplePair:
    def test_all_clean_means_zero_target(self):
        d_lab = [clip(1, 2.0)]
        d_clean = [clip(2, 5.0, "clean"), clip(3, 5.0, "clean")]
        rng = np.random.default_rng(0)
        for _ in range(10):
            pair = sample_pair(d_lab, d_clean, rng, clean_fraction=1.0, excerpt_samples=4000)
            assert pair.s == 0.0
            np.testing.assert_array_equal(pair.y, [0, 1])

    def test_labels_from_original_ratings(self):
        # augmentation is drawn per side; labels must not depend on it
        d_lab = [clip(1, 4.2), clip(2, 3.0)]
        rng = np.random.default_rng(1)
        for _ in range(30):
            pair = sample_pair(d_lab, [], rng, clean_fraction=0.0, excerpt_samples=4000)
            mos = {"u1": 4.2, "u2": 3.0}
            expected_y, expected_s = pair_labels(mos[pair.source_ids[0]], mos[pair.source_ids[1]])
            np.testing.assert_array_equal(pair.y, expected_y)
            assert pair.s == expected_s
            assert pair.x_i.shape == pair.x_j.shape == (4000,)

    def test_fixed_pair_both_orders(self):
        a, b = clip(1, 4.0), clip(2, 2.0)
        rng = np.random.default_rng(2)
        seen = {}
        while len(seen) < 2:
            pair = sample_pair([a, b], [], rng, clean_fraction=0.0, excerpt_samples=4000)
            if pair.source_ids[0] != pair.source_ids[1]:
                seen[pair.source_ids] = pair
        ab, ba = seen[("u1", "u2")], seen[("u2", "u1")]
        np.testing.assert_array_equal(ab.y, ba.y[::-1])
        assert ab.s == ba.s == 2.0

    def test_excerpts_normalized(self):
        pair = sample_pair([clip(1, 3.0)], [clip(2, 5.0)], np.random.default_rng(3), excerpt_samples=4000)
        for x in (pair.x_i, pair.x_j):
            assert np.sqrt(np.mean(x.astype(np.float64) ** 2)) == pytest.approx(10 ** (-25 / 20), rel=1e-4)

    def test_empty_datasets(self):
        with pytest.raises(ValueError, match="empty labeled"):
            sample_pair([], [clip(1, 5.0)], np.random.default_rng(0), clean_fraction=0.5)
        with pytest.raises(ValueError, match="empty clean"):
            sample_pair([clip(1, 3.0)], [], np.random.default_rng(0), clean_fraction=0.5)

    def test_random_crop_tiles_short_clips(self):
        x = np.arange(5, dtype=np.float32)
        np.testing.assert_array_equal(random_crop(x, 12, np.random.default_rng(0)), np.tile(x, 3)[:12])


class TestLoss:
    def test_perfect_prediction(self):
        loss = mtl_loss(output([1.0, 0.0], 2.0), [[1, 0]], [2.0])
        assert float(loss.data) == pytest.approx(0.0, abs=1e-6)

    def test_uniform_preference(self):
        loss = mtl_loss(output([0.5, 0.5], 2.0), [[1, 0]], [2.0], lambda_q=1.0)
        assert float(loss.data) == pytest.approx(math.log(2), abs=1e-6)

    def test_weighted_relative_term(self):
        loss = mtl_loss(output([0.5, 0.5], 1.5), [[0, 1]], [2.5], lambda_q=2.0)
        assert float(loss.data) == pytest.approx(math.log(2) + 2.0, abs=1e-6)

    def test_clamp_reported(self):
        stats = {}
        loss = mtl_loss(output([0.0, 1.0], 1.0), [[1, 0]], [1.0], stats=stats)
        assert stats["clamped"] == 1
        assert float(loss.data) == pytest.approx(-math.log(1e-12), rel=1e-6)

    @settings(max_examples=40, deadline=None)
    @given(p=st.floats(1e-6, 1 - 1e-6), r=st.floats(0, 4), s=st.floats(0, 4), first=st.booleans(),
           lam=st.floats(0.01, 10))
    def test_nonnegative(self, p, r, s, first, lam):
        loss = mtl_loss(output([p, 1 - p], r), [[1, 0] if first else [0, 1]], [s], lam)
        assert float(loss.data) >= 0.0

    def test_zero_weight_gives_relative_head_no_gradient(self):
        model = QualityNet(ModelConfig(conv_channels=(4,), kernel_sizes=(4,), strides=(2,), head_hidden=6,
                                       excerpt_samples=32))
        rng = np.random.default_rng(0)
        out = model.pair_forward(rng.normal(size=(2, 32)), rng.normal(size=(2, 32)))
        mtl_loss(out, [[1, 0], [0, 1]], [1.0, 2.0], lambda_q=0.0).backward()
        for name in ("rel.hidden.weight", "rel.attn.weight", "rel.out.weight", "rel.out.bias"):
            grad = model.params[name].grad
            assert grad is None or not np.any(grad), name
        assert np.any(model.params["pref.out.weight"].grad)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="label shapes"):
            mtl_loss(output([0.5, 0.5], 1.0), [[1, 0], [0, 1]], [1.0])


class TestConfig:
    @pytest.mark.parametrize("kwargs", [dict(batch_size=0), dict(lambda_q=0.0), dict(clean_pair_fraction=1.5),
                                        dict(lr=0.0)])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs).validate()

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.batch_size, cfg.lr, cfg.epochs, cfg.lambda_q, cfg.clean_pair_fraction) == (64, 1e-4, 50, 1.0, 0.25)


class TestTrainLoop:
    def test_loss_decreases_on_toy_corpus(self, toy_corpus):
        records = read_manifest(toy_corpus / "manifest.jsonl")
        d_lab = load_rated([r for r in records if r["split"] == "train" and r["system_id"] != "clean"])
        d_clean = load_rated([r for r in records if r["split"] == "train" and r["system_id"] == "clean"])
        model = QualityNet(SMALL)
        cfg = TrainConfig(batch_size=8, lr=1e-3, epochs=6, seed=0, model=SMALL)
        history = train_model(model, d_lab, d_clean, cfg)
        losses = [h.train_loss for h in history]
        assert len(losses) == 6 and all(v >= 0 for v in losses)
        assert losses[1] < losses[0]
        assert all(v < losses[0] for v in losses[4:])

    def test_non_finite_loss_aborts_with_batch_ids(self):
        model = QualityNet(SMALL)
        model.params["rel.out.bias"].data[:] = np.nan
        cfg = TrainConfig(batch_size=2, epochs=1, model=SMALL)
        with pytest.raises(TrainingError, match="non-finite loss.*u"):
            train_model(model, [clip(1, 3.0), clip(2, 2.0)], [clip(3, 5.0)], cfg)

    def test_shards_match_single_batch(self):
        d_lab, d_clean = [clip(1, 3.0), clip(2, 1.5), clip(4, 4.0)], [clip(3, 5.0)]
        outs = []
        for shard in (1, 4):
            model = QualityNet(SMALL)
            train_model(model, d_lab, d_clean, TrainConfig(batch_size=4, epochs=1, shard_size=shard, model=SMALL))
            outs.append(model.params["conv0.weight"].data.copy())
        np.testing.assert_allclose(outs[0], outs[1], rtol=1e-4, atol=1e-7)


class TestTrainEndToEnd:
    def _run(self, corpus, out):
        cfg = TrainConfig(lab_manifest=str(corpus / "manifest.jsonl"), batch_size=8, lr=1e-3, epochs=2,
                          seed=3, checkpoint_dir=str(out), shard_size=8, dev_nmr=1, model=SMALL)
        return train(cfg)

    def test_outputs_and_determinism(self, toy_corpus, tmp_path):
        a = self._run(toy_corpus, tmp_path / "a")
        b = self._run(toy_corpus, tmp_path / "b")
        assert a.final_path.read_bytes() == b.final_path.read_bytes()
        assert a.best_path.exists()
        lines = [json.loads(line) for line in a.log_path.read_text().splitlines()]
        assert [e["epoch"] for e in lines] == [1, 2]
        assert set(lines[0]) == {"epoch", "train_loss", "dev_spearman", "dev_mse"}
        model, meta = load_checkpoint(a.final_path)
        assert meta["epoch"] == 2 and model.config == SMALL

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="manifest not found"):
            train(TrainConfig(lab_manifest=str(tmp_path / "none.jsonl"), checkpoint_dir=str(tmp_path)))

    def test_unwritable_checkpoint_dir(self, toy_corpus, tmp_path):
        blocker = tmp_path / "f"
        blocker.write_text("")
        cfg = TrainConfig(lab_manifest=str(toy_corpus / "manifest.jsonl"), checkpoint_dir=str(blocker / "x"),
                          epochs=1, model=SMALL)
        with pytest.raises(OSError, match="checkpoint directory"):
            train(cfg)
