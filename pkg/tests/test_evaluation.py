import math

import numpy as np
import pytest
import torch

from aitl_reid.errors import DimensionMismatchError, NoValidGalleryError
from aitl_reid.evaluation import DVDPTrace, DVDPTracker, cmc_map

import oracles


def random_instance(rng, nq=20, ng=50, d=8, ids=10, cams=3):
    q_ids = rng.integers(0, ids, size=nq)
    g_ids = np.concatenate([np.arange(ids), rng.integers(0, ids, size=ng - ids)])
    return (rng.normal(size=(nq, d)), q_ids, rng.integers(0, cams, size=nq),
            rng.normal(size=(ng, d)), g_ids, rng.integers(0, cams, size=ng))


def test_perfect_retrieval():
    r = cmc_map([[1.0, 0.0]], [7], [1], [[1.0, 0.1], [0.0, 1.0]], [7, 3], [2, 2])
    assert r.rank_k[1] == 1.0 and r.mAP == 1.0


def test_match_ranked_second_of_ten():
    angles = np.linspace(0.1, 1.5, 10)
    gallery = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    ids = [1, 99, 2, 3, 4, 6, 7, 8, 9, 10]
    r = cmc_map([[1.0, 0.0]], [99], [0], gallery, ids, [1] * 10)
    assert r.rank_k[1] == 0.0 and r.rank_k[5] == 1.0
    assert r.mAP == 0.5


def test_same_camera_same_id_excluded():
    g = [[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]]
    r = cmc_map([[1.0, 0.0]], [1], [1], g, [1, 1, 2], [1, 2, 1])
    # the identical entry shares id and camera, so the second one counts as rank 1
    assert r.rank_k[1] == 1.0 and r.mAP == 1.0


@pytest.mark.parametrize("seed", range(50))
def test_matches_naive_oracle(seed):
    inst = random_instance(np.random.default_rng(seed))
    r = cmc_map(*inst)
    cmc, m_ap, aps = oracles.ranking(*inst)
    assert abs(r.mAP - m_ap) < 1e-9
    assert all(abs(r.rank_k[k] - cmc[k]) < 1e-9 for k in cmc)
    assert np.allclose(r.average_precision, aps, atol=1e-9)


def test_gallery_permutation_and_rotation_invariance():
    rng = np.random.default_rng(3)
    qf, qi, qc, gf, gi, gc = random_instance(rng)
    base = cmc_map(qf, qi, qc, gf, gi, gc)
    perm = rng.permutation(len(gf))
    permuted = cmc_map(qf, qi, qc, gf[perm], gi[perm], gc[perm])
    rot, _ = np.linalg.qr(rng.normal(size=(8, 8)))
    rotated = cmc_map(qf @ rot, qi, qc, gf @ rot, gi, gc)
    for other in (permuted, rotated):
        assert other.mAP == pytest.approx(base.mAP, abs=1e-12)
        assert other.rank_k == base.rank_k


def test_metric_ranges():
    for seed in range(10):
        r = cmc_map(*random_instance(np.random.default_rng(seed)))
        vals = [r.rank_k[k] for k in sorted(r.rank_k)]
        assert vals == sorted(vals) and 0 <= vals[0] and vals[-1] <= 1
        assert ((r.average_precision > 0) & (r.average_precision <= 1)).all()


def test_query_without_match_is_skipped():
    g = [[1.0, 0.0], [0.0, 1.0]]
    with pytest.warns(UserWarning, match="skipped"):
        r = cmc_map([[1.0, 0.0], [0.0, 1.0]], [1, 5], [0, 0], g, [1, 2], [1, 1])
    assert r.num_queries == 1 and r.num_skipped == 1


def test_all_queries_without_match():
    with pytest.warns(UserWarning):
        with pytest.raises(NoValidGalleryError):
            cmc_map([[1.0, 0.0]], [1], [0], [[1.0, 0.0]], [1], [0])


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatchError):
        cmc_map(np.ones((1, 2)), [0], [0], np.ones((1, 3)), [0], [1])


def test_accepts_tensors():
    inst = random_instance(np.random.default_rng(0))
    a = cmc_map(*inst)
    b = cmc_map(*(torch.as_tensor(x) for x in inst))
    assert a.mAP == b.mAP


def test_trace_csv_round_trip(tmp_path):
    trace = DVDPTrace()
    trace.append(1, 0.1234567890123, 0.5)
    trace.append(2, 1 / 3, None)
    trace.to_csv(tmp_path / "t.csv")
    back = DVDPTrace.from_csv(tmp_path / "t.csv")
    assert back.epochs == [1, 2] and back.dvdp == trace.dvdp
    assert back.mAP[0] == 0.5 and math.isnan(back.mAP[1])


def test_trace_epochs_increase():
    trace = DVDPTrace()
    trace.append(2, 0.0, 0.0)
    with pytest.raises(ValueError):
        trace.append(2, 0.0, 0.0)


def test_tracker_averages_batches():
    tr = DVDPTracker()
    for v in (0.1, 0.3):
        tr.on_batch(v)
    assert tr.on_epoch_end(1, 0.4) == pytest.approx(0.2)
    assert tr.trace.epochs == [1] and tr.trace.mAP == [0.4]
