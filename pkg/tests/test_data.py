import csv
import json

import numpy as np
import pytest

from blinddip.data import (
    ManifestError,
    PairManifest,
    PairRecord,
    ReportRow,
    build_corpus,
    crop_offsets,
    crop_pair,
    crop_regions,
    load_corpus,
    load_manifest,
    read_report,
    write_manifest,
    write_report,
)
from blinddip.dip import DipConfig
from blinddip.images import add_gaussian_noise, load_image, save_png, synthetic_scene
from blinddip.labels import compute_psnr, mu_to_distribution, psnr_to_mu, record_rng


def make_pairs(tmp_path, n=2, size=16):
    recs = []
    for k in range(n):
        clean = synthetic_scene(size, seed=k)
        save_png(clean, tmp_path / f"c{k}.png")
        save_png(add_gaussian_noise(clean, 0.1, seed=k), tmp_path / f"n{k}.png")
        recs.append(PairRecord(f"img{k}", str(tmp_path / f"n{k}.png"), str(tmp_path / f"c{k}.png"), f"cam{k % 2}"))
    return PairManifest(recs)


def test_manifest_round_trip(tmp_path):
    m = make_pairs(tmp_path, 3)
    path = write_manifest(m, tmp_path / "pairs.jsonl")
    back = load_manifest(path)
    assert [(r.id, r.camera_tag) for r in back] == [(r.id, r.camera_tag) for r in m]
    assert [load_image(r.noisy_path).shape for r in back] == [(16, 16, 3)] * 3


def test_manifest_malformed_line_reported(tmp_path):
    m = make_pairs(tmp_path, 1)
    path = write_manifest(m, tmp_path / "pairs.jsonl")
    path.write_text(path.read_text() + "{not json\n")
    with pytest.raises(ManifestError, match=":2:"):
        load_manifest(path)


def test_manifest_duplicate_ids(tmp_path):
    with pytest.raises(ManifestError):
        PairManifest([PairRecord("a", "x"), PairRecord("a", "y")])


def test_manifest_missing_noisy_file(tmp_path):
    (tmp_path / "m.jsonl").write_text(json.dumps({"id": "a", "noisy": "nope.png"}) + "\n")
    with pytest.raises(ManifestError, match="not found"):
        load_manifest(tmp_path / "m.jsonl")


def test_crop_bounds_and_distinct():
    img = np.random.default_rng(0).random((1024, 1024, 3))
    crops = crop_regions(img, 512, 4, seed=3)
    assert [c.shape for c in crops] == [(512, 512, 3)] * 4
    offs = crop_offsets((1024, 1024), 512, 4, seed=3)
    assert len(set(offs)) == 4
    assert all(0 <= y <= 512 and 0 <= x <= 512 for y, x in offs)


def test_crop_too_small():
    with pytest.raises(ValueError):
        crop_regions(np.zeros((100, 600, 3)), 512, 1, 0)


def test_crop_pair_co_registered():
    rng = np.random.default_rng(0)
    clean = rng.random((80, 90, 3))
    noisy = clean * 0.5
    nc, cc, offs = crop_pair(noisy, clean, 32, 5, seed=9)
    for n, c in zip(nc, cc):
        assert np.array_equal(n, c * 0.5)
    assert offs == crop_offsets((80, 90), 32, 5, seed=9)


def test_crop_paper_protocol_count():
    # 100 regions drawn from a 100-image set, one per image
    rng = np.random.default_rng(1)
    patches = [crop_regions(rng.random((40, 48, 3)), 32, 1, seed=k)[0] for k in range(100)]
    assert len(patches) == 100 and all(p.shape == (32, 32, 3) for p in patches)


@pytest.fixture
def small_corpus(tmp_path):
    pairs = make_pairs(tmp_path, 2)
    cfg = DipConfig(depth=2, filters_down=8, filters_up=8, filters_skip=2, input_channels=4,
                    max_iterations=200, eval_every=10, seed=0)
    corpus = build_corpus(pairs, cfg, tmp_path / "corpus", M=5000, label_seed=4)
    return pairs, cfg, corpus


def test_corpus_counts_and_extremes(small_corpus):
    pairs, cfg, corpus = small_corpus
    assert len(corpus.records) == 2 * 20
    psnrs = [r.psnr for r in corpus.records]
    assert corpus.label_config.min_psnr == min(psnrs)
    assert corpus.label_config.max_psnr == max(psnrs)
    header = json.loads(corpus.manifest_path.read_text().splitlines()[0])
    assert header["label_config"]["min_psnr"] == min(psnrs)


def test_corpus_psnr_recomputes(small_corpus):
    pairs, cfg, corpus = small_corpus
    for r in corpus.records:
        clean = load_image(pairs.get(r.source_id).clean_path)
        snap = load_image(corpus.snapshot_file(r))
        assert compute_psnr(snap, clean) == pytest.approx(r.psnr_quantized, abs=1e-6)
        assert abs(r.psnr - r.psnr_quantized) < 0.1


def test_corpus_targets_regenerate(small_corpus):
    _, _, corpus = small_corpus
    loaded = load_corpus(corpus.root)
    cfg = loaded.label_config
    for r in loaded.records:
        mu = psnr_to_mu(r.psnr, cfg)
        again = mu_to_distribution(mu, cfg, record_rng(cfg.seed, r.key))
        assert again.tolist() == r.target
        assert mu == r.mu


def test_corpus_resumable(small_corpus, monkeypatch):
    pairs, cfg, corpus = small_corpus
    before = corpus.manifest_path.read_bytes()
    import blinddip.data as data

    monkeypatch.setattr(data, "reconstruct", lambda *a, **k: pytest.fail("recomputed a finished pair"))
    again = build_corpus(pairs, cfg, corpus.root, M=5000, label_seed=4)
    assert again.manifest_path.read_bytes() == before


def test_corpus_requires_clean(tmp_path):
    pairs = PairManifest([PairRecord("a", str(tmp_path / "n.png"))])
    with pytest.raises(ManifestError):
        build_corpus(pairs, DipConfig(), tmp_path)


def test_corpus_records_failures(tmp_path, monkeypatch):
    import blinddip.data as data
    from blinddip.dip import ReconstructionError

    pairs = make_pairs(tmp_path, 2)
    real = data.reconstruct

    def flaky(noisy, config, **kw):
        if kw["run_dir"].name == "img1":
            raise ReconstructionError("non-finite loss", 3)
        return real(noisy, config, **kw)

    monkeypatch.setattr(data, "reconstruct", flaky)
    cfg = DipConfig(depth=2, filters_down=4, filters_up=4, filters_skip=1, input_channels=2,
                    max_iterations=20, eval_every=10)
    corpus = build_corpus(pairs, cfg, tmp_path / "c", M=100)
    assert set(corpus.failures) == {"img1"}
    assert {r.source_id for r in corpus.records} == {"img0"}


def test_report_table_layout(tmp_path):
    rows = [ReportRow(f"i{k}", f"cam{k // 3}", {"proposed": 30.0 + k}) for k in range(15)]
    path = write_report(rows, tmp_path / "r.csv")
    table = read_report(path)
    assert len(table) == 16
    assert table[-1]["camera"] == "Average"
    assert float(table[-1]["proposed"]) == pytest.approx(np.mean([30.0 + k for k in range(15)]), abs=0.005)
    cams = [r["camera"] for r in table[:-1]]
    assert cams == sorted(cams)


def test_report_groups_by_camera(tmp_path):
    rows = [ReportRow("a", "x", {"m": 1.0}), ReportRow("b", "y", {"m": 2.0}), ReportRow("c", "x", {"m": 3.0})]
    table = read_report(write_report(rows, tmp_path / "r.csv"))
    assert [r["image_id"] for r in table[:-1]] == ["a", "c", "b"]


def test_report_empty(tmp_path):
    path = write_report([], tmp_path / "r.csv", methods=["proposed"])
    with path.open() as fh:
        lines = list(csv.reader(fh))
    assert lines == [["camera", "image_id", "proposed"], ["Average", "", "NA"]]
