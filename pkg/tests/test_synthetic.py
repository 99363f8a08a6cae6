import filecmp

import numpy as np

from histoexpr.cluster import spearman_matrix
from histoexpr.synthetic import SyntheticSpec, generate_synthetic, write_synthetic


def test_block_correlation_near_target():
    data = generate_synthetic(SyntheticSpec(n_patients=300), seed=1, render=False)
    ds = data.dataset
    rho = spearman_matrix(ds.normalized)
    ids = ds.transcript_ids
    for b in range(3):
        idx = [j for j, t in enumerate(ids) if data.block_of.get(t) == b]
        sub = np.abs(rho[np.ix_(idx, idx)])
        within = sub[np.triu_indices(len(idx), 1)].mean()
        assert 0.7 <= within <= 0.9


def test_noise_genes_unrelated_to_latents():
    data = generate_synthetic(SyntheticSpec(n_patients=300), seed=2, render=False)
    ds = data.dataset
    noise = [j for j, t in enumerate(ds.transcript_ids) if t.startswith("N")]
    for b in range(data.latent.shape[1]):
        r = [abs(np.corrcoef(ds.normalized[:, j], data.latent[:, b])[0, 1]) for j in noise]
        assert np.mean(r) < 0.1


def test_tiles_carry_latent_signal():
    data = generate_synthetic(SyntheticSpec(n_patients=60, tiles_per_slide=6, tile_size=32), seed=0)
    tiles = data.tiles["10X"]
    means = np.array([tiles[p.patient_id].reshape(-1, 3).mean(axis=0) for p in data.dataset.patients])
    best = max(abs(np.corrcoef(means[:, c], data.latent[:, b])[0, 1]) for c in range(3) for b in range(3))
    assert best > 0.3


def test_same_seed_identical_files(tmp_path):
    spec = SyntheticSpec(n_patients=20, tiles_per_slide=2, tile_size=16, n_low_expressed=2, n_noncoding=2)
    write_synthetic(generate_synthetic(spec, seed=5), tmp_path / "a")
    write_synthetic(generate_synthetic(spec, seed=5), tmp_path / "b")
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    assert cmp.common_files
