import dataclasses

import numpy as np
import pytest
import torch

from egorig.camera import RigidTransform
from egorig.deform import EmbeddedParams, pose_mesh
from egorig.harness import render_mask
from egorig.refine import (
    DeformationField,
    RefineConfig,
    arap_energy,
    arap_energy_t,
    eval_field,
    gaussian_kernel,
    load_mask_png,
    load_mesh_sequence,
    refine_frame,
    save_mask_png,
    save_mesh_sequence,
    silhouette_energy,
    temporal_lowpass,
)
from egorig.rotations import axis_angle_to_matrix
from egorig.skeleton import PoseVector


@pytest.fixture(scope="module")
def posed(chain_skeleton_mod, tube_mod):
    return pose_mesh(tube_mod, EmbeddedParams.identity(tube_mod), chain_skeleton_mod, PoseVector(np.zeros(chain_skeleton_mod.n_dof)))


@pytest.fixture(scope="module")
def chain_skeleton_mod():
    from egorig.harness import make_chain_skeleton

    return make_chain_skeleton()


@pytest.fixture(scope="module")
def tube_mod(chain_skeleton_mod):
    from egorig.harness import make_tube_character

    tpl, _ = make_tube_character(chain_skeleton_mod)
    return tpl


@pytest.fixture(scope="module")
def ego_head():
    return RigidTransform(np.eye(3), np.array([0.6, 0.0, -0.35]))


# ---------------------------------------------------------------------------
# deformation field


def test_zero_final_layer_is_noop(posed):
    fld = DeformationField(seed=0)
    with torch.no_grad():
        fld.linears[-1].weight.zero_()
        fld.linears[-1].bias.zero_()
    out = eval_field(fld, posed.vertices)
    assert np.all(out == 0.0)


def test_small_init_offsets(posed):
    fld = DeformationField(seed=3)
    fld.set_input_normalization(torch.as_tensor(posed.vertices))
    out = eval_field(fld, posed.vertices)
    assert np.linalg.norm(out, axis=1).max() < 1e-3


def test_field_lipschitz_bound(posed, rng):
    """Observed slopes stay below the product of layer operator norms."""
    fld = DeformationField(seed=1, init_scale=0.05)
    pts = torch.as_tensor(posed.vertices)
    fld.set_input_normalization(pts)

    # operator-norm bound with normalization statistics frozen at the batch
    with torch.no_grad():
        bound = 1.0
        h = (pts - fld.in_center) / fld.in_scale
        scale_in = np.diag(1.0 / fld.in_scale.numpy())
        first = True
        for i in range(len(fld.widths) - 2):
            h_lin = fld.linears[i](h)
            std = torch.sqrt(h_lin.var(dim=0, unbiased=False) + 1e-5)
            W = fld.linears[i].weight.numpy()
            D = np.diag((fld.gammas[i] / std).numpy())
            M = D @ W
            if first:
                M = M @ scale_in
                first = False
            bound *= np.linalg.svd(M, compute_uv=False)[0]
            mu = h_lin.mean(dim=0)
            h = torch.relu(fld.gammas[i] * ((h_lin - mu) / std) + fld.betas[i])
        bound *= np.linalg.svd(fld.linears[-1].weight.numpy(), compute_uv=False)[0]

    base = posed.vertices
    x1 = base[rng.integers(0, len(base), 200)] + rng.normal(0, 0.01, (200, 3))
    x2 = x1 + rng.normal(0, 0.005, (200, 3))
    f1 = eval_field(fld, x1, stats_batch=base)
    f2 = eval_field(fld, x2, stats_batch=base)
    slopes = np.linalg.norm(f1 - f2, axis=1) / np.linalg.norm(x1 - x2, axis=1)
    assert slopes.max() <= bound * (1 + 1e-9)


# ---------------------------------------------------------------------------
# silhouette energy


def test_silhouette_self_consistency_floor(posed, wide_camera, ego_head):
    mask = render_mask(posed, wide_camera, ego_head, soft=True)
    e_self, g_self = silhouette_energy(posed, wide_camera, ego_head, mask)
    displaced = posed.with_vertices(posed.vertices + [0.05, 0.03, 0.0])
    e_disp, g_disp = silhouette_energy(displaced, wide_camera, ego_head, mask)
    assert e_self <= 1e-12
    assert e_disp > e_self
    assert np.linalg.norm(g_self) < 1e-3 * np.linalg.norm(g_disp)


def test_silhouette_monotone_under_displacement(posed, wide_camera, ego_head):
    mask = render_mask(posed, wide_camera, ego_head, soft=True)
    e0, _ = silhouette_energy(posed, wide_camera, ego_head, mask)
    e1, _ = silhouette_energy(posed.with_vertices(posed.vertices + [0.02, 0, 0]), wide_camera, ego_head, mask)
    e2, _ = silhouette_energy(posed.with_vertices(posed.vertices + [0.05, 0, 0]), wide_camera, ego_head, mask)
    assert e0 < e1 < e2


def test_silhouette_empty_mask_equals_coverage_mass(posed, wide_camera, ego_head):
    cov = render_mask(posed, wide_camera, ego_head, soft=True)
    empty = np.zeros_like(cov)
    e, _ = silhouette_energy(posed, wide_camera, ego_head, empty)
    assert abs(e - float((cov**2).sum())) < 1e-9


def test_silhouette_out_of_fov_flagged(posed, wide_camera, ego_head):
    far = posed.with_vertices(posed.vertices + [0.0, 0.0, -10.0])  # behind the camera
    mask = render_mask(posed, wide_camera, ego_head, soft=True)
    with pytest.warns(RuntimeWarning):
        e, _ = silhouette_energy(far, wide_camera, ego_head, mask)
    assert abs(e - float((mask**2).sum())) < 1e-9


def test_silhouette_gradient_fd(posed, wide_camera, ego_head, rng):
    mask = render_mask(posed, wide_camera, ego_head, soft=True)
    displaced = posed.with_vertices(posed.vertices + [0.02, 0.01, 0.0])
    e, g = silhouette_energy(displaced, wide_camera, ego_head, mask)
    u = rng.normal(size=displaced.vertices.shape)
    eps = 1e-6
    ep, _ = silhouette_energy(displaced.with_vertices(displaced.vertices + eps * u), wide_camera, ego_head, mask)
    em, _ = silhouette_energy(displaced.with_vertices(displaced.vertices - eps * u), wide_camera, ego_head, mask)
    fd = (ep - em) / (2 * eps)
    assert abs((g * u).sum() - fd) / abs(fd) < 1e-4


# ---------------------------------------------------------------------------
# ARAP


def test_arap_zero_under_global_rigid(tube_mod, rng):
    v = tube_mod.vertices
    R = axis_angle_to_matrix(rng.normal(0, 1, 3))
    moved = v @ R.T + rng.normal(size=3)
    e, _ = arap_energy(tube_mod, v, moved)
    assert e < 1e-9


def test_arap_scaling_positive(tube_mod):
    v = tube_mod.vertices
    part = tube_mod.part_labels > 0
    scaled = v.copy()
    centroid = v[part].mean(axis=0)
    scaled[part] = centroid + 1.1 * (v[part] - centroid)
    e, _ = arap_energy(tube_mod, v, scaled)
    assert e > 1e-4


def test_arap_rigid_invariance(tube_mod, rng):
    v = tube_mod.vertices
    v2 = v + rng.normal(0, 0.002, v.shape)
    e1, _ = arap_energy(tube_mod, v, v2)
    R = axis_angle_to_matrix(rng.normal(0, 1, 3))
    t = rng.normal(size=3)
    e2, _ = arap_energy(tube_mod, v @ R.T + t, v2 @ R.T + t)
    assert abs(e1 - e2) < 1e-9


def test_arap_matches_rotation_grid_oracle(tube_mod, rng):
    """SVD rigid fit agrees with a 2-degree rotation-grid search on energy."""
    v = tube_mod.vertices
    R0 = axis_angle_to_matrix(np.array([0.0, 0.0, np.radians(4.0)]))
    after = v @ R0.T + np.array([0.01, -0.02, 0.005]) + rng.normal(0, 1e-4, v.shape)
    e_impl, _ = arap_energy(tube_mod, v, after, huber_delta=1e-4)

    labels = tube_mod.part_labels
    delta = 1e-4
    total = 0.0
    steps = np.radians(np.arange(-8, 8.1, 2.0))
    for label in np.unique(labels):
        if label == 0:
            continue
        ids = labels == label
        src, dst = v[ids], after[ids]
        c_src, c_dst = src.mean(0), dst.mean(0)
        best = np.inf
        for a in steps:
            for b in steps:
                for c in steps:
                    R = axis_angle_to_matrix([0, 0, a]) @ axis_angle_to_matrix([0, b, 0]) @ axis_angle_to_matrix([c, 0, 0])
                    res = dst - (src @ R.T + (c_dst - R @ c_src))
                    e = np.sum(np.sqrt((res**2).sum(1) + delta**2) - delta)
                    best = min(best, e)
        total += best
    assert abs(e_impl - total) <= 0.02 * total


def test_arap_degenerate_part_falls_back(rng):
    tpl = _line_template()
    with pytest.warns(RuntimeWarning):
        e, _ = arap_energy(tpl, tpl.vertices, tpl.vertices + [0.1, 0, 0])
    assert e < 1e-9  # translation-only fit absorbs the shift


def _line_template():
    from egorig.deform import TemplateCharacter

    verts = np.stack([np.linspace(0, 1, 6), np.zeros(6), np.zeros(6)], axis=1)
    faces = np.array([[0, 1, 2]])
    uvs = np.array([[[0.1, 0.1], [0.9, 0.1], [0.1, 0.9]]])
    return TemplateCharacter(
        vertices=verts, faces=faces, uvs=uvs, graph_nodes=verts[:1],
        node_idx=np.zeros((6, 1), dtype=int), node_w=np.ones((6, 1)),
        skin_idx=np.zeros((6, 1), dtype=int), skin_w=np.ones((6, 1)),
        part_labels=np.ones(6, dtype=int),
    )


def test_arap_gradient_fd(tube_mod, rng):
    v = tube_mod.vertices
    after = v + rng.normal(0, 0.003, v.shape)
    e, g = arap_energy(tube_mod, v, after)
    u = rng.normal(size=v.shape)
    eps = 1e-6
    ep, _ = arap_energy(tube_mod, v, after + eps * u)
    em, _ = arap_energy(tube_mod, v, after - eps * u)
    fd = (ep - em) / (2 * eps)
    assert abs((g * u).sum() - fd) / abs(fd) < 1e-4


# ---------------------------------------------------------------------------
# refine_frame


def test_refine_noop_when_mask_matches(posed, wide_camera, ego_head):
    mask = render_mask(posed, wide_camera, ego_head, soft=True)
    cfg = RefineConfig(iters=40, seed=0)
    res = refine_frame(posed, wide_camera, ego_head, mask, cfg)
    assert not res.diverged
    disp = np.linalg.norm(res.mesh.vertices - posed.vertices, axis=1).max()
    assert disp < 1e-3


def test_refine_regularizers_only_fixed_point(posed, wide_camera, ego_head):
    mask = render_mask(posed, wide_camera, ego_head, soft=True)
    cfg = RefineConfig(iters=40, w_sil=0.0, seed=0)
    res = refine_frame(posed, wide_camera, ego_head, mask, cfg)
    disp = np.linalg.norm(res.mesh.vertices - posed.vertices, axis=1).max()
    assert disp < 1e-3


def test_refine_reduces_silhouette_and_p2sd(chain_skeleton_mod, rigid_tube_mod, wide_camera, ego_head):
    from egorig.harness import p2sd

    mesh = pose_mesh(rigid_tube_mod, EmbeddedParams.identity(rigid_tube_mod), chain_skeleton_mod, PoseVector(np.zeros(chain_skeleton_mod.n_dof)))
    mask = render_mask(mesh, wide_camera, ego_head, soft=True)
    displaced = mesh.with_vertices(mesh.vertices + [0.01, 0.02, 0.0])
    e0, _ = silhouette_energy(displaced, wide_camera, ego_head, mask)
    cfg = RefineConfig(iters=120, w_arap=10.0, seed=0)
    res = refine_frame(displaced, wide_camera, ego_head, mask, cfg)
    e1, _ = silhouette_energy(res.mesh, wide_camera, ego_head, mask)
    assert e1 <= 0.5 * e0
    assert p2sd(res.mesh, mesh) < p2sd(displaced, mesh)


@pytest.fixture(scope="module")
def rigid_tube_mod(tube_mod):
    return dataclasses.replace(
        tube_mod, part_labels=np.ones(tube_mod.n_vertices, dtype=int), part_names=("body", "all")
    )


def test_refine_energy_mostly_decreases(posed, wide_camera, ego_head):
    """Final energy <= initial in at least 95% of randomized trials."""
    rng = np.random.default_rng(42)
    ok = 0
    trials = 8
    mask = render_mask(posed, wide_camera, ego_head, soft=True)
    for i in range(trials):
        jitter = rng.normal(0, 0.004, posed.vertices.shape)
        start = posed.with_vertices(posed.vertices + jitter)
        cfg = RefineConfig(iters=25, seed=i)
        res = refine_frame(start, wide_camera, ego_head, mask, cfg)
        if res.final_energy <= res.initial_energy + 1e-9:
            ok += 1
    assert ok / trials >= 0.95


def test_refine_divergence_returns_input(posed, wide_camera, ego_head):
    mask = render_mask(posed, wide_camera, ego_head, soft=True)
    cfg = RefineConfig(iters=30, lr=5.0, divergence_factor=1.5, seed=0)
    with pytest.warns(RuntimeWarning):
        res = refine_frame(posed, wide_camera, ego_head, mask, cfg)
    if res.diverged:
        assert np.array_equal(res.mesh.vertices, posed.vertices)


# ---------------------------------------------------------------------------
# temporal low-pass


def _mesh_seq(posed, offsets):
    return [posed.with_vertices(posed.vertices + off, frame_index=i) for i, off in enumerate(offsets)]


def test_lowpass_constant_unchanged(posed):
    seq = _mesh_seq(posed, [np.zeros(3)] * 6)
    out = temporal_lowpass(seq, window=5, sigma=1.0)
    for m in out:
        np.testing.assert_allclose(m.vertices, posed.vertices, atol=1e-12)


def test_lowpass_impulse_attenuated(posed):
    offsets = [np.zeros(3)] * 7
    offsets[3] = np.array([0.1, 0.0, 0.0])
    seq = _mesh_seq(posed, offsets)
    out = temporal_lowpass(seq, window=5, sigma=1.0)
    k = gaussian_kernel(5, 1.0)
    expected_center = posed.vertices + k[2] * np.array([0.1, 0, 0])
    np.testing.assert_allclose(out[3].vertices, expected_center, atol=1e-12)


def test_lowpass_window_one_identity(posed, rng):
    seq = _mesh_seq(posed, [rng.normal(0, 0.01, 3) for _ in range(4)])
    out = temporal_lowpass(seq, window=1)
    for a, b in zip(out, seq):
        assert np.array_equal(a.vertices, b.vertices)


def test_lowpass_commutes_with_rigid_motion(posed, rng):
    seq = _mesh_seq(posed, [rng.normal(0, 0.01, 3) for _ in range(6)])
    R = axis_angle_to_matrix(rng.normal(0, 1, 3))
    t = rng.normal(size=3)
    moved = [m.with_vertices(m.vertices @ R.T + t) for m in seq]
    a = temporal_lowpass(moved, window=5, sigma=1.0)
    b = [m.with_vertices(m.vertices @ R.T + t) for m in temporal_lowpass(seq, window=5, sigma=1.0)]
    for x, y in zip(a, b):
        np.testing.assert_allclose(x.vertices, y.vertices, atol=1e-9)


def test_lowpass_rejects_even_window(posed):
    with pytest.raises(ValueError):
        temporal_lowpass(_mesh_seq(posed, [np.zeros(3)] * 3), window=4)


# ---------------------------------------------------------------------------
# file formats


def test_mesh_sequence_roundtrip(posed, tmp_path, rng):
    seq = _mesh_seq(posed, [rng.normal(0, 0.01, 3) for _ in range(3)])
    path = tmp_path / "seq.mseq"
    save_mesh_sequence(path, seq)
    back = load_mesh_sequence(path, posed.template)
    assert len(back) == 3
    for a, b in zip(back, seq):
        np.testing.assert_allclose(a.vertices, b.vertices, atol=1e-6)
    raw, (V, F) = load_mesh_sequence(path)
    assert raw.shape == (3, posed.template.n_vertices, 3)
    assert (V, F) == (posed.template.n_vertices, len(posed.faces))


def test_mask_png_roundtrip(tmp_path, rng):
    mask = rng.uniform(0, 1, (24, 32))
    path = tmp_path / "m.png"
    save_mask_png(mask, path)
    back = load_mask_png(path)
    assert back.shape == (24, 32)
    assert np.abs(back - mask).max() <= 0.5 / 255 + 1e-9
