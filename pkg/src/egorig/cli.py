"""Single-binary front-end: synth, solve-ik, refine, fit-splats, render,
eval, and the orchestrated `run` pipeline.

Exit codes: 0 success, 2 missing input (message names the path), 3 stage
failure (message names the stage). All randomness flows from one seed via
named substreams; EGORIG_THREADS caps the torch worker count (default 1,
which also makes runs bit-reproducible).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import camera as cam_mod
from . import deform, harness, ik, refine, splat
from .skeleton import PoseVector, forward_kinematics, load_skeleton, save_skeleton


class MissingInput(RuntimeError):
    pass


class StageFailure(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


def _require(path, what="input"):
    p = Path(path)
    if not p.exists():
        raise MissingInput(f"missing {what}: {p}")
    return p


def _load_json(path, what="config"):
    with open(_require(path, what)) as f:
        return json.load(f)


def _dataclass_from(cls, data):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    kwargs = {k: (tuple(v) if isinstance(v, list) else v) for k, v in data.items()}
    return cls(**kwargs)


def _write_json(data, path):
    with open(path, "w") as f:
        json.dump(data, f, indent=1, sort_keys=True)


# ---------------------------------------------------------------------------
# synth


def _synth(scene_spec, noise_spec, seed, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scene = harness.generate_scene(scene_spec, seed)
    save_skeleton(scene.skeleton, out / "skeleton.json")
    deform.save_character(scene.template, out / "character.obj", out / "character.json")
    cam_mod.save_camera(scene.camera, out / "camera.json")
    cam_mod.save_head_track(scene.head_track, out / "head_track.jsonl")
    gt_motion = ik.MotionEstimate(poses=scene.gt_poses, energies=[{} for _ in scene.gt_poses])
    ik.save_motion(gt_motion, out / "gt_motion.jsonl")
    ik.save_track(scene.keypoints, out / "keypoints_gt.jsonl")
    noisy = harness.perturb_keypoints(scene.keypoints, dataclasses.replace(noise_spec, seed=seed))
    ik.save_track(noisy, out / "keypoints.jsonl")
    masks_dir = out / "masks"
    masks_dir.mkdir(exist_ok=True)
    for t, mask in enumerate(scene.masks):
        refine.save_mask_png(mask, masks_dir / f"frame_{t:04d}.png")
    refine.save_mesh_sequence(out / "gt_meshes.mseq", scene.meshes)

    # procedural ground-truth appearance + per-frame target renders
    tex = splat.create_texture(scene.template, 32, init_opacity=0.98)
    u = (tex.cols + 0.5) / tex.resolution[1]
    v = (tex.rows + 0.5) / tex.resolution[0]
    checker = ((tex.cols // 4 + tex.rows // 4) % 2).astype(float)
    colors = np.stack([0.2 + 0.6 * u, 0.25 + 0.5 * checker, 0.8 - 0.6 * v], axis=1)
    from .sh import C0

    with torch.no_grad():
        tex.sh[:, 0, :] = torch.as_tensor(colors / C0)
    splat.save_texture(tex, out / "gt_texture.egtx")
    targets_dir = out / "targets"
    targets_dir.mkdir(exist_ok=True)
    for t, mesh in enumerate(scene.meshes):
        img = splat.render(tex, mesh, scene.camera, scene.head_track[t], cov2d_dilation=0.3)
        splat.save_render_png(img, targets_dir / f"frame_{t:04d}.png")
    return scene


def cmd_synth(args):
    spec_data = _load_json(args.spec, "scene spec") if args.spec else {}
    scene_spec = _dataclass_from(harness.SceneSpec, spec_data.get("scene", {}))
    noise_spec = _dataclass_from(harness.NoiseModel, spec_data.get("noise", {}))
    _synth(scene_spec, noise_spec, args.seed, args.out)
    print(f"synthetic scene written to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# solve-ik


def cmd_solve_ik(args):
    skeleton = load_skeleton(_require(args.skeleton, "skeleton"))
    track = ik.load_track(_require(args.track, "keypoint track"))
    cfg = ik.ik_config_from_dict(_load_json(args.config, "ik config")) if args.config else ik.IKConfig()
    motion = ik.solve_sequence(skeleton, track, cfg)
    ik.save_motion(motion, args.out)
    print(f"solved {len(motion.poses)} frames -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# refine


def _load_character(obj_path, sidecar_path):
    return deform.load_character(_require(obj_path, "character OBJ"), _require(sidecar_path, "character sidecar"))


def cmd_refine(args):
    tpl = _load_character(args.character, args.character_data)
    meshes = refine.load_mesh_sequence(_require(args.mesh_seq, "mesh sequence"), tpl)
    cam = cam_mod.load_camera(_require(args.camera, "camera"))
    heads = cam_mod.load_head_track(_require(args.head_track, "head track"))
    cfg = _dataclass_from(refine.RefineConfig, _load_json(args.config, "refine config")) if args.config else refine.RefineConfig()
    masks_dir = _require(args.masks, "mask directory")
    refined = []
    for t, mesh in enumerate(meshes):
        mask = refine.load_mask_png(_require(masks_dir / f"frame_{t:04d}.png", "mask"))
        res = refine.refine_frame(mesh, cam, heads[t], mask, cfg)
        refined.append(res.mesh)
    refined = refine.temporal_lowpass(refined, window=cfg.filter_window, sigma=cfg.filter_sigma)
    refine.save_mesh_sequence(args.out, refined)
    print(f"refined {len(refined)} frames -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# fit-splats


def cmd_fit_splats(args):
    tpl = _load_character(args.character, args.character_data)
    meshes = refine.load_mesh_sequence(_require(args.mesh_seq, "mesh sequence"), tpl)
    cam = cam_mod.load_camera(_require(args.camera, "camera"))
    heads = cam_mod.load_head_track(_require(args.head_track, "head track"))
    cfg_data = _load_json(args.config, "fit config") if args.config else {}
    resolution = cfg_data.pop("resolution", args.resolution)
    cfg = _dataclass_from(splat.FitConfig, cfg_data)
    targets_dir = _require(args.targets, "target directory")
    views = []
    for t, mesh in enumerate(meshes):
        tgt = splat.load_render_png(_require(targets_dir / f"frame_{t:04d}.png", "target image"))
        views.append((mesh, cam, heads[t], tgt))
    tex = splat.create_texture(tpl, resolution)
    fitted = splat.fit(tex, *zip(*views), cfg)
    splat.save_texture(fitted, args.out)
    print(f"fitted {fitted.n_texels} texels over {len(views)} views -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# render


def cmd_render(args):
    skeleton = load_skeleton(_require(args.skeleton, "skeleton"))
    tpl = _load_character(args.character, args.character_data)
    tex = splat.load_texture(_require(args.texture, "gaussian texture"))
    cam = cam_mod.load_camera(_require(args.view, "camera"))
    heads = cam_mod.load_head_track(_require(args.head_track, "head track"))
    motion = ik.load_motion(_require(args.pose, "motion"))
    poses = {p.frame_index: p for p in motion.poses}
    if args.frame not in poses:
        raise MissingInput(f"missing frame {args.frame} in {args.pose}")
    params = deform.EmbeddedParams.identity(tpl)
    mesh = deform.pose_mesh(tpl, params, skeleton, poses[args.frame])
    bg = tuple(float(x) for x in args.background.split(","))
    img = splat.render(tex, mesh, cam, heads[args.frame], background=bg, cov2d_dilation=args.cov2d_dilation)
    splat.save_render_png(img, args.out)
    print(f"rendered frame {args.frame} -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# eval


def _image_series(dir_path):
    d = _require(dir_path, "image directory")
    return sorted(Path(d).glob("frame_*.png"))


def cmd_eval(args):
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    report = {"metrics": {}, "per_frame": {}, "config": {"pred": str(args.pred), "gt": str(args.gt), "metrics": metrics}}
    for metric in metrics:
        if metric == "mpjpe":
            pred = _keypoints_from(args.pred, args.skeleton)
            gt = _keypoints_from(args.gt, args.skeleton)
            per = [harness.mpjpe([p], [g]) for p, g in zip(pred, gt)]
            report["metrics"]["mpjpe_cm"] = float(np.mean(per))
            report["per_frame"]["mpjpe_cm"] = per
        elif metric == "p2sd":
            tpl = _load_character(args.character, args.character_data)
            pred = refine.load_mesh_sequence(_require(args.pred, "pred meshes"), tpl)
            gt = refine.load_mesh_sequence(_require(args.gt, "gt meshes"), tpl)
            per = [harness.p2sd(p, g) for p, g in zip(pred, gt)]
            report["metrics"]["p2sd_cm"] = float(np.mean(per))
            report["per_frame"]["p2sd_cm"] = per
        elif metric in ("psnr", "ssim"):
            pred_files = _image_series(args.pred)
            gt_files = _image_series(args.gt)
            pairs = [(p, g) for p, g in zip(pred_files, gt_files)]
            fn = harness.psnr if metric == "psnr" else harness.ssim
            per = [float(fn(splat.load_render_png(p), splat.load_render_png(g))) for p, g in pairs]
            report["metrics"][metric] = float(np.mean(per))
            report["per_frame"][metric] = per
        else:
            raise ValueError(f"unknown metric {metric!r}")
    _write_json(report, args.out)
    print(f"report -> {args.out}")
    return 0


def _keypoints_from(path, skeleton_path):
    """Keypoint positions per frame from a track or a motion file."""
    path = _require(path, "keypoints/motion")
    with open(path) as f:
        first = json.loads(f.readline())
    if "joints" in first:
        return [fr.joints for fr in ik.load_track(path).frames]
    skeleton = load_skeleton(_require(skeleton_path, "skeleton (needed for motion input)"))
    motion = ik.load_motion(path)
    return [forward_kinematics(skeleton, p).keypoint_positions.positions for p in motion.poses]


# ---------------------------------------------------------------------------
# run: orchestrated pipeline


DEFAULT_STAGES = ("synth", "ik", "refine", "fit", "render", "eval")


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def run_pipeline(cfg, out_dir, seed):
    """Execute the configured stages in dependency order; write a manifest.

    Artifacts of completed stages survive a later stage failure.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stages = cfg.get("stages", list(DEFAULT_STAGES))
    order = [s for s in DEFAULT_STAGES if s in stages]

    def stage_guard(name, fn):
        try:
            fn()
        except MissingInput:
            raise
        except Exception as e:  # noqa: BLE001 - stage isolation barrier
            raise StageFailure(name, e) from e

    scene_spec = _dataclass_from(harness.SceneSpec, cfg.get("scene", {}))
    noise_spec = _dataclass_from(harness.NoiseModel, cfg.get("noise", {}))

    if "synth" in order:
        stage_guard("synth", lambda: _synth(scene_spec, noise_spec, seed, out))

    skeleton_path = cfg.get("skeleton", out / "skeleton.json")
    character_obj = cfg.get("character", out / "character.obj")
    character_json = cfg.get("character_data", out / "character.json")
    camera_path = cfg.get("camera", out / "camera.json")
    head_path = cfg.get("head_track", out / "head_track.jsonl")
    track_path = cfg.get("keypoints", out / "keypoints.jsonl")

    if "ik" in order:

        def _ik():
            skeleton = load_skeleton(_require(skeleton_path, "skeleton"))
            track = ik.load_track(_require(track_path, "keypoint track"))
            ik_cfg = _dataclass_from(ik.IKConfig, cfg.get("ik", {}))
            motion = ik.solve_sequence(skeleton, track, ik_cfg)
            ik.save_motion(motion, out / "motion.jsonl")
            # posed meshes for downstream stages
            tpl = _load_character(character_obj, character_json)
            params = deform.EmbeddedParams.identity(tpl)
            meshes = [deform.pose_mesh(tpl, params, skeleton, p) for p in motion.poses]
            refine.save_mesh_sequence(out / "meshes.mseq", meshes)

        stage_guard("ik", _ik)

    if "refine" in order:

        def _refine():
            tpl = _load_character(character_obj, character_json)
            meshes = refine.load_mesh_sequence(_require(out / "meshes.mseq", "posed meshes (run ik first)"), tpl)
            cam = cam_mod.load_camera(_require(camera_path, "camera"))
            heads = cam_mod.load_head_track(_require(head_path, "head track"))
            rc = _dataclass_from(refine.RefineConfig, {"seed": seed, **cfg.get("refine", {})})
            masks_dir = _require(cfg.get("masks", out / "masks"), "mask directory")
            refined = []
            for t, mesh in enumerate(meshes):
                mask = refine.load_mask_png(_require(Path(masks_dir) / f"frame_{t:04d}.png", "mask"))
                refined.append(refine.refine_frame(mesh, cam, heads[t], mask, rc).mesh)
            refined = refine.temporal_lowpass(refined, window=rc.filter_window, sigma=rc.filter_sigma)
            refine.save_mesh_sequence(out / "refined.mseq", refined)

        stage_guard("refine", _refine)

    if "fit" in order:

        def _fit():
            tpl = _load_character(character_obj, character_json)
            mesh_path = out / "refined.mseq" if (out / "refined.mseq").exists() else out / "gt_meshes.mseq"
            meshes = refine.load_mesh_sequence(_require(mesh_path, "mesh sequence"), tpl)
            cam = cam_mod.load_camera(_require(camera_path, "camera"))
            heads = cam_mod.load_head_track(_require(head_path, "head track"))
            fit_data = dict(cfg.get("fit", {}))
            resolution = fit_data.pop("resolution", 32)
            fc = _dataclass_from(splat.FitConfig, fit_data)
            targets_dir = _require(cfg.get("targets", out / "targets"), "target directory")
            views = []
            for t, mesh in enumerate(meshes):
                tgt = splat.load_render_png(_require(Path(targets_dir) / f"frame_{t:04d}.png", "target image"))
                views.append((mesh, cam, heads[t], tgt))
            tex = splat.create_texture(tpl, resolution)
            fitted = splat.fit(tex, *zip(*views), fc)
            splat.save_texture(fitted, out / "texture.egtx")

        stage_guard("fit", _fit)

    if "render" in order:

        def _render():
            tpl = _load_character(character_obj, character_json)
            tex = splat.load_texture(_require(out / "texture.egtx", "fitted texture (run fit first)"))
            cam = cam_mod.load_camera(_require(camera_path, "camera"))
            heads = cam_mod.load_head_track(_require(head_path, "head track"))
            mesh_path = out / "refined.mseq" if (out / "refined.mseq").exists() else out / "meshes.mseq"
            meshes = refine.load_mesh_sequence(_require(mesh_path, "mesh sequence"), tpl)
            rcfg = cfg.get("render", {})
            frames = rcfg.get("frames", list(range(len(meshes))))
            bg = tuple(rcfg.get("background", (0.0, 0.0, 0.0)))
            renders_dir = out / "renders"
            renders_dir.mkdir(exist_ok=True)
            for t in frames:
                img = splat.render(tex, meshes[t], cam, heads[t], background=bg, cov2d_dilation=rcfg.get("cov2d_dilation", 0.3))
                splat.save_render_png(img, renders_dir / f"frame_{t:04d}.png")

        stage_guard("render", _render)

    if "eval" in order:

        def _eval():
            metrics = cfg.get("eval", {}).get("metrics", ["mpjpe", "p2sd", "psnr", "ssim"])
            report = {"metrics": {}, "config": {"seed": seed, "metrics": metrics}}
            skeleton = load_skeleton(_require(skeleton_path, "skeleton"))
            tpl = _load_character(character_obj, character_json)
            if "mpjpe" in metrics:
                motion = ik.load_motion(_require(out / "motion.jsonl", "motion (run ik first)"))
                gt_track = ik.load_track(_require(out / "keypoints_gt.jsonl", "ground-truth keypoints"))
                pred = [forward_kinematics(skeleton, p).keypoint_positions.positions for p in motion.poses]
                report["metrics"]["mpjpe_cm"] = harness.mpjpe(pred, [f.joints for f in gt_track.frames])
            if "p2sd" in metrics:
                pred_path = out / "refined.mseq" if (out / "refined.mseq").exists() else out / "meshes.mseq"
                pred = refine.load_mesh_sequence(_require(pred_path, "predicted meshes"), tpl)
                gt = refine.load_mesh_sequence(_require(out / "gt_meshes.mseq", "ground-truth meshes"), tpl)
                report["metrics"]["p2sd_cm"] = float(np.mean([harness.p2sd(p, g) for p, g in zip(pred, gt)]))
            img_metrics = [m for m in ("psnr", "ssim") if m in metrics]
            if img_metrics:
                pred_files = _image_series(out / "renders")
                vals = {m: [] for m in img_metrics}
                for p in pred_files:
                    g = _require(Path(out / "targets") / p.name, "target image")
                    a, b = splat.load_render_png(p), splat.load_render_png(g)
                    if "psnr" in vals:
                        vals["psnr"].append(harness.psnr(a, b))
                    if "ssim" in vals:
                        vals["ssim"].append(harness.ssim(a, b))
                for m, v in vals.items():
                    report["metrics"][m] = float(np.mean(v))
            _write_json(report, out / "report.json")

        stage_guard("eval", _eval)

    # manifest last, single-threaded
    artifacts = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            artifacts[str(p.relative_to(out))] = _sha256(p)
    manifest = {"seed": seed, "stages": order, "artifacts": artifacts}
    _write_json(manifest, out / "manifest.json")
    return manifest


def cmd_run(args):
    cfg = _load_json(args.config, "pipeline config") if args.config else {}
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    out_dir = args.out or cfg.get("out_dir", "egorig_out")
    run_pipeline(cfg, out_dir, seed)
    print(f"pipeline complete; manifest at {Path(out_dir) / 'manifest.json'}")
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="egorig", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic capture")
    s.add_argument("--spec", help="scene spec JSON ({'scene': {...}, 'noise': {...}})")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("solve-ik", help="solve skeletal poses from keypoints")
    s.add_argument("--skeleton", required=True)
    s.add_argument("--track", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_solve_ik)

    s = sub.add_parser("refine", help="silhouette-driven mesh refinement")
    s.add_argument("--character", required=True, help="template OBJ")
    s.add_argument("--character-data", required=True, help="sidecar JSON")
    s.add_argument("--mesh-seq", required=True)
    s.add_argument("--masks", type=Path, required=True)
    s.add_argument("--camera", required=True)
    s.add_argument("--head-track", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_refine)

    s = sub.add_parser("fit-splats", help="fit the gaussian texture to targets")
    s.add_argument("--character", required=True)
    s.add_argument("--character-data", required=True)
    s.add_argument("--mesh-seq", required=True)
    s.add_argument("--camera", required=True)
    s.add_argument("--head-track", required=True)
    s.add_argument("--targets", type=Path, required=True)
    s.add_argument("--config")
    s.add_argument("--resolution", type=int, default=32)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_fit_splats)

    s = sub.add_parser("render", help="render the avatar for one frame")
    s.add_argument("--skeleton", required=True)
    s.add_argument("--character", required=True)
    s.add_argument("--character-data", required=True)
    s.add_argument("--texture", required=True)
    s.add_argument("--pose", required=True, help="motion JSONL")
    s.add_argument("--view", required=True, help="camera JSON")
    s.add_argument("--head-track", required=True)
    s.add_argument("--frame", type=int, required=True)
    s.add_argument("--background", default="0,0,0")
    s.add_argument("--cov2d-dilation", type=float, default=0.3)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_render)

    s = sub.add_parser("eval", help="metric report between prediction and ground truth")
    s.add_argument("--pred", type=Path, required=True)
    s.add_argument("--gt", type=Path, required=True)
    s.add_argument("--metrics", default="mpjpe,p2sd,psnr,ssim")
    s.add_argument("--skeleton")
    s.add_argument("--character")
    s.add_argument("--character-data")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("run", help="run the configured pipeline stages")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_run)
    return p


def main(argv=None):
    threads = int(os.environ.get("EGORIG_THREADS", "1"))
    torch.set_num_threads(max(threads, 1))
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except MissingInput as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except StageFailure as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (ValueError, ik.IKError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
