use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use evmotion::estimation::{
    estimate_egomotion, estimate_object_velocity, DepthSource, EstimatorConfig, MotionModel, Splat, WarpObjective,
};
use evmotion::events::{project_slice, save_events, slice_stream, EventSlice, SensorSize, SliceMap};
use evmotion::geometry::{flow_field, CameraIntrinsics, DepthMap, MixturePoseField, Pose6};
use evmotion::grid::Grid;
use evmotion::groundtruth::{generate_frames, FrameOptions, ProjectOptions, BACKGROUND_ID, EMPTY_ID};
use evmotion::io::manifest::{depth_to_pfm_grid, load_scene, write_gt_frames, FrameEntry, GtManifest, SCHEMA_VERSION};
use evmotion::io::pnm::{read_pgm, write_pfm, write_pgm};
use evmotion::metrics::{aee, depth_metrics, iou, rre_rate, shared_valid, Alignment, DepthMetrics};
use evmotion::synth::{generate, random_object_scene, random_rigid_scene, textured_surface, Surface};
use evmotion::warping::{depth_loss, warp_slice, LossWeights, WarpDiagnostics};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::inputs::{self, GtSource};
use crate::render;
use crate::{
    AlignmentArg, CompensateArgs, DepthArgs, EstimateEgoArgs, EstimateObjArgs, EstimatorArgs, EvalDepthArgs,
    EvalMaskArgs, EvalMotionArgs, GenGtArgs, LossArgs, ModeArg, SceneKind, SliceArgs, SplatArg, SynthArgs, WindowArgs,
};

pub fn slice(a: SliceArgs) -> Result<()> {
    let sensor = match &a.sensor.intrinsics {
        Some(path) => {
            let k = inputs::intrinsics(path)?;
            SensorSize::new(k.width, k.height)
        }
        None => SensorSize::new(a.sensor.width, a.sensor.height),
    };
    let events = inputs::events(&a.events, sensor, a.strict)?;
    if events.is_empty() {
        eprintln!("warning: {} holds no events; nothing written", a.events.display());
        return Ok(());
    }
    let slices = slice_stream(&events, a.dt_ms * 1e-3, sensor)?;
    inputs::create_dir(&a.out)?;
    let mut entries = Vec::with_capacity(slices.len());
    for (i, s) in slices.iter().enumerate() {
        let map = project_slice(s);
        let names = ["pos", "neg", "time"].map(|c| format!("slice_{i:04}_{c}.pgm"));
        write_pgm(&a.out.join(&names[0]), &render::count_image(&map.pos_count))?;
        write_pgm(&a.out.join(&names[1]), &render::count_image(&map.neg_count))?;
        write_pgm(&a.out.join(&names[2]), &render::time_image(&map.time_agg))?;
        entries.push(json!({
            "index": i,
            "t_start": s.t_start(),
            "t_end": s.t_end(),
            "events": s.len(),
            "pos": names[0],
            "neg": names[1],
            "time": names[2],
        }));
    }
    inputs::report(
        Some(&a.out.join("manifest.json")),
        &json!({
            "dt": a.dt_ms * 1e-3,
            "sensor": sensor,
            "events": events.len(),
            "slices": entries,
        }),
    )?;
    eprintln!(
        "{} slices of {} events written to {}",
        slices.len(),
        events.len(),
        a.out.display()
    );
    Ok(())
}

fn weights(l: &LossArgs) -> LossWeights {
    LossWeights {
        w_coarse: l.w_coarse,
        w_fine: l.w_fine,
        p: l.p,
        ..LossWeights::default()
    }
}

/// Literal (nearest-pixel) fine and coarse losses of the window at `pose`.
fn losses(
    slices: &[EventSlice],
    depth: &DepthMap,
    k: &CameraIntrinsics,
    w: &WindowArgs,
    l: &LossArgs,
    pose: &Pose6,
) -> Result<Value> {
    let base = weights(l);
    let only = |w_fine: f64, w_coarse: f64| LossWeights {
        w_fine,
        w_coarse,
        ..base
    };
    let mut fine = WarpObjective::new(
        slices,
        depth,
        k,
        None,
        &only(1.0, 0.0),
        w.fine_dt_ms * 1e-3,
        Splat::Nearest,
        1,
    )?;
    let mut coarse = WarpObjective::new(
        slices,
        depth,
        k,
        None,
        &only(0.0, 1.0),
        w.fine_dt_ms * 1e-3,
        Splat::Nearest,
        1,
    )?;
    let (f, c) = (fine.eval(pose), coarse.eval(pose));
    Ok(json!({
        "fine": f,
        "coarse": c,
        "total": base.w_fine * f + base.w_coarse * c,
    }))
}

fn window_json(slices: &[EventSlice]) -> Value {
    let mid = &slices[slices.len() / 2];
    json!({
        "t_start": slices[0].t_start(),
        "t_end": slices[slices.len() - 1].t_end(),
        "t_ref": mid.midpoint(),
        "events": slices.iter().map(|s| s.len()).sum::<usize>(),
    })
}

enum DepthChoice {
    Map(DepthMap),
    Plane(f64),
}

fn explicit_depth(d: &DepthArgs) -> Result<Option<DepthChoice>> {
    Ok(match (&d.depth, d.plane_depth) {
        (Some(path), _) => Some(DepthChoice::Map(inputs::depth(path)?)),
        (None, Some(z)) => Some(DepthChoice::Plane(z)),
        (None, None) => None,
    })
}

fn depth_map(choice: DepthChoice, k: &CameraIntrinsics) -> Result<DepthMap> {
    let (w, h) = k.dims();
    Ok(match choice {
        DepthChoice::Map(d) => d,
        DepthChoice::Plane(z) => DepthMap::constant(w, h, z)?,
    })
}

pub fn compensate(a: CompensateArgs) -> Result<()> {
    let k = inputs::intrinsics(&a.intrinsics)?;
    let sensor = SensorSize::new(k.width, k.height);
    let events = inputs::events(&a.events, sensor, a.window.strict)?;
    if events.is_empty() {
        eprintln!("warning: {} holds no events; nothing written", a.events.display());
        return Ok(());
    }
    let slices = inputs::window(&events, &a.window, sensor)?;
    let t_ref = slices[slices.len() / 2].midpoint();
    let frame = match &a.gt_manifest {
        Some(path) => Some(GtSource::load(path)?.frame_near(t_ref)?),
        None => None,
    };
    let pose = match (a.pose, &frame) {
        (Some(p), _) => p,
        (None, Some(f)) => f.cam_velocity,
        (None, None) => bail!("a pose is needed: pass --pose or --gt-manifest"),
    };
    let choice = match (explicit_depth(&a.depth)?, frame) {
        (Some(c), _) => c,
        (None, Some(f)) => DepthChoice::Map(f.depth),
        (None, None) => bail!("depth is needed: pass --depth, --plane-depth or --gt-manifest"),
    };
    let depth = depth_map(choice, &k)?;
    let (w, h) = k.dims();
    let still = flow_field(&depth, &MixturePoseField::rigid(Pose6::zero(), w, h), &k)?;
    let flow = flow_field(&depth, &MixturePoseField::rigid(pose, w, h), &k)?;

    let mut before: Vec<SliceMap> = Vec::new();
    let mut after: Vec<SliceMap> = Vec::new();
    let mut diag = WarpDiagnostics::default();
    for s in &slices {
        before.push(project_slice(&warp_slice(s, &still, t_ref)?.0));
        let (warped, d) = warp_slice(s, &flow, t_ref)?;
        after.push(project_slice(&warped));
        diag = diag.merge(&d);
    }
    let before = render::event_stack(&before, w, h);
    let after = render::event_stack(&after, w, h);
    let max = before
        .as_slice()
        .iter()
        .chain(after.as_slice())
        .copied()
        .max()
        .unwrap_or(0);
    inputs::create_dir(&a.out)?;
    write_pgm(&a.out.join("before.pgm"), &render::scaled_image(&before, max))?;
    write_pgm(&a.out.join("after.pgm"), &render::scaled_image(&after, max))?;

    let report = json!({
        "window": window_json(&slices),
        "pose": pose,
        "p": a.loss.p,
        "loss_before": losses(&slices, &depth, &k, &a.window, &a.loss, &Pose6::zero())?,
        "loss_after": losses(&slices, &depth, &k, &a.window, &a.loss, &pose)?,
        "diagnostics": diag,
        "stack_max": max,
    });
    inputs::report(Some(&a.out.join("losses.json")), &report)
}

fn estimator_config(e: &EstimatorArgs, w: &WindowArgs, l: &LossArgs, plane: Option<f64>) -> EstimatorConfig {
    let defaults = EstimatorConfig::default();
    EstimatorConfig {
        mode: match e.mode {
            ModeArg::SixDof => MotionModel::SixDof,
            ModeArg::FourDofPlanar => MotionModel::FourDofPlanar,
        },
        max_iters: e.max_iters,
        weights: weights(l),
        multistart: e.multistart,
        depth_source: if plane.is_some() {
            DepthSource::ConstantPlane
        } else {
            DepthSource::GroundTruth
        },
        plane_depth: plane.unwrap_or(defaults.plane_depth),
        fine_dt: w.fine_dt_ms * 1e-3,
        pyramid_levels: e.pyramid_levels,
        splat: match e.splat {
            SplatArg::Nearest => Splat::Nearest,
            SplatArg::Bilinear => Splat::Bilinear,
        },
        seed: e.seed,
        ..defaults
    }
}

fn load_window(events: &Path, k: &CameraIntrinsics, w: &WindowArgs) -> Result<Vec<EventSlice>> {
    let sensor = SensorSize::new(k.width, k.height);
    let events = inputs::events(events, sensor, w.strict)?;
    inputs::window(&events, w, sensor)
}

pub fn estimate_ego(a: EstimateEgoArgs) -> Result<()> {
    let k = inputs::intrinsics(&a.intrinsics)?;
    let slices = load_window(&a.events, &k, &a.window)?;
    let t_ref = slices[slices.len() / 2].midpoint();
    let choice = match (explicit_depth(&a.depth)?, &a.gt_manifest) {
        (Some(c), _) => c,
        (None, Some(path)) => DepthChoice::Map(GtSource::load(path)?.frame_near(t_ref)?.depth),
        (None, None) => unreachable!("clap requires a depth source"),
    };
    let (plane, depth) = match choice {
        DepthChoice::Plane(z) => (Some(z), None),
        DepthChoice::Map(d) => (None, Some(d)),
    };
    let cfg = estimator_config(&a.estimator, &a.window, &a.loss, plane);
    let r = estimate_egomotion(&slices, depth.as_ref(), &k, &cfg).context("estimating egomotion")?;
    let used = depth_map(
        match (plane, depth) {
            (Some(z), _) => DepthChoice::Plane(z),
            (None, Some(d)) => DepthChoice::Map(d),
            (None, None) => unreachable!(),
        },
        &k,
    )?;
    let report = json!({
        "window": window_json(&slices),
        "mode": cfg.mode,
        "depth_source": cfg.depth_source,
        "seed": cfg.seed,
        "pose": r.pose,
        "objective": r.objective,
        "iterations": r.iterations,
        "evaluations": r.evaluations,
        "converged": r.converged,
        "losses": losses(&slices, &used, &k, &a.window, &a.loss, &r.pose)?,
        "diagnostics": r.diagnostics,
    });
    inputs::report(a.out.as_deref(), &report)
}

/// Mean camera-frame velocity of the scene points under `mask` when the
/// pixels move with `ego + translation`.
pub fn masked_velocity(
    depth: &DepthMap,
    mask: &Grid<bool>,
    k: &CameraIntrinsics,
    ego: &Pose6,
    translation: &Vector3<f64>,
) -> Option<Vector3<f64>> {
    let (w, h) = depth.dims();
    let mut sum = Vector3::zeros();
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if let (true, Some(z)) = (*mask.get(x, y), depth.get(x, y)) {
                sum += k.back_project(x as f64, y as f64, z);
                n += 1;
            }
        }
    }
    (n > 0).then(|| {
        let centre = sum / n as f64;
        -(ego.v + translation) - ego.omega.cross(&centre)
    })
}

fn ego_from_json(path: &Path) -> Result<Pose6> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let pose = v
        .get("pose")
        .with_context(|| format!("{} has no `pose` field", path.display()))?;
    Ok(serde_json::from_value(pose.clone())?)
}

pub fn estimate_obj(a: EstimateObjArgs) -> Result<()> {
    let k = inputs::intrinsics(&a.intrinsics)?;
    let slices = load_window(&a.events, &k, &a.window)?;
    let t_ref = slices[slices.len() / 2].midpoint();
    let frame = match &a.gt_manifest {
        Some(path) => Some(GtSource::load(path)?.frame_near(t_ref)?),
        None => None,
    };
    let ego = match (a.ego, &a.ego_json, &frame) {
        (Some(p), _, _) => p,
        (None, Some(path), _) => ego_from_json(path)?,
        (None, None, Some(f)) => f.cam_velocity,
        (None, None, None) => {
            bail!("an ego velocity is needed: pass --ego, --ego-json or --gt-manifest")
        }
    };
    let labels = match (&a.mask, &frame) {
        (Some(path), _) => read_pgm(path).with_context(|| format!("reading mask {}", path.display()))?,
        (None, Some(f)) => f.mask.clone(),
        (None, None) => bail!("an object mask is needed: pass --mask or --gt-manifest"),
    };
    let mask = labels.map(|&l| l == a.object_id);
    let (plane, depth) = match (explicit_depth(&a.depth)?, frame) {
        (Some(DepthChoice::Plane(z)), _) => (Some(z), None),
        (Some(DepthChoice::Map(d)), _) => (None, Some(d)),
        (None, Some(f)) => (None, Some(f.depth)),
        (None, None) => unreachable!("clap requires a depth source"),
    };
    let cfg = estimator_config(&a.estimator, &a.window, &a.loss, plane);
    let r = estimate_object_velocity(&slices, depth.as_ref(), &k, ego, &mask, &cfg)
        .with_context(|| format!("estimating the velocity of object {}", a.object_id))?;
    let used = match (plane, depth) {
        (Some(z), _) => depth_map(DepthChoice::Plane(z), &k)?,
        (None, Some(d)) => d,
        (None, None) => unreachable!(),
    };
    let report = json!({
        "window": window_json(&slices),
        "object_id": a.object_id,
        "depth_source": cfg.depth_source,
        "seed": cfg.seed,
        "ego": ego,
        "translation": r.translation,
        "velocity": masked_velocity(&used, &mask, &k, &ego, &r.translation),
        "mask_pixels": mask.as_slice().iter().filter(|&&m| m).count(),
        "events_used": r.events_used,
        "objective": r.objective,
        "iterations": r.iterations,
        "evaluations": r.evaluations,
        "converged": r.converged,
        "diagnostics": r.diagnostics,
    });
    inputs::report(a.out.as_deref(), &report)
}

pub fn gen_gt(a: GenGtArgs) -> Result<()> {
    let scene = load_scene(&a.scene).with_context(|| format!("loading scene {}", a.scene.display()))?;
    let opts = FrameOptions {
        projection: ProjectOptions { footprint: a.footprint },
        velocity_dt: a.velocity_dt_ms * 1e-3,
    };
    let frames = generate_frames(&scene, a.fps, &opts)?;
    let manifest = write_gt_frames(&a.out, &frames, a.fps, scene.intrinsics())?;
    eprintln!("{} frames written to {}", manifest.frames.len(), a.out.display());
    Ok(())
}

pub fn eval_depth(a: EvalDepthArgs) -> Result<()> {
    let alignment = match a.alignment {
        AlignmentArg::Median => Alignment::Median,
        AlignmentArg::Mean => Alignment::Mean,
        AlignmentArg::None => Alignment::None,
    };
    let mut per_frame = Vec::new();
    let mut metrics = Vec::new();
    let mut loss_sum = 0.0;
    let mut pixels = 0usize;
    for (name, pred, gt) in inputs::pair_files(&a.pred, &a.gt, "pfm")? {
        let (p, g) = (inputs::depth(&pred)?, inputs::depth(&gt)?);
        let m = depth_metrics(&p, &g, alignment).with_context(|| format!("comparing {name}"))?;
        let n = shared_valid(&p, &g)?.len();
        let loss = depth_loss(&p, &g, 0.0)?;
        per_frame.push(json!({ "file": name, "pixels": n, "metrics": m, "depth_loss": loss }));
        metrics.push(m);
        loss_sum += loss;
        pixels += n;
    }
    let mean: DepthMetrics = DepthMetrics::mean(&metrics).expect("at least one pair");
    let report = json!({
        "alignment": alignment,
        "frames": metrics.len(),
        "pixels": pixels,
        "metrics": mean,
        "depth_loss": loss_sum / metrics.len() as f64,
        "per_frame": per_frame,
    });
    inputs::report(a.out.as_deref(), &report)
}

pub fn eval_motion(a: EvalMotionArgs) -> Result<()> {
    let pred = GtSource::load(&a.pred)?.manifest;
    let gt = GtSource::load(&a.gt)?.manifest;
    if pred.frames.len() != gt.frames.len() || pred.frames.is_empty() {
        bail!(
            "prediction has {} frames and ground truth {}; they must match and be non-empty",
            pred.frames.len(),
            gt.frames.len()
        );
    }
    let dt = 1.0 / gt.fps;
    let (mut pv, mut gv) = (Vec::new(), Vec::new());
    let mut rre_sum = 0.0;
    let mut objects: BTreeMap<String, (Vec<Vector3<f64>>, Vec<Vector3<f64>>)> = BTreeMap::new();
    let mut missing = 0usize;
    for (p, g) in pred.frames.iter().zip(&gt.frames) {
        if (p.t - g.t).abs() > 0.5 * dt {
            bail!(
                "frame {} is at {} s in the prediction but {} s in the ground truth",
                g.index,
                p.t,
                g.t
            );
        }
        pv.push(p.cam_velocity.v);
        gv.push(g.cam_velocity.v);
        rre_sum += rre_rate(&p.cam_velocity.omega, &g.cam_velocity.omega, dt)?;
        for (id, vg) in &g.object_velocities {
            match p.object_velocities.get(id) {
                Some(vp) => {
                    let e = objects.entry(id.clone()).or_default();
                    e.0.push(Vector3::from(*vp));
                    e.1.push(Vector3::from(*vg));
                }
                None => missing += 1,
            }
        }
    }
    let mut per_object = BTreeMap::new();
    let (mut all_p, mut all_g) = (Vec::new(), Vec::new());
    for (id, (p, g)) in &objects {
        per_object.insert(
            id.clone(),
            json!({ "frames": p.len(), "aee": aee(p, g, a.scale_from_gt)? }),
        );
        all_p.extend_from_slice(p);
        all_g.extend_from_slice(g);
    }
    let object_aee = if all_p.is_empty() {
        None
    } else {
        Some(aee(&all_p, &all_g, a.scale_from_gt)?)
    };
    let report = json!({
        "frames": gt.frames.len(),
        "scale_from_gt": a.scale_from_gt,
        "camera": { "aee": aee(&pv, &gv, a.scale_from_gt)?, "rre": rre_sum / gt.frames.len() as f64 },
        "objects": { "aee": object_aee, "pairs": all_p.len(), "missing": missing, "per_object": per_object },
    });
    inputs::report(a.out.as_deref(), &report)
}

pub fn eval_mask(a: EvalMaskArgs) -> Result<()> {
    let mut per_id: BTreeMap<u8, (f64, usize)> = BTreeMap::new();
    let mut per_frame = Vec::new();
    let (mut sum, mut count) = (0.0, 0usize);
    for (name, pred, gt) in inputs::pair_files(&a.pred, &a.gt, "pgm")? {
        let p = read_pgm(&pred).with_context(|| format!("reading {}", pred.display()))?;
        let g = read_pgm(&gt).with_context(|| format!("reading {}", gt.display()))?;
        if p.dims() != g.dims() {
            bail!("{name}: prediction {:?} vs ground truth {:?}", p.dims(), g.dims());
        }
        let mut ids: Vec<u8> = p
            .as_slice()
            .iter()
            .chain(g.as_slice())
            .copied()
            .filter(|&l| l != BACKGROUND_ID && l != EMPTY_ID)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        let mut frame = BTreeMap::new();
        for id in ids {
            let v = iou(&p.map(|&l| if l == id { 1.0 } else { 0.0 }), &g.map(|&l| l == id), 0.5)?;
            frame.insert(id.to_string(), v);
            let e = per_id.entry(id).or_default();
            e.0 += v;
            e.1 += 1;
            sum += v;
            count += 1;
        }
        per_frame.push(json!({ "file": name, "iou": frame }));
    }
    let objects: BTreeMap<String, Value> = per_id
        .iter()
        .map(|(id, (s, n))| (id.to_string(), json!({ "frames": n, "iou": s / *n as f64 })))
        .collect();
    let report = json!({
        "frames": per_frame.len(),
        "threshold": 0.5,
        "pairs": count,
        "mean_iou": if count == 0 { 1.0 } else { sum / count as f64 },
        "objects": objects,
        "per_frame": per_frame,
    });
    inputs::report(a.out.as_deref(), &report)
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let spec = match (a.kind, a.pose) {
        (SceneKind::Rigid, Some(pose)) => {
            textured_surface(pose, Surface::fronto_parallel(2.0), a.points.unwrap_or(300))
        }
        (SceneKind::Rigid, None) => random_rigid_scene(&mut rng, a.points.unwrap_or(300)),
        (SceneKind::Object, None) => random_object_scene(&mut rng, a.points.unwrap_or(150)),
        (SceneKind::Object, Some(_)) => bail!("--pose only applies to rigid scenes"),
    };
    let scene = generate(spec, a.seed)?;
    let spec = &scene.spec;
    let k = spec.intrinsics;
    inputs::create_dir(&a.out)?;
    save_events(&a.out.join("events.txt"), &scene.events)?;
    let intrinsics = a.out.join("intrinsics.txt");
    std::fs::write(&intrinsics, k.to_text()).with_context(|| format!("writing {}", intrinsics.display()))?;

    let (w, h) = k.dims();
    let mask = Grid::from_fn(w, h, |x, y| match (scene.labels.get(x, y), scene.depth.get(x, y)) {
        (_, None) => EMPTY_ID,
        (Some(j), Some(_)) => spec.objects[*j].id,
        (None, Some(_)) => BACKGROUND_ID,
    });
    write_pfm(&a.out.join("depth.pfm"), &depth_to_pfm_grid(&scene.depth))?;
    write_pgm(&a.out.join("mask.pgm"), &mask)?;

    let mut object_velocities = BTreeMap::new();
    for o in &spec.objects {
        let m = mask.map(|&l| l == o.id);
        if let Some(v) = masked_velocity(&scene.depth, &m, &k, &spec.ego, &o.translation) {
            object_velocities.insert(o.id.to_string(), [v.x, v.y, v.z]);
        }
    }
    let manifest = GtManifest {
        schema: SCHEMA_VERSION,
        fps: 1.0 / (spec.t_end - spec.t_start),
        intrinsics: k,
        frames: vec![FrameEntry {
            index: 0,
            t: spec.t_ref,
            depth: PathBuf::from("depth.pfm"),
            mask: PathBuf::from("mask.pgm"),
            cam_velocity: spec.ego,
            object_velocities,
        }],
    };
    evmotion::io::manifest::write_json(&a.out.join("manifest.json"), &manifest)?;
    let truth = json!({
        "seed": a.seed,
        "events": scene.events.len(),
        "t_start": spec.t_start,
        "t_end": spec.t_end,
        "t_ref": spec.t_ref,
        "ego": spec.ego,
        "background": spec.background,
        "objects": spec.objects,
    });
    inputs::report(Some(&a.out.join("truth.json")), &truth)?;
    eprintln!("{} events written to {}", scene.events.len(), a.out.display());
    Ok(())
}
