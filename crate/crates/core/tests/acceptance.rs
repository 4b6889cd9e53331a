//! Acceptance suite. Runs without the libtest harness so that each
//! criterion prints exactly one PASS/FAIL line; the process exits non-zero
//! if any criterion fails.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use mvpose::active::{replay, run_active_loop, EstimatorConfig, Policy};
use mvpose::geom::{project, projection_jacobian, CameraIntrinsics, Pose, Rotation};
use mvpose::harness::{aggregate_csv, run_experiment, write_outputs, ExperimentConfig, ObjectSpec, TrajectoryEntry};
use mvpose::measure::{perturb, read_records, simulate_edge_map, write_records, NoiseProfile, Simulator};
use mvpose::metrics::{add, add_star, pose_passes, Thresholds};
use mvpose::orientation::{orientation_cost, orientation_residual, refine_rotation, residual_jacobian, MixtureMember, RefineOptions};
use mvpose::rng::{stream_rng, Stream};
use mvpose::scene::{
    generate_scene, look_at, synthetic_object, uniform_rotation, ObjectKind, ObjectModel, Scene, SceneObject,
    SyntheticParams, Viewpoint, ViewpointCatalog, WorkspaceBox,
};
use mvpose::template::{build_templates, measure_orientation, ray_rotation, MatchOptions};
use mvpose::translation::{initialize, refine_translation, estimate_translation, translation_cost, CenterObservation, SolverOptions};
use mvpose::uncertainty::edge_point_jacobians;
use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

// Pinned tolerances and sizes.
const JACOBIAN_CONFIGS: usize = 1000;
const JACOBIAN_REL_TOL: f64 = 1e-4;
const JACOBIAN_BUDGET: Duration = Duration::from_secs(10);

const GRID_SCENES: u64 = 50;
const GRID_VIEWS: usize = 8;
const GRID_STEP: f64 = 5e-4;
const GRID_HALF_WIDTH: f64 = 0.02;
const GRID_BUDGET: Duration = Duration::from_secs(120);

const LATTICE_CASES: u64 = 20;
const LATTICE_STEP_DEG: f64 = 0.25;
const LATTICE_HALF_WIDTH_DEG: f64 = 6.0;
const LATTICE_BUDGET: Duration = Duration::from_secs(300);

const NEES_TRIALS: u64 = 1000;
const NEES_RANGE: (f64, f64) = (2.6, 3.4);

const METRIC_PAIRS: usize = 10_000;

const MIXTURE_RUNS: u64 = 200;
const MIXTURE_VIEWS: usize = 8;
const MIXTURE_WEIGHT_RATE: f64 = 0.90;
const MIXTURE_DOMINANT_RATE: f64 = 0.95;

const ENTROPY_SEEDS: u64 = 100;
const ENTROPY_SLACK: f64 = 1e-9;

const NBV_SCENES: u64 = 1000;
const NBV_MARGIN_RANDOM: f64 = 1.0;
const NBV_SLACK_MAX_DISTANCE: f64 = 1.0;
const BOOTSTRAP_RESAMPLES: usize = 2000;
const NBV_BUDGET: Duration = Duration::from_secs(900);

const SCALE_TRIALS: u64 = 500;
const SCALE_AGREEMENT: f64 = 0.99;

struct Outcome {
    pass: bool,
    detail: String,
}

type Criterion = (&'static str, fn() -> Outcome);

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn box_model() -> ObjectModel {
    synthetic_object(&ObjectKind::Box { x: 0.04, y: 0.03, z: 0.02 }, &SyntheticParams::default()).unwrap()
}

fn bracket_model() -> ObjectModel {
    synthetic_object(
        &ObjectKind::AsymmetricBracket { width: 0.05, depth: 0.03, height: 0.04, thickness: 0.005 },
        &SyntheticParams::default(),
    )
    .unwrap()
}

fn lathe_model() -> ObjectModel {
    synthetic_object(
        &ObjectKind::Lathe { radius_bottom: 0.02, radius_top: 0.012, height: 0.04, order: 12 },
        &SyntheticParams::default(),
    )
    .unwrap()
}

fn catalog() -> ViewpointCatalog {
    ExperimentConfig::default().catalog.build().unwrap()
}

fn scene(model: ObjectModel, seed: u64) -> Scene {
    generate_scene(&[model], &catalog(), 1, seed, &WorkspaceBox::default()).unwrap()
}

fn random_camera<R: Rng>(rng: &mut R, target: &Vector3<f64>) -> Pose {
    let polar: f64 = rng.random_range(0.1..1.3);
    let az = rng.random_range(0.0..2.0 * PI);
    let r: f64 = rng.random_range(0.4..0.9);
    let eye = target + r * Vector3::new(polar.sin() * az.cos(), polar.sin() * az.sin(), polar.cos());
    Pose::new(look_at(&eye, target), eye)
}

fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / a.norm().max(1e-12)
}

fn jacobians() -> Outcome {
    let start = Instant::now();
    let intr = CameraIntrinsics::default();
    let model = bracket_model();
    let mut rng = stream_rng(101, 0, 0, Stream::Scene);
    let (mut worst_proj, mut worst_rot, mut worst_edge) = (0f64, 0f64, 0f64);
    let h = 1e-6;
    for _ in 0..JACOBIAN_CONFIGS {
        let t_wo = Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(0.0..0.04));
        let cam = random_camera(&mut rng, &t_wo);

        // Center projection with respect to t_wo.
        let j = projection_jacobian(&t_wo, &cam, &intr).unwrap();
        let mut fd = DMatrix::zeros(2, 3);
        for k in 0..3 {
            let mut e = Vector3::zeros();
            e[k] = h;
            let p = |t: Vector3<f64>| project(&cam.inverse_transform_point(&t), &intr).unwrap();
            let d = (p(t_wo + e) - p(t_wo - e)) / (2.0 * h);
            fd[(0, k)] = d.x;
            fd[(1, k)] = d.y;
        }
        let ja = DMatrix::from_iterator(2, 3, j.iter().cloned());
        worst_proj = worst_proj.max(rel_err(&ja, &fd));

        // Orientation residual with respect to a left perturbation of R_wo.
        let r_wo = uniform_rotation(&mut rng);
        let r_wc = cam.rotation;
        let offset = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let member = MixtureMember {
            view_id: 0,
            r_wc,
            r_co: r_wc.inverse() * Rotation::exp(&offset) * r_wo,
            confidence: 1.0,
            historical: false,
        };
        let jr = residual_jacobian(&r_wo, &member);
        let mut fd = DMatrix::zeros(3, 3);
        for k in 0..3 {
            let mut e = Vector3::zeros();
            e[k] = h;
            let plus = orientation_residual(&(Rotation::exp(&e) * r_wo), &member);
            let minus = orientation_residual(&(Rotation::exp(&-e) * r_wo), &member);
            fd.set_column(k, &((plus - minus) / (2.0 * h)));
        }
        let ja = DMatrix::from_iterator(3, 3, jr.iter().cloned());
        worst_rot = worst_rot.max(rel_err(&ja, &fd));

        // Edge-point projections with respect to a left perturbation of R_wo.
        let jacs = edge_point_jacobians(&r_wo, &t_wo, &model, &cam, &intr);
        let pick = &jacs[rng.random_range(0..jacs.len())];
        let x = model.edge_points[pick.point];
        let pix = |r: Rotation| project(&cam.inverse_transform_point(&(r * x + t_wo)), &intr).unwrap();
        let mut fd = DMatrix::zeros(2, 3);
        for k in 0..3 {
            let mut e = Vector3::zeros();
            e[k] = h;
            let d: Vector2<f64> = (pix(Rotation::exp(&e) * r_wo) - pix(Rotation::exp(&-e) * r_wo)) / (2.0 * h);
            fd[(0, k)] = d.x;
            fd[(1, k)] = d.y;
        }
        let ja = DMatrix::from_iterator(2, 3, pick.jacobian.iter().cloned());
        worst_edge = worst_edge.max(rel_err(&ja, &fd));
    }
    let elapsed = start.elapsed();
    let pass = worst_proj < JACOBIAN_REL_TOL
        && worst_rot < JACOBIAN_REL_TOL
        && worst_edge < JACOBIAN_REL_TOL
        && elapsed < JACOBIAN_BUDGET;
    outcome(
        pass,
        format!(
            "{JACOBIAN_CONFIGS} configs, max rel err projection {worst_proj:.1e} / rotation {worst_rot:.1e} / edge {worst_edge:.1e} (tol {JACOBIAN_REL_TOL:.0e}), {:.2} s (limit {} s)",
            elapsed.as_secs_f64(),
            JACOBIAN_BUDGET.as_secs()
        ),
    )
}

fn pick_views(scene: &Scene, seed: u64, n: usize) -> Vec<Viewpoint> {
    let obj = &scene.objects[0];
    let mut views: Vec<Viewpoint> = scene
        .catalog
        .views()
        .iter()
        .filter(|v| mvpose::scene::center_visible(&obj.pose.translation, v))
        .cloned()
        .collect();
    views.shuffle(&mut stream_rng(seed, 0, 0, Stream::Policy));
    views.truncate(n);
    views
}

fn observations(scene: &Scene, profile: &NoiseProfile, seed: u64, n: usize) -> Vec<CenterObservation> {
    let sim = Simulator::new(scene, profile.clone(), seed).unwrap();
    pick_views(scene, seed, n)
        .iter()
        .map(|v| CenterObservation::new(&sim.center(0, v.id).unwrap(), v.pose, v.intrinsics))
        .collect()
}

fn translation_grid() -> Outcome {
    let start = Instant::now();
    let profile = NoiseProfile { center_sigma: 2.0, ..NoiseProfile::default() };
    let n = (2.0 * GRID_HALF_WIDTH / GRID_STEP).round() as i64;
    let results: Vec<(f64, bool)> = (0..GRID_SCENES)
        .into_par_iter()
        .map(|seed| {
            let s = scene(box_model(), seed);
            let gt = s.objects[0].pose.translation;
            let obs = observations(&s, &profile, seed, GRID_VIEWS);
            let est = refine_translation(&obs, &initialize(&obs).unwrap(), &SolverOptions::default()).unwrap();
            let mut best = (f64::INFINITY, Vector3::zeros(), (0, 0, 0));
            for i in 0..=n {
                for j in 0..=n {
                    for k in 0..=n {
                        let t = gt
                            + Vector3::new(i as f64, j as f64, k as f64) * GRID_STEP
                            - Vector3::repeat(GRID_HALF_WIDTH);
                        let c = translation_cost(&obs, &t);
                        if c < best.0 {
                            best = (c, t, (i, j, k));
                        }
                    }
                }
            }
            let (i, j, k) = best.2;
            let interior = [i, j, k].iter().all(|&v| v > 0 && v < n);
            ((est.t_wo - best.1).amax(), interior)
        })
        .collect();
    let worst = results.iter().map(|r| r.0).fold(0.0, f64::max);
    let interior = results.iter().all(|r| r.1);
    let elapsed = start.elapsed();
    let pass = worst <= GRID_STEP + 1e-12 && interior && elapsed < GRID_BUDGET;
    outcome(
        pass,
        format!(
            "{GRID_SCENES} scenes x {GRID_VIEWS} views, max |GN - grid| {:.3} mm (cell {:.1} mm), minima interior: {interior}, {:.1} s (limit {} s)",
            worst * 1e3,
            GRID_STEP * 1e3,
            elapsed.as_secs_f64(),
            GRID_BUDGET.as_secs()
        ),
    )
}

fn orientation_lattice() -> Outcome {
    let start = Instant::now();
    let step = LATTICE_STEP_DEG.to_radians();
    let n = (2.0 * LATTICE_HALF_WIDTH_DEG / LATTICE_STEP_DEG).round() as i64;
    let results: Vec<(f64, bool)> = (0..LATTICE_CASES)
        .into_par_iter()
        .map(|case| {
            let mut rng = stream_rng(case, 0, 0, Stream::Orientation);
            let r_gt = uniform_rotation(&mut rng);
            let members: Vec<MixtureMember> = (0..5)
                .map(|v| {
                    let r_wc = uniform_rotation(&mut rng);
                    MixtureMember {
                        view_id: v,
                        r_wc,
                        r_co: perturb(&(r_wc.inverse() * r_gt), 3f64.to_radians(), &mut rng),
                        confidence: rng.random_range(0.5..1.0),
                        historical: false,
                    }
                })
                .collect();
            let est = refine_rotation(&members, &members[0].implied_r_wo(), &RefineOptions::default()).unwrap();
            let mut best = (f64::INFINITY, Vector3::zeros(), (0, 0, 0));
            for i in 0..=n {
                for j in 0..=n {
                    for k in 0..=n {
                        let d = Vector3::new(i as f64, j as f64, k as f64) * step
                            - Vector3::repeat(LATTICE_HALF_WIDTH_DEG.to_radians());
                        let c = orientation_cost(&(Rotation::exp(&d) * r_gt), &members);
                        if c < best.0 {
                            best = (c, d, (i, j, k));
                        }
                    }
                }
            }
            let d_est = (est.r_wo * r_gt.inverse()).log();
            let (i, j, k) = best.2;
            let interior = [i, j, k].iter().all(|&v| v > 0 && v < n);
            ((d_est - best.1).amax(), interior)
        })
        .collect();
    let worst = results.iter().map(|r| r.0).fold(0.0, f64::max);
    let interior = results.iter().all(|r| r.1);
    let elapsed = start.elapsed();
    let pass = worst <= step + 1e-12 && interior && elapsed < LATTICE_BUDGET;
    outcome(
        pass,
        format!(
            "{LATTICE_CASES} cases, max |GN - lattice| {:.3} deg (cell {LATTICE_STEP_DEG} deg), minima interior: {interior}, {:.1} s (limit {} s)",
            worst.to_degrees(),
            elapsed.as_secs_f64(),
            LATTICE_BUDGET.as_secs()
        ),
    )
}

fn nees() -> Outcome {
    let profile = NoiseProfile { center_sigma: 1.5, ..NoiseProfile::default() };
    let values: Vec<f64> = (0..NEES_TRIALS)
        .into_par_iter()
        .map(|seed| {
            let s = scene(box_model(), 10_000 + seed);
            let obs = observations(&s, &profile, seed, 6);
            let est = estimate_translation(&obs, None, &SolverOptions::default()).unwrap();
            let e = est.t_wo - s.objects[0].pose.translation;
            (e.transpose() * est.cov.try_inverse().unwrap() * e)[(0, 0)]
        })
        .collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    outcome(
        (NEES_RANGE.0..=NEES_RANGE.1).contains(&mean),
        format!("{NEES_TRIALS} trials, mean NEES {mean:.3} (accept [{}, {}])", NEES_RANGE.0, NEES_RANGE.1),
    )
}

fn trace_angle(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    (((a.transpose() * b).trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

fn metric_invariants() -> Outcome {
    let models = [box_model(), lathe_model(), bracket_model()];
    let th = Thresholds::default();
    let mut rng = stream_rng(55, 0, 0, Stream::Scene);
    let mut zero_fail = 0;
    let mut bound_fail = 0;
    let mut rule_fail = 0;
    for i in 0..METRIC_PAIRS {
        let m = &models[i % models.len()];
        let gt = Pose::new(uniform_rotation(&mut rng), Vector3::new(rng.random_range(-0.05..0.05), 0.0, 0.01));
        for s in m.symmetry.elements() {
            if add_star(&Pose::new(gt.rotation * *s, gt.translation), &gt, m) > 1e-12 {
                zero_fail += 1;
            }
        }
        let far = Pose::new(uniform_rotation(&mut rng), gt.translation + Vector3::new(0.002, -0.001, 0.003));
        if add_star(&far, &gt, m) > add(&far, &gt, m) {
            bound_fail += 1;
        }
        // Near a random symmetry-adjusted pose, straddling both tolerances.
        let k = rng.random_range(0..m.symmetry.order());
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let angle = rng.random_range(0.0..15f64.to_radians());
        let dir = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let est = Pose::new(
            Rotation::about_axis(&axis, angle) * gt.rotation * m.symmetry.elements()[k],
            gt.translation + dir.normalize() * rng.random_range(0.0..0.008),
        );
        let trans_ok = (est.translation - gt.translation).norm() < th.translation;
        let oracle = trans_ok
            && m.symmetry.elements().iter().any(|s| {
                trace_angle(est.rotation.matrix(), &(gt.rotation.matrix() * s.matrix())) < th.rotation
            });
        if pose_passes(&est, &gt, m, &th).five_ten_pass != oracle {
            rule_fail += 1;
        }
    }
    outcome(
        zero_fail == 0 && bound_fail == 0 && rule_fail == 0,
        format!(
            "{METRIC_PAIRS} pose pairs over box/lathe/bracket: nonzero symmetric ADD* {zero_fail}, ADD* > ADD {bound_fail}, (5,10) disagreements {rule_fail}"
        ),
    )
}

fn mixture_behavior() -> Outcome {
    let profile = NoiseProfile { ambiguity_rate: 0.3, ..NoiseProfile::default() };
    let config = EstimatorConfig::default();
    let results: Vec<(bool, bool)> = (0..MIXTURE_RUNS)
        .into_par_iter()
        .map(|seed| {
            let model = box_model();
            let s = scene(model.clone(), 20_000 + seed);
            let gt = s.objects[0].pose.rotation;
            let t = run_active_loop(&s, 0, Policy::MaxDistance, MIXTURE_VIEWS, &config, &profile, seed, None).unwrap();
            let mix = &t.steps.last().unwrap().mixture;
            let dist = |rv: &[f64; 3]| {
                let r = Rotation::exp(&Vector3::from(*rv));
                model.symmetry.elements().iter().map(|e| r.angle_to(&(gt * *e))).fold(f64::INFINITY, f64::min)
            };
            let Some((gi, g)) = mix
                .iter()
                .enumerate()
                .filter(|(_, c)| dist(&c.rotvec) < config.gate)
                .min_by(|a, b| dist(&a.1.rotvec).total_cmp(&dist(&b.1.rotvec)))
            else {
                return (false, false);
            };
            let dominant = mix.iter().enumerate().all(|(i, c)| i == gi || c.weight < g.weight);
            (g.weight > 0.5, dominant)
        })
        .collect();
    let n = results.len() as f64;
    let heavy = results.iter().filter(|r| r.0).count() as f64 / n;
    let dominant = results.iter().filter(|r| r.1).count() as f64 / n;
    outcome(
        heavy >= MIXTURE_WEIGHT_RATE && dominant >= MIXTURE_DOMINANT_RATE,
        format!(
            "{MIXTURE_RUNS} runs, {MIXTURE_VIEWS} views, ambiguity 0.3: GT weight > 0.5 in {:.1}% (need {:.0}%), GT dominant in {:.1}% (need {:.0}%)",
            100.0 * heavy,
            100.0 * MIXTURE_WEIGHT_RATE,
            100.0 * dominant,
            100.0 * MIXTURE_DOMINANT_RATE
        ),
    )
}

fn entropy_monotonicity() -> Outcome {
    let cfg = ExperimentConfig { seeds: (0..ENTROPY_SEEDS).collect(), views: 8, ..ExperimentConfig::default() };
    let run = run_experiment(&cfg).unwrap();
    let mut checked = 0;
    let mut violations = 0;
    let mut worst = f64::NEG_INFINITY;
    for e in &run.entries {
        let hs: Vec<Option<f64>> = e.trajectory.steps.iter().map(|s| s.entropy.as_ref().map(|h| h.h_t)).collect();
        for w in hs.windows(2) {
            if let (Some(a), Some(b)) = (w[0], w[1]) {
                checked += 1;
                worst = worst.max(b - a);
                if b > a + ENTROPY_SLACK {
                    violations += 1;
                }
            }
        }
    }
    outcome(
        violations == 0 && checked > 0,
        format!(
            "{} trajectories, {checked} added views, {violations} increases beyond {ENTROPY_SLACK:.0e} (largest change {worst:.3e})",
            run.entries.len()
        ),
    )
}

fn moderate_noise() -> NoiseProfile {
    NoiseProfile { center_sigma: 4.0, orient_sigma: 0.12, ambiguity_rate: 0.3, ..NoiseProfile::default() }
}

fn passes_at(entries: &[TrajectoryEntry], policy: Policy, views: usize) -> Vec<f64> {
    entries
        .iter()
        .filter(|e| e.trajectory.policy == policy)
        .map(|e| e.trajectory.steps.iter().find(|s| s.views == views).is_some_and(|s| s.add_pass) as u8 as f64)
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// 95% percentile interval of the mean paired difference, in percentage points.
fn paired_bootstrap(a: &[f64], b: &[f64], seed: u64) -> (f64, f64) {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mut rng = stream_rng(seed, 0, 0, Stream::Bootstrap);
    let mut means: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
        .map(|_| (0..d.len()).map(|_| d[rng.random_range(0..d.len())]).sum::<f64>() / d.len() as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let lo = means[(0.025 * BOOTSTRAP_RESAMPLES as f64) as usize];
    let hi = means[(0.975 * BOOTSTRAP_RESAMPLES as f64) as usize - 1];
    (100.0 * lo, 100.0 * hi)
}

fn nbv_dominance() -> Outcome {
    let start = Instant::now();
    let cfg = ExperimentConfig {
        seeds: (0..NBV_SCENES).collect(),
        views: 6,
        noise: moderate_noise(),
        write_measurements: false,
        ..ExperimentConfig::default()
    };
    let run = run_experiment(&cfg).unwrap();
    let rate = |p, v| 100.0 * mean(&passes_at(&run.entries, p, v));
    let (r4, m4, n4) = (rate(Policy::Random, 4), rate(Policy::MaxDistance, 4), rate(Policy::Nbv, 4));
    let nbv6 = passes_at(&run.entries, Policy::Nbv, 6);
    let ci_r = paired_bootstrap(&nbv6, &passes_at(&run.entries, Policy::Random, 6), 1);
    let ci_m = paired_bootstrap(&nbv6, &passes_at(&run.entries, Policy::MaxDistance, 6), 2);
    let elapsed = start.elapsed();
    let four = n4 >= r4 + NBV_MARGIN_RANDOM && n4 >= m4 - NBV_SLACK_MAX_DISTANCE;
    let six = ci_r.1 >= 0.0 && ci_m.1 >= 0.0;
    outcome(
        four && six && elapsed < NBV_BUDGET,
        format!(
            "{NBV_SCENES} scenes, ADD* at 4 views: nbv {n4:.1} random {r4:.1} max_distance {m4:.1}; 6-view paired 95% CI nbv-random [{:.1}, {:.1}] nbv-max_distance [{:.1}, {:.1}] pp; {:.0} s (limit {} s)",
            ci_r.0,
            ci_r.1,
            ci_m.0,
            ci_m.1,
            elapsed.as_secs_f64(),
            NBV_BUDGET.as_secs()
        ),
    )
}

fn canonical_scale() -> Outcome {
    let model = bracket_model();
    let intr = CameraIntrinsics::default();
    let set = build_templates(&model, 300, 36, intr.fx, intr.fy).unwrap();
    let view = Viewpoint { id: 0, pose: Pose::identity(), intrinsics: intr };
    let z_r = model.canonical_distance;
    let noiseless = NoiseProfile::noiseless();
    // `on_grid`: the object orientation is a bank orientation seen along the
    // ray, so the z_r match is unambiguous. Otherwise it is uniform random.
    let agreement = |on_grid: bool| {
        let same: Vec<bool> = (0..SCALE_TRIALS)
            .into_par_iter()
            .map(|trial| {
                let mut rng = stream_rng(trial, 0, 0, Stream::Scene);
                let lateral = Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.04..0.04), 0.0);
                let near = Vector3::new(lateral.x, lateral.y, z_r);
                let r_co = if on_grid {
                    ray_rotation(&near) * set.templates[rng.random_range(0..set.len())].rotation
                } else {
                    uniform_rotation(&mut rng)
                };
                let result = |t_co: Vector3<f64>| {
                    let obj = SceneObject { id: 0, model: 0, pose: Pose::new(r_co, t_co) };
                    let mut rng = stream_rng(trial, 0, 0, Stream::EdgeMap);
                    let map = simulate_edge_map(&obj, &model, &view, &noiseless, &mut rng).unwrap();
                    measure_orientation(&map, &t_co, &intr, &set, &MatchOptions::default()).map(|m| m.template_index)
                };
                matches!((result(near), result(2.0 * near)), (Ok(a), Ok(b)) if a == b)
            })
            .collect();
        same.iter().filter(|s| **s).count() as f64 / same.len() as f64
    };
    let rate = agreement(true);
    let off_grid = agreement(false);
    outcome(
        rate >= SCALE_AGREEMENT,
        format!(
            "{SCALE_TRIALS} trials, identical template at z_r and 2 z_r in {:.1}% (need {:.0}%); off-grid orientations (informational) {:.1}%",
            100.0 * rate,
            100.0 * SCALE_AGREEMENT,
            100.0 * off_grid
        ),
    )
}

fn determinism_and_replay() -> Outcome {
    let cfg = ExperimentConfig {
        objects: vec![ObjectSpec::Box { x: 0.04, y: 0.03, z: 0.02 }, ObjectSpec::Lathe {
            radius_bottom: 0.02,
            radius_top: 0.012,
            height: 0.04,
            order: 12,
        }],
        objects_per_scene: 2,
        seeds: (0..6).collect(),
        views: 6,
        ..ExperimentConfig::default()
    };
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    write_outputs(&a, dir_a.path()).unwrap();
    write_outputs(&b, dir_b.path()).unwrap();
    let csv_a = std::fs::read(dir_a.path().join("aggregate.csv")).unwrap();
    let csv_b = std::fs::read(dir_b.path().join("aggregate.csv")).unwrap();
    let identical = csv_a == csv_b && aggregate_csv(&cfg.name, &a.entries).unwrap().as_bytes() == csv_a.as_slice();

    let models: Vec<ObjectModel> = cfg.objects.iter().map(|o| o.build(&cfg.synthetic).unwrap()).collect();
    let cat = cfg.catalog.build().unwrap();
    let mut compared = 0;
    let mut mismatched = 0;
    for e in &a.entries {
        let s = generate_scene(&models, &cat, cfg.objects_per_scene, e.seed, &cfg.workspace).unwrap();
        let model = s.model_of(s.object(e.object_id).unwrap());
        let mut buf = Vec::new();
        write_records(&mut buf, &e.trajectory.measurements).unwrap();
        let stream = read_records(buf.as_slice()).unwrap();
        let replayed = replay(&cat, model, e.object_id, &stream, &cfg.estimator, None).unwrap();
        for (step, (t, r)) in e.trajectory.steps.iter().zip(&replayed) {
            compared += 1;
            let bits = |v: &Option<[f64; 3]>| v.map(|a| a.map(f64::to_bits));
            if bits(&step.t_wo) != bits(t) || bits(&step.r_wo) != bits(r) {
                mismatched += 1;
            }
        }
        if replayed.len() != e.trajectory.steps.len() {
            mismatched += 1;
        }
    }
    outcome(
        identical && mismatched == 0 && compared > 0,
        format!(
            "aggregate CSV byte-identical: {identical} ({} bytes); {compared} replayed estimates, {mismatched} bitwise mismatches",
            csv_a.len()
        ),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("jacobians vs central differences", jacobians),
        ("translation vs grid search", translation_grid),
        ("orientation vs axis-angle lattice", orientation_lattice),
        ("translation NEES calibration", nees),
        ("symmetry-aware metric invariants", metric_invariants),
        ("mixture weight under ambiguity", mixture_behavior),
        ("translation entropy monotonicity", entropy_monotonicity),
        ("nbv dominance", nbv_dominance),
        ("canonical-scale invariance", canonical_scale),
        ("determinism and replay", determinism_and_replay),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let o = run();
        println!("[{}] {:>2}. {name}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
        failed += !o.pass as usize;
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
