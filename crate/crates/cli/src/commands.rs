use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use anyhow::{anyhow, Context};
use csrom::daereduce::{build_dae, orthogonality_violation, DaeOptions, ReducedModel, ReducedState};
use csrom::diffops::{columns_to_matrix, directional_derivative};
use csrom::elastic::ElasticModel;
use csrom::neucubature::{
    greedy_cubature_with, masked, train_alternating, CubatureModel, CubatureTrainSet, NeuralRule,
};
use csrom::posegen::{generate_poses, pca_basis, PoseSet};
use csrom::rdsim::{
    write_frame_obj, write_frame_record, CubatureRule, FrameRecord, Integration, LinearReduction, Quadrature,
    SimConfig, Simulator,
};
use csrom::{par, MultiComplex};
use log::{info, warn};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::RunConfig;

/// Why a command stopped early. Input errors map to exit code 2.
#[derive(Debug)]
pub enum Failure {
    Input(anyhow::Error),
    Run(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Run(e)
    }
}

impl From<csrom::Error> for Failure {
    fn from(e: csrom::Error) -> Self {
        Failure::Run(e.into())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(e.into())
    }
}

trait InputContext<T> {
    fn input(self, what: &str) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> InputContext<T> for Result<T, E> {
    fn input(self, what: &str) -> Result<T, Failure> {
        self.map_err(|e| Failure::Input(e.into().context(what.to_string())))
    }
}

/// `Ok(false)` means the command ran but a check failed.
pub type Outcome = Result<bool, Failure>;

fn write_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    let f = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(f, value)?;
    Ok(())
}

fn load_poses(cfg: &RunConfig) -> Result<PoseSet, Failure> {
    let path = cfg.poses_path();
    PoseSet::load(&path)
        .map(|(ps, _)| ps)
        .input(&format!("loading poses from {} (run gen-data first)", path.display()))
}

fn load_rom(cfg: &RunConfig, model: &ElasticModel) -> Result<ReducedModel, Failure> {
    let dir = cfg.rom_dir();
    let rm = ReducedModel::load(&dir).input(&format!(
        "loading reduced model from {} (run train-dae first)",
        dir.display()
    ))?;
    if rm.dofs() != model.dofs() {
        return Err(Failure::Input(anyhow!(
            "reduced model has {} DOFs but the mesh has {}",
            rm.dofs(),
            model.dofs()
        )));
    }
    Ok(rm)
}

fn load_cubature(cfg: &RunConfig, model: &ElasticModel) -> Result<CubatureModel, Failure> {
    let dir = cfg.cubature_dir();
    let cm = CubatureModel::load(&dir).input(&format!(
        "loading cubature model from {} (run train-cubature first)",
        dir.display()
    ))?;
    if cm.num_elements() != model.num_elements() {
        return Err(Failure::Input(anyhow!(
            "cubature model covers {} elements but the mesh has {}",
            cm.num_elements(),
            model.num_elements()
        )));
    }
    Ok(cm)
}

pub fn gen_data(cfg: &RunConfig) -> Outcome {
    let model = cfg.model().input("building the mesh")?;
    std::fs::create_dir_all(&cfg.out)?;
    let ps = generate_poses(&model, &cfg.script)?;
    ps.save(&cfg.poses_path(), Some(&cfg.script))?;
    std::fs::write(cfg.out.join("mesh.txt"), model.mesh.to_text())?;
    let expected = cfg.script.episodes * cfg.script.steps_per_episode + 1;
    if ps.len() < expected {
        warn!("{} poses lost to diverging episodes", expected - ps.len());
    }
    println!(
        "gen-data: {} poses of {} DOFs -> {}",
        ps.len(),
        ps.dofs(),
        cfg.poses_path().display()
    );
    Ok(true)
}

pub fn train_dae(cfg: &RunConfig) -> Outcome {
    let model = cfg.model().input("building the mesh")?;
    let ps = load_poses(cfg)?;
    if ps.dofs() != model.dofs() {
        return Err(Failure::Input(anyhow!(
            "poses have {} DOFs but the mesh has {}",
            ps.dofs(),
            model.dofs()
        )));
    }
    let subset = cfg.pca_subset.unwrap_or((ps.len() / 2).max(cfg.n_p));
    let (basis, _) = pca_basis(&ps, cfg.n_p, subset).input("PCA settings")?;
    let opts = DaeOptions {
        fixed_dofs: Some(model.fixed_dofs().to_vec()),
        ..DaeOptions::default()
    };
    let (rm, report) = build_dae(&ps, &basis, &cfg.arch, &cfg.train, &opts)?;
    rm.save(&cfg.rom_dir())?;

    let mut csv = BufWriter::new(File::create(cfg.out.join("dae_loss.csv"))?);
    writeln!(csv, "epoch,loss")?;
    for (e, l) in report.losses.iter().enumerate() {
        writeln!(csv, "{e},{l:e}")?;
    }
    csv.flush()?;

    let qs = (0..ps.len())
        .map(|t| rm.encode(&ps.pose(t)).map(|(_, q)| q))
        .collect::<csrom::Result<Vec<_>>>()?;
    let recon = rm.reconstruction_error(&ps.poses)?;
    let ortho = orthogonality_violation(&rm, &qs)?;
    let trend = loss_trend(&report.losses);
    write_json(
        &cfg.out.join("dae_report.json"),
        &json!({
            "final_loss": report.losses.last(),
            "reconstruction_error": recon,
            "orthogonality_violation": ortho,
            "loss_decreasing": trend,
        }),
    )?;
    if !trend {
        warn!("training loss did not trend down");
    }
    println!(
        "train-dae: n_p {} n_q {} depth {}, relative reconstruction error {recon:.3e} -> {}",
        rm.n_p(),
        rm.n_q(),
        cfg.arch.depth,
        cfg.rom_dir().display()
    );
    Ok(true)
}

/// Mean of the last tenth of the curve below the mean of the first tenth.
fn loss_trend(losses: &[f64]) -> bool {
    if losses.len() < 2 {
        return true;
    }
    let k = (losses.len() / 10).max(1);
    let head = losses[..k].iter().sum::<f64>() / k as f64;
    let tail = losses[losses.len() - k..].iter().sum::<f64>() / k as f64;
    tail <= head
}

pub fn train_cubature(cfg: &RunConfig) -> Outcome {
    let model = cfg.model().input("building the mesh")?;
    let ps = load_poses(cfg)?;
    let rm = load_rom(cfg, &model)?;
    let all = CubatureTrainSet::from_poses(&rm, &model, &ps.poses)?;
    let (train, held) = all.split(cfg.held_out, cfg.cubature.seed);
    let held = if held.is_empty() { train.clone() } else { held };
    info!("cubature samples: {} train, {} held out", train.len(), held.len());

    let mut csv = BufWriter::new(File::create(cfg.out.join("cubature_loss.csv"))?);
    writeln!(csv, "round,size,loss_w,loss_s,held_error")?;
    let mut rows = Vec::new();
    let (cm, _) = train_alternating(&model, &train, &cfg.cubature, |cm, rep| {
        let err = held.relative_error(|s| cm.masked_weights(&s.u)).unwrap_or(f64::NAN);
        rows.push((rep.size, rep.loss_w, rep.loss_s, err));
    })?;
    for (i, (size, lw, ls, err)) in rows.iter().enumerate() {
        let ls = ls.map(|v| format!("{v:e}")).unwrap_or_default();
        writeln!(csv, "{i},{size},{lw:e},{ls},{err:e}")?;
    }
    csv.flush()?;
    cm.save(&cfg.cubature_dir())?;
    let last = rows.last().map(|r| r.3).unwrap_or(f64::NAN);
    write_json(
        &cfg.out.join("cubature_report.json"),
        &json!({ "elements": cm.elements, "held_out_error": last, "rounds": rows.len() }),
    )?;
    println!(
        "train-cubature: {} of {} elements, held-out relative force error {:.2}% -> {}",
        cm.elements.len(),
        model.num_elements(),
        100.0 * last,
        cfg.cubature_dir().display()
    );
    Ok(true)
}

pub fn simulate(cfg: &RunConfig) -> Outcome {
    let model = cfg.model().input("building the mesh")?;
    let rm = load_rom(cfg, &model)?;
    let cm = match cfg.sim.integration {
        Integration::Cubature => Some(load_cubature(cfg, &model)?),
        Integration::ExactSum => None,
    };
    let rule = cm.as_ref().map(|cm| NeuralRule { cm, rm: &rm });
    let sim = Simulator::new(&rm, &model, cfg.sim).input("simulation settings")?;
    let f_ext = model.gravity(cfg.gravity);
    let mut state = ReducedState::rest(rm.dim(), cfg.sim.dt);
    if let Some(v) = &cfg.initial_rdot {
        if v.len() != rm.dim() {
            return Err(Failure::Input(anyhow!(
                "initial_rdot has {} entries, expected {}",
                v.len(),
                rm.dim()
            )));
        }
        state.rdot = v.clone();
    }

    let frames = cfg.out.join("frames");
    std::fs::create_dir_all(&frames)?;
    let mut log = BufWriter::new(File::create(cfg.out.join("frames.jsonl"))?);
    let (mut iters, mut residuals, mut full) = (Vec::new(), Vec::new(), Vec::new());
    let start = Instant::now();
    for step in 1..=cfg.steps {
        let quad = match &rule {
            Some(r) => r.quadrature(&state.r)?,
            None => Quadrature::Exact,
        };
        let out = match sim.step_with(&state, &f_ext, &quad) {
            Ok(o) => o,
            Err(e) => {
                write_json(
                    &cfg.out.join("divergence.json"),
                    &json!({ "step": step, "error": e.to_string(), "r": state.r, "rdot": state.rdot }),
                )?;
                return Err(Failure::Run(
                    anyhow!(e).context(format!("step {step} failed; state dumped")),
                ));
            }
        };
        full.push(sim.full_residual_norm(&out.state.r, &state, &f_ext, &quad)?);
        iters.push(out.iterations);
        residuals.push(out.residual);
        state = out.state;
        write_frame_record(
            &mut log,
            &FrameRecord {
                t: step as f64 * cfg.sim.dt,
                r: state.r.clone(),
                residual: out.residual,
                newton_iters: out.iterations,
            },
        )?;
        if cfg.obj_every > 0 && step % cfg.obj_every == 0 {
            let u = rm.full_displacement(&state.r)?;
            write_frame_obj(&frames.join(format!("frame_{step:05}.obj")), &model, &u)?;
        }
    }
    log.flush()?;
    let secs = start.elapsed().as_secs_f64();
    let mean_iters = iters.iter().sum::<usize>() as f64 / iters.len() as f64;
    write_json(
        &cfg.out.join("metrics.json"),
        &json!({
            "steps": cfg.steps,
            "dt": cfg.sim.dt,
            "drop_fict": cfg.sim.drop_fict,
            "integration": cfg.sim.integration,
            "newton_iters": iters,
            "residual": residuals,
            "full_residual": full,
            "seconds": secs,
        }),
    )?;
    println!(
        "simulate: {} steps in {secs:.2} s ({:.1} steps/s), mean {mean_iters:.1} Newton iterations, max full residual {:.2e}",
        cfg.steps,
        cfg.steps as f64 / secs,
        full.iter().cloned().fold(0.0, f64::max)
    );
    Ok(true)
}

struct Check {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

/// Contractions against directional derivatives of `w·D(q)` along unit and
/// random directions.
fn check_contractions(rm: &ReducedModel, q: &[f64], rng: &mut ChaCha8Rng) -> csrom::Result<f64> {
    let (n, n_q) = (rm.dofs(), rm.n_q());
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let v: Vec<f64> = (0..n_q).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let eps = rm.diff.eps;
    let proj = |z: &[MultiComplex]| match rm.decoder.forward(z) {
        Ok(d) => d
            .iter()
            .zip(&w)
            .fold(MultiComplex::real(0.0), |acc, (x, &c)| acc + x.scale(c)),
        Err(_) => MultiComplex::real(f64::NAN),
    };
    let dot = |col: &[f64]| col.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
    let differ = rm.differ();
    let hv = columns_to_matrix(&differ.hv(q, &v)?);
    let svv = columns_to_matrix(&differ.svv(q, &v)?);
    let vhp = columns_to_matrix(&differ.vhp(q, &w)?);
    let hvv = differ.hvv(q, &v)?;
    let mut got = vec![dot(&hvv)];
    let mut want = vec![directional_derivative(proj, q, &[&v, &v], eps)?];
    for j in 0..n_q {
        let mut e = vec![0.0; n_q];
        e[j] = 1.0;
        got.push(dot(hv.column(j).as_slice()));
        want.push(directional_derivative(proj, q, &[&e, &v], eps)?);
        got.push(dot(svv.column(j).as_slice()));
        want.push(directional_derivative(proj, q, &[&e, &v, &v], eps)?);
        for k in 0..n_q {
            let mut f = vec![0.0; n_q];
            f[k] = 1.0;
            got.push(vhp[(j, k)]);
            want.push(directional_derivative(proj, q, &[&e, &f], eps)?);
        }
    }
    let scale = want.iter().map(|x| x.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    Ok(got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale)
}

fn linear_equivalence(
    rm: &ReducedModel,
    model: &ElasticModel,
    rng: &mut ChaCha8Rng,
    f_ext: &[f64],
    dt: f64,
) -> csrom::Result<f64> {
    let n = rm.dofs();
    let basis = rm.basis.clone();
    let free = model.free_mask();
    let raw = DMatrix::from_fn(n, 2, |i, _| if free[i] { rng.gen_range(-1.0..1.0) } else { 0.0 });
    let raw = &raw - &basis * (basis.transpose() * &raw);
    let a = raw.qr().q() * 0.05;
    let lin = ReducedModel::linear(basis.clone(), a.clone())?;
    let sim = Simulator::new(
        &lin,
        model,
        SimConfig {
            dt,
            newton_tol: 1e-12,
            ..SimConfig::default()
        },
    )?;
    let mut b = DMatrix::zeros(n, lin.dim());
    b.columns_mut(0, lin.n_p()).copy_from(&basis);
    b.columns_mut(lin.n_p(), lin.n_q()).copy_from(&a);
    let classic = LinearReduction {
        basis: b,
        model,
        dt,
        tol: 1e-12,
        max_iters: 30,
    };
    let mut s1 = ReducedState::rest(lin.dim(), dt);
    let mut s2 = s1.clone();
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        s1 = sim.step(&s1, f_ext, None)?.state;
        s2 = classic.step(&s2, f_ext)?;
        worst = s1.r.iter().zip(&s2.r).map(|(x, y)| (x - y).abs()).fold(worst, f64::max);
    }
    Ok(worst)
}

pub fn validate(cfg: &RunConfig) -> Outcome {
    let model = cfg.model().input("building the mesh")?;
    let ps = load_poses(cfg)?;
    let rm = load_rom(cfg, &model)?;
    let seed = cfg.seed.unwrap_or(cfg.cubature.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f_ext = model.gravity(cfg.gravity);
    let mut checks = Vec::new();

    let encoded = (0..ps.len())
        .map(|t| rm.encode_r(&ps.pose(t)))
        .collect::<csrom::Result<Vec<_>>>()?;
    let mut amp = vec![0.0f64; rm.n_q()];
    for r in &encoded {
        for (a, x) in amp.iter_mut().zip(&r[rm.n_p()..]) {
            *a = a.max(x.abs());
        }
    }
    let random_q = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        amp.iter()
            .map(|a| 1.5 * a.max(1e-3) * rng.gen_range(-1.0..1.0))
            .collect()
    };

    let qs: Vec<Vec<f64>> = (0..200).map(|_| random_q(&mut rng)).collect();
    let ortho = orthogonality_violation(&rm, &qs)?;
    checks.push(Check {
        name: "orthogonal subspace",
        pass: ortho <= 1e-8,
        detail: format!("max |U^T D|/(|D|+1) = {ortho:.2e}"),
    });

    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let q = random_q(&mut rng);
        worst = worst.max(check_contractions(&rm, &q, &mut rng)?);
    }
    checks.push(Check {
        name: "contraction oracles",
        pass: worst <= 1e-8,
        detail: format!("hv/hvv/svv/vhp vs directional derivatives: {worst:.2e}"),
    });

    let sim = Simulator::new(&rm, &model, cfg.sim)?;
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let r = encoded[rng.gen_range(0..encoded.len())].clone();
        let prev_r = encoded[rng.gen_range(0..encoded.len())].clone();
        let prev = ReducedState {
            rdot: prev_r.iter().map(|x| x * rng.gen_range(-5.0..5.0)).collect(),
            r: prev_r,
            dt: cfg.sim.dt,
        };
        let (_, jac) = sim.system_jacobian(&r, &prev, &f_ext, &Quadrature::Exact)?;
        let oracle = sim.jacobian_oracle(&r, &prev, &f_ext, &Quadrature::Exact)?;
        worst = worst.max(rel(&jac, &oracle));
    }
    checks.push(Check {
        name: "jacobian assembly",
        pass: worst <= 1e-6,
        detail: format!("relative Frobenius error vs complex step {worst:.2e}"),
    });

    let lin = linear_equivalence(&rm, &model, &mut rng, &f_ext, cfg.sim.dt)?;
    checks.push(Check {
        name: "linear equivalence",
        pass: lin <= 1e-8,
        detail: format!("20 steps vs classic linear reduction: {lin:.2e}"),
    });

    let mut table = Vec::new();
    if cfg.cubature_dir().exists() {
        let cm = load_cubature(cfg, &model)?;
        let all = CubatureTrainSet::from_poses(&rm, &model, &ps.poses)?;
        let (train, held) = all.split(cfg.held_out, cfg.cubature.seed);
        let held = if held.is_empty() { train.clone() } else { held };
        let ne = model.num_elements();
        let empty = held.relative_error(|_| Ok(vec![0.0; ne]))?;
        let neural = held.relative_error(|s| cm.masked_weights(&s.u))?;
        let mut sizes: Vec<usize> = cfg.table_sizes.iter().copied().filter(|&s| s <= ne).collect();
        sizes.push(cm.elements.len());
        sizes.sort_unstable();
        sizes.dedup();
        let target = sizes.last().copied().unwrap_or(0);
        let mut greedy = Vec::new();
        greedy_cubature_with(&train, target, |c, w| {
            if sizes.contains(&c.len()) {
                greedy.push((
                    c.len(),
                    held.relative_error(|_| Ok(masked(ne, c, w))).unwrap_or(f64::NAN),
                ));
            }
        })?;
        let at_size = greedy.iter().find(|g| g.0 == cm.elements.len()).map(|g| g.1);
        table = greedy.clone();
        checks.push(Check {
            name: "neural cubature",
            pass: neural.is_finite() && neural < empty,
            detail: format!(
                "|C| = {}: neural {:.2}%, greedy {}, empty set {:.0}%",
                cm.elements.len(),
                100.0 * neural,
                at_size
                    .map(|g| format!("{:.2}%", 100.0 * g))
                    .unwrap_or_else(|| "n/a".into()),
                100.0 * empty
            ),
        });
    }

    let mut all_pass = true;
    println!("{:<22} {:<6} detail", "check", "result");
    for c in &checks {
        all_pass &= c.pass;
        println!(
            "{:<22} {:<6} {}",
            c.name,
            if c.pass { "PASS" } else { "FAIL" },
            c.detail
        );
    }
    if !table.is_empty() {
        println!("\ngreedy cubature, held-out relative force error");
        for (size, err) in &table {
            println!("  |C| = {size:>4}  {:.2}%", 100.0 * err);
        }
    }
    write_json(
        &cfg.out.join("validate.json"),
        &json!({
            "checks": checks.iter().map(|c| json!({"name": c.name, "pass": c.pass, "detail": c.detail})).collect::<Vec<_>>(),
            "greedy_table": table,
        }),
    )?;
    Ok(all_pass)
}

fn time_it(repeats: usize, mut f: impl FnMut() -> csrom::Result<()>) -> csrom::Result<f64> {
    f()?;
    let start = Instant::now();
    for _ in 0..repeats {
        f()?;
    }
    Ok(start.elapsed().as_secs_f64() / repeats as f64)
}

pub fn bench(cfg: &RunConfig) -> Outcome {
    let model = cfg.model().input("building the mesh")?;
    let rm = load_rom(cfg, &model)?;
    let sim = Simulator::new(&rm, &model, cfg.sim)?;
    let f_ext = model.gravity(cfg.gravity);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.unwrap_or(0));
    let prev = ReducedState {
        r: (0..rm.dim()).map(|_| rng.gen_range(-0.05..0.05)).collect(),
        rdot: (0..rm.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        dt: cfg.sim.dt,
    };
    let r: Vec<f64> = prev.r.iter().map(|x| x * 1.1).collect();
    let u = rm.full_displacement(&r)?;
    let repeats = cfg.bench_repeats.max(1);
    let mut rows = Vec::new();
    let was = par::enabled();
    for parallel in [true, false] {
        par::set_enabled(parallel);
        let jac = time_it(repeats, || {
            sim.system_jacobian(&r, &prev, &f_ext, &Quadrature::Exact).map(|_| ())
        })?;
        let force = time_it(repeats, || model.internal_force(&u).map(|_| ()))?;
        let stiff = time_it(repeats, || model.stiffness(&u).map(|_| ()))?;
        rows.push(json!({
            "parallel": parallel && par::enabled(),
            "system_jacobian_s": jac,
            "internal_force_s": force,
            "stiffness_s": stiff,
        }));
        println!(
            "{:<10} system_jacobian {:>9.3} ms  internal_force {:>8.3} ms  stiffness {:>8.3} ms",
            if parallel { "parallel" } else { "sequential" },
            jac * 1e3,
            force * 1e3,
            stiff * 1e3
        );
    }
    par::set_enabled(was);
    std::fs::create_dir_all(&cfg.out)?;
    write_json(
        &cfg.out.join("bench.json"),
        &json!({ "repeats": repeats, "threads": available_threads(), "rows": rows }),
    )?;
    Ok(true)
}

fn available_threads() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}
