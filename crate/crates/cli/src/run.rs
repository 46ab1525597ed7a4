//! Experiment dispatch, output files and the run manifest.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hyperpencil::krein::transform_equivalence;
use hyperpencil::linalg::{self, CMat, C64};
use hyperpencil::ode::Wavenumber;
use hyperpencil::potential::{build_potential, read_tabulated_csv, truncate, Envelope, GridSpec, PotentialGrid, PotentialSpec};
use hyperpencil::radial::{
    adjoint_energy_identity, mode_layout, twist_experiment, CouplingMatrixFunction, EvolutionOptions, ModeBasis, ModeVector,
    TwistParams,
};
use hyperpencil::resolvent::{
    combes_thomas_fit, default_separations, hyperbolicity_roots, resolvent_bound_battery, DecayFit, PencilBox3D,
};
use hyperpencil::scattering::{
    herglotz_g, jost_solution, pencil_jost, scattering_coefficients, weyl_identity_residual, SourceProfile, SourceVector,
};
use hyperpencil::spectral::{density, density_via_pencil, entropy_scan, subharmonic_check, Disc, SpectralSample};
use hyperpencil::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::*;
use crate::plots::{emit_plots, PlotSpec};
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStatus {
    pub name: String,
    /// `ok`, `failed` (assertion) or `error` (the computation did not finish).
    pub status: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment: String,
    /// SHA-256 of the resolved configuration (seed included) as JSON.
    pub config_hash: String,
    pub library_version: String,
    pub seed: Option<u64>,
    pub threads: usize,
    pub wall_time_s: f64,
    pub tasks: Vec<TaskStatus>,
    pub excluded_nodes: usize,
    /// Every file written by the run, relative to the output directory.
    pub outputs: Vec<String>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub summary: Value,
}

pub const SUMMARY_FILE: &str = "summary.json";
pub const MANIFEST_FILE: &str = "manifest.json";

struct Ctx {
    out: PathBuf,
    seed: Option<u64>,
    outputs: Vec<String>,
    tasks: Vec<TaskStatus>,
    plots: Vec<PlotSpec>,
    excluded: usize,
}

fn e(x: f64) -> String {
    format!("{x:e}")
}

impl Ctx {
    fn seed(&self) -> u64 {
        self.seed.expect("validated configs carry a seed when one is needed")
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>, CliError> {
        let f = File::create(self.out.join(name)).map_err(|err| CliError::Io(format!("{name}: {err}")))?;
        self.outputs.push(name.to_string());
        Ok(BufWriter::new(f))
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
        let w = self.create(name)?;
        let mut wr = csv::Writer::from_writer(w);
        let io = |err: csv::Error| CliError::Io(format!("{name}: {err}"));
        wr.write_record(header).map_err(io)?;
        for r in rows {
            wr.write_record(r).map_err(io)?;
        }
        wr.flush().map_err(|err| CliError::Io(format!("{name}: {err}")))?;
        Ok(())
    }

    fn task(&mut self, name: &str, pass: bool, detail: String) {
        self.tasks.push(TaskStatus {
            name: name.into(),
            status: if pass { "ok" } else { "failed" }.into(),
            detail,
        });
    }
}

fn numeric(task: &str) -> impl Fn(Error) -> CliError + '_ {
    move |source| CliError::Numeric {
        task: task.to_string(),
        source,
    }
}

/// Hash of the configuration with the effective seed filled in.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let bytes = serde_json::to_vec(cfg).expect("configs serialize");
    hex::encode(Sha256::digest(bytes))
}

/// Runs the experiment in `cfg`, writing outputs to `out`. `seed` overrides
/// the configured seed.
pub fn run(cfg: &ExperimentConfig, seed: Option<u64>, out: &Path) -> Result<RunOutcome, CliError> {
    let start = Instant::now();
    let mut cfg = cfg.clone();
    if seed.is_some() {
        cfg.seed = seed;
    }
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|err| CliError::Io(format!("{}: {err}", out.display())))?;
    let mut ctx = Ctx {
        out: out.to_path_buf(),
        seed: cfg.seed,
        outputs: Vec::new(),
        tasks: Vec::new(),
        plots: Vec::new(),
        excluded: 0,
    };
    let result = match cfg.experiment {
        ExperimentKind::Density => run_density(&cfg, &mut ctx),
        ExperimentKind::Entropy => run_entropy(&cfg, &mut ctx),
        ExperimentKind::Identities => run_identities(&cfg, &mut ctx),
        ExperimentKind::KreinCheck => run_krein(&cfg, &mut ctx),
        ExperimentKind::Twist => run_twist(&cfg, &mut ctx),
        ExperimentKind::Adjoint => run_adjoint(&cfg, &mut ctx),
        ExperimentKind::CombesThomas => run_combes_thomas(&cfg, &mut ctx),
        ExperimentKind::PencilBound => run_pencil_bound(&cfg, &mut ctx),
    };
    let mut manifest = RunManifest {
        experiment: cfg.experiment.name().into(),
        config_hash: config_hash(&cfg),
        library_version: hyperpencil::VERSION.into(),
        seed: cfg.seed,
        threads: rayon::current_num_threads(),
        wall_time_s: 0.0,
        tasks: Vec::new(),
        excluded_nodes: 0,
        outputs: Vec::new(),
        pass: false,
    };
    let summary = match result {
        Ok(v) => v,
        Err(err) => {
            ctx.tasks.push(TaskStatus {
                name: cfg.experiment.name().into(),
                status: "error".into(),
                detail: err.to_string(),
            });
            manifest.tasks = ctx.tasks;
            manifest.outputs = ctx.outputs;
            manifest.excluded_nodes = ctx.excluded;
            manifest.wall_time_s = start.elapsed().as_secs_f64();
            write_json(out, MANIFEST_FILE, &manifest)?;
            return Err(err);
        }
    };
    write_json(out, SUMMARY_FILE, &summary)?;
    ctx.outputs.push(SUMMARY_FILE.into());
    let scripts = emit_plots(out, &ctx.plots)?;
    ctx.outputs.extend(scripts);
    manifest.pass = ctx.tasks.iter().all(|t| t.status == "ok");
    manifest.tasks = ctx.tasks;
    manifest.outputs = ctx.outputs;
    manifest.excluded_nodes = ctx.excluded;
    manifest.wall_time_s = start.elapsed().as_secs_f64();
    write_json(out, MANIFEST_FILE, &manifest)?;
    Ok(RunOutcome { manifest, summary })
}

/// [`run`] inside a dedicated pool of `threads` workers (rayon's default when
/// `None`).
pub fn run_with_threads(cfg: &ExperimentConfig, seed: Option<u64>, out: &Path, threads: Option<usize>) -> Result<RunOutcome, CliError> {
    match threads {
        None => run(cfg, seed, out),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|err| CliError::Io(format!("thread pool: {err}")))?;
            pool.install(|| run(cfg, seed, out))
        }
    }
}

fn write_json<T: Serialize>(out: &Path, name: &str, v: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(v).map_err(|err| CliError::Io(format!("{name}: {err}")))?;
    text.push('\n');
    std::fs::write(out.join(name), text).map_err(|err| CliError::Io(format!("{name}: {err}")))
}

fn potential_grid(pc: &PotentialConfig, seed: Option<u64>) -> Result<PotentialGrid, CliError> {
    let r = pc.support_radius;
    let mut grid = GridSpec {
        step: pc.step.unwrap_or(1e-3 * r),
        support_radius: r,
        r_max: r,
    };
    let spec = match &pc.shape {
        PotentialShape::Zero { dim } => PotentialSpec::Zero { dim: *dim },
        PotentialShape::Constant { diagonal } => PotentialSpec::Constant {
            value: CMat::from_diagonal(&nalgebra::DVector::from_iterator(
                diagonal.len(),
                diagonal.iter().map(|d| C64::new(*d, 0.0)),
            )),
        },
        PotentialShape::RandomHermitian {
            dim,
            amplitude,
            knot_spacing,
            envelope,
        } => PotentialSpec::RandomHermitian {
            dim: *dim,
            seed: seed.ok_or_else(|| CliError::Config("seed: random potential needs a seed".into()))?,
            amplitude: *amplitude,
            knot_spacing: *knot_spacing,
            envelope: *envelope,
        },
        PotentialShape::Tabulated { path, dim } => {
            let f = File::open(path).map_err(|err| CliError::Config(format!("potential.shape.path: {}: {err}", path.display())))?;
            let (spec, h) = read_tabulated_csv(f, *dim).map_err(|err| CliError::Config(format!("potential.shape.path: {err}")))?;
            grid.step = h;
            spec
        }
    };
    build_potential(&spec, grid).map_err(numeric("potential"))
}

fn source_vector(sc: &SourceConfig, q: &PotentialGrid) -> Result<SourceVector, CliError> {
    SourceVector::new(q.dim(), sc.delta, sc.step.unwrap_or(q.step()), &sc.profile).map_err(numeric("source"))
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

fn sample_row(k: f64, s: &SpectralSample) -> Vec<String> {
    vec![e(k), e(s.lambda), e(s.t), e(s.density), e(s.log_minus)]
}

fn run_density(cfg: &ExperimentConfig, ctx: &mut Ctx) -> Result<Value, CliError> {
    let p = cfg.density.as_ref().unwrap();
    let q = potential_grid(cfg.potential.as_ref().unwrap(), ctx.seed)?;
    let f = source_vector(cfg.source.as_ref().unwrap(), &q)?;
    let ks = linspace(p.k_min, p.k_max, p.count);
    let results: Vec<Result<SpectralSample, Error>> = ks
        .par_iter()
        .map(|&k| {
            let w = Wavenumber::real(k)?;
            match p.xi {
                Some(xi) => density_via_pencil(&q, &f, w, xi),
                None => density(&q, &f, w, p.t),
            }
        })
        .collect();
    let mut rows = Vec::new();
    let mut excluded = 0;
    for (k, r) in ks.iter().zip(results) {
        match r {
            Ok(s) => rows.push(sample_row(*k, &s)),
            Err(Error::Resonance { .. }) => excluded += 1,
            Err(err) => return Err(numeric("density")(err)),
        }
    }
    ctx.excluded += excluded;
    ctx.csv("density.csv", &["k", "lambda", "t", "density", "log_minus"], &rows)?;
    ctx.plots.push(PlotSpec::Lines {
        csv: "density.csv".into(),
        x: 2,
        y: 4,
        xlabel: "lambda".into(),
        ylabel: "density".into(),
        logy: false,
    });
    ctx.task("density", true, format!("{} points, {excluded} resonant", rows.len()));
    Ok(json!({ "points": rows.len(), "excluded": excluded }))
}

fn run_entropy(cfg: &ExperimentConfig, ctx: &mut Ctx) -> Result<Value, CliError> {
    let p = cfg.entropy.as_ref().unwrap();
    let q = potential_grid(cfg.potential.as_ref().unwrap(), ctx.seed)?;
    let f = source_vector(cfg.source.as_ref().unwrap(), &q)?;
    let radii = if p.radii.is_empty() { vec![q.support_radius()] } else { p.radii.clone() };
    let mut scans = Vec::new();
    let mut rows = Vec::new();
    for &r in &radii {
        let task = format!("entropy R = {r}");
        let qr = truncate(&q, q.dim(), r).map_err(numeric(&task))?;
        let rep = entropy_scan(&qr, &f, p.rectangle, p.resolution, p.mode).map_err(numeric(&task))?;
        let name = format!("entropy_R{r}.csv");
        let w = ctx.create(&name)?;
        rep.write_csv(w).map_err(numeric(&task))?;
        ctx.plots.push(PlotSpec::Heatmap { csv: name.clone() });
        ctx.excluded += rep.excluded.len();
        rows.push(vec![e(r), e(rep.entropy), e(rep.variation_bound), rep.excluded.len().to_string()]);
        scans.push(json!({
            "radius": r,
            "entropy": rep.entropy,
            "variation_bound": rep.variation_bound,
            "excluded": rep.excluded.len(),
            "nodes": rep.node_count(),
            "csv": name,
        }));
    }
    ctx.csv("entropy_vs_radius.csv", &["radius", "entropy", "variation_bound", "excluded"], &rows)?;
    ctx.plots.push(PlotSpec::Lines {
        csv: "entropy_vs_radius.csv".into(),
        x: 1,
        y: 2,
        xlabel: "R".into(),
        ylabel: "entropy".into(),
        logy: false,
    });
    let entropies: Vec<f64> = scans.iter().map(|s| s["entropy"].as_f64().unwrap()).collect();
    let changes: Vec<f64> = entropies.windows(2).map(|w| (w[1] - w[0]).abs() / w[0].abs()).collect();
    if let Some(floor) = p.min_entropy {
        let ok = entropies.iter().all(|x| *x > floor);
        ctx.task("entropy floor", ok, format!("entropies {entropies:?} against floor {floor}"));
    }
    if let Some(tol) = p.max_relative_change {
        let ok = changes.iter().all(|c| *c < tol);
        ctx.task("entropy stabilization", ok, format!("relative changes {changes:?} against {tol}"));
    }
    if p.min_entropy.is_none() && p.max_relative_change.is_none() {
        ctx.task("entropy", true, format!("{} scans", scans.len()));
    }
    Ok(json!({ "scans": scans, "relative_changes": changes }))
}

/// One battery row.
struct Check {
    instance: usize,
    dim: usize,
    radius: f64,
    k: C64,
    param: f64,
    value: f64,
    pass: bool,
    error: Option<String>,
}

struct Instance {
    dim: usize,
    radius: f64,
    seed: u64,
    k: C64,
    param: f64,
    extra: [f64; 3],
}

fn random_instance(rng: &mut ChaCha8Rng, p: &IdentitiesParams, k: C64, param: f64) -> Instance {
    Instance {
        dim: rng.random_range(1..=p.max_dim),
        radius: rng.random_range(1.0..=p.max_radius),
        seed: rng.random(),
        k,
        param,
        extra: [rng.random(), rng.random(), rng.random()],
    }
}

fn instance_potential(inst: &Instance) -> Result<PotentialGrid, Error> {
    build_potential(
        &PotentialSpec::RandomHermitian {
            dim: inst.dim,
            seed: inst.seed,
            amplitude: 1.0,
            knot_spacing: 0.5,
            envelope: Envelope::Flat,
        },
        GridSpec::with_default_step(inst.radius),
    )
}

fn run_battery<F>(instances: &[Instance], eval: F) -> Vec<Check>
where
    F: Fn(&Instance, &PotentialGrid) -> Result<(f64, bool), Error> + Sync,
{
    instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            let r = instance_potential(inst).and_then(|q| eval(inst, &q));
            let (value, pass, error) = match r {
                Ok((v, ok)) => (v, ok, None),
                Err(err) => (f64::NAN, false, Some(err.to_string())),
            };
            Check {
                instance: i,
                dim: inst.dim,
                radius: inst.radius,
                k: inst.k,
                param: inst.param,
                value,
                pass,
                error,
            }
        })
        .collect()
}

fn run_identities(cfg: &ExperimentConfig, ctx: &mut Ctx) -> Result<Value, CliError> {
    let p = cfg.identities.as_ref().unwrap();
    let tol = &p.tolerances;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed());
    let (kmin, kmax, tm) = (p.k_min, p.k_max, p.t_max);
    let [im_lo, im_hi] = p.im_k;
    let mut draw = |n: usize, complex: &dyn Fn(&mut ChaCha8Rng, usize) -> C64| -> Vec<Instance> {
        (0..n)
            .map(|i| {
                let k = complex(&mut rng, i);
                let param = rng.random_range(-tm..=tm);
                random_instance(&mut rng, p, k, param)
            })
            .collect()
    };
    let real_k = |rng: &mut ChaCha8Rng, _: usize| C64::new(rng.random_range(kmin..=kmax), 0.0);
    let upper_k = |rng: &mut ChaCha8Rng, _: usize| C64::new(rng.random_range(-kmax..=kmax), rng.random_range(im_lo..=im_hi));
    let mixed_k = |rng: &mut ChaCha8Rng, i: usize| {
        let re = rng.random_range(kmin..=kmax);
        let im = rng.random_range(im_lo..=im_hi);
        C64::new(re, if i % 2 == 0 { 0.0 } else { im })
    };
    let pair_inst = draw(p.scattering_pair, &real_k);
    let weyl_inst = draw(p.weyl, &upper_k);
    let herg_inst = draw(p.herglotz, &real_k);
    let jost_inst = draw(p.pencil_jost, &real_k);
    let gron_inst = draw(p.pencil_jost, &upper_k);
    let krein_inst = draw(p.krein, &mixed_k);
    let sub_inst = draw(p.subharmonic, &upper_k);

    let mut families: Vec<(&str, f64, Vec<Check>)> = Vec::new();
    families.push((
        "scattering-pair",
        tol.scattering_pair,
        run_battery(&pair_inst, |i, q| {
            let d = scattering_coefficients(q, Wavenumber::real(i.k.re)?, i.param)?.unitarity_defect();
            Ok((d, d <= tol.scattering_pair))
        }),
    ));
    families.push((
        "weyl",
        tol.weyl,
        run_battery(&weyl_inst, |i, q| {
            let r = weyl_identity_residual(q, Wavenumber::upper(i.k)?, i.param)?;
            Ok((r, r <= tol.weyl))
        }),
    ));
    let grid_n = p.herglotz_grid;
    families.push((
        "herglotz",
        tol.herglotz,
        run_battery(&herg_inst, |i, q| {
            let mut worst = f64::INFINITY;
            for re in linspace(-kmax, kmax, grid_n) {
                for im in linspace(im_lo, im_hi, grid_n) {
                    let h = herglotz_g(q, Wavenumber::upper(C64::new(re, im))?, i.param)?;
                    worst = worst.min(h.min_im_eigenvalue);
                }
            }
            Ok((worst, worst >= -tol.herglotz))
        }),
    ));
    families.push((
        "pencil-jost",
        tol.pencil_jost,
        run_battery(&jost_inst, |i, q| {
            let k = i.k.re;
            let jd = pencil_jost(q, Wavenumber::real(k)?, i.param)?;
            let j = jost_solution(q, Wavenumber::real(k)?, k * i.param)?;
            let d = linalg::max_abs(&(&jd.d0 - &j.values[0]));
            Ok((d, d <= tol.pencil_jost))
        }),
    ));
    families.push((
        "gronwall",
        1.0,
        run_battery(&gron_inst, |i, q| match pencil_jost(q, Wavenumber::upper(i.k)?, i.param) {
            Ok(jd) => {
                let ratio = linalg::op_norm(&jd.d0) / jd.gronwall_bound;
                Ok((ratio, ratio <= 1.0))
            }
            Err(Error::Consistency(_)) => Ok((f64::INFINITY, false)),
            Err(err) => Err(err),
        }),
    ));
    families.push((
        "krein",
        tol.krein,
        run_battery(&krein_inst, |i, q| {
            let t = transform_equivalence(q, Wavenumber::new(i.k)?, i.param)?;
            let r = t.residual.max(t.det_residual);
            Ok((r, r <= tol.krein))
        }),
    ));
    families.push((
        "subharmonic",
        tol.subharmonic,
        run_battery(&sub_inst, |i, q| {
            let f = SourceVector::new(q.dim(), i.radius.min(1.0), q.step(), &SourceProfile::Bump)?;
            let radius = (0.1 + 0.4 * i.extra[0]) * i.k.im;
            let disc = Disc {
                center_re: i.k.re,
                center_im: i.k.im,
                radius,
            };
            let rep = subharmonic_check(q, &f, i.param, disc, 64)?;
            Ok((rep.lhs - rep.rhs, rep.ok))
        }),
    ));

    let mut rows = Vec::new();
    let mut summary = serde_json::Map::new();
    for (name, tolerance, checks) in &families {
        let failures = checks.iter().filter(|c| !c.pass).count();
        let finite: Vec<f64> = checks.iter().map(|c| c.value).filter(|v| v.is_finite()).collect();
        let max = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = finite.iter().cloned().fold(f64::INFINITY, f64::min);
        for c in checks {
            rows.push(vec![
                name.to_string(),
                c.instance.to_string(),
                c.dim.to_string(),
                e(c.radius),
                e(c.k.re),
                e(c.k.im),
                e(c.param),
                e(c.value),
                e(*tolerance),
                c.pass.to_string(),
            ]);
        }
        let errors: Vec<String> = checks
            .iter()
            .filter_map(|c| c.error.as_ref().map(|m| format!("#{}: {m}", c.instance)))
            .collect();
        let detail = if errors.is_empty() {
            format!("{} instances, values in [{min:e}, {max:e}], {failures} failures", checks.len())
        } else {
            format!("{} instances, {failures} failures; {}", checks.len(), errors.join("; "))
        };
        ctx.task(name, failures == 0, detail);
        summary.insert(
            name.to_string(),
            json!({
                "instances": checks.len(),
                "failures": failures,
                "min_value": min,
                "max_value": max,
                "tolerance": tolerance,
                "pass": failures == 0,
            }),
        );
    }
    ctx.csv(
        "identities.csv",
        &["check", "instance", "dim", "radius", "k_re", "k_im", "param", "value", "tolerance", "pass"],
        &rows,
    )?;
    summary.insert("all_pass".into(), json!(ctx.tasks.iter().all(|t| t.status == "ok")));
    Ok(Value::Object(summary))
}

fn run_krein(cfg: &ExperimentConfig, ctx: &mut Ctx) -> Result<Value, CliError> {
    let p = cfg.krein_check.as_ref().unwrap();
    let q = potential_grid(cfg.potential.as_ref().unwrap(), ctx.seed)?;
    let checks: Vec<Result<_, Error>> = p
        .k
        .par_iter()
        .map(|&[re, im]| transform_equivalence(&q, Wavenumber::new(C64::new(re, im))?, p.xi))
        .collect();
    let mut rows = Vec::new();
    let mut worst = 0.0f64;
    for (&[re, im], c) in p.k.iter().zip(checks) {
        let c = c.map_err(numeric(&format!("krein-check k = {re}+{im}i")))?;
        worst = worst.max(c.residual.max(c.det_residual));
        rows.push(vec![e(re), e(im), e(c.residual), e(c.det_residual)]);
    }
    ctx.csv("krein.csv", &["k_re", "k_im", "residual", "det_residual"], &rows)?;
    ctx.plots.push(PlotSpec::Lines {
        csv: "krein.csv".into(),
        x: 1,
        y: 3,
        xlabel: "Re k".into(),
        ylabel: "residual".into(),
        logy: true,
    });
    let pass = worst <= p.tolerance;
    ctx.task("krein-check", pass, format!("max residual {worst:e}"));
    Ok(json!({ "max_residual": worst, "tolerance": p.tolerance, "pass": pass }))
}

fn coupling(cc: &CouplingConfig, basis: ModeBasis, b: usize, seed: Option<u64>) -> Result<CouplingMatrixFunction, CliError> {
    Ok(match cc {
        CouplingConfig::Zero => CouplingMatrixFunction::Zero,
        CouplingConfig::SphericallySymmetric { amplitude, envelope } => CouplingMatrixFunction::SphericallySymmetric {
            amplitude: *amplitude,
            envelope: *envelope,
        },
        CouplingConfig::AxialHarmonic {
            amplitude,
            gamma,
            omega,
            phase,
        } => CouplingMatrixFunction::AxialHarmonic {
            amplitude: *amplitude,
            gamma: *gamma,
            omega: *omega,
            phase: *phase,
        },
        CouplingConfig::RandomTail {
            amplitude,
            knot_spacing,
            envelope,
            radius,
            step,
        } => CouplingMatrixFunction::Sampled(
            build_potential(
                &PotentialSpec::RandomHermitian {
                    dim: basis.dim(b),
                    seed: seed.ok_or_else(|| CliError::Config("seed: random coupling needs a seed".into()))?,
                    amplitude: *amplitude,
                    knot_spacing: *knot_spacing,
                    envelope: *envelope,
                },
                GridSpec {
                    step: *step,
                    support_radius: *radius,
                    r_max: *radius,
                },
            )
            .map_err(numeric("coupling"))?,
        ),
    })
}

fn run_twist(cfg: &ExperimentConfig, ctx: &mut Ctx) -> Result<Value, CliError> {
    let p = cfg.twist.as_ref().unwrap();
    let basis: ModeBasis = p.basis.into();
    let layout = mode_layout(p.alpha, p.b).map_err(numeric("twist"))?;
    let v = coupling(&p.coupling, basis, p.b, ctx.seed)?;
    let params = TwistParams {
        k: C64::new(p.k_re, p.k_im),
        xi: p.xi,
        gamma: p.gamma,
        d: p.d,
        r_max: p.r_max,
    };
    let opts = EvolutionOptions {
        sample_step: p.sample_step,
        tol: p.tol,
    };
    let rep = twist_experiment(&layout, basis, &v, params, opts).map_err(numeric("twist"))?;
    let w = ctx.create("twist_trace.csv")?;
    rep.trace.write_csv(w).map_err(numeric("twist"))?;
    let rows: Vec<Vec<String>> = rep
        .blocks
        .iter()
        .map(|b| vec![b.m.to_string(), e(b.r_m), e(b.alpha_norm), e(b.beta_norm), e(b.zeta), e(b.eta)])
        .collect();
    ctx.csv("twist_blocks.csv", &["m", "r_m", "alpha_norm", "beta_norm", "zeta", "eta"], &rows)?;
    let markers: Vec<f64> = layout.thresholds.iter().copied().filter(|r| *r <= p.r_max).collect();
    ctx.plots.push(PlotSpec::Trace {
        csv: "twist_trace.csv".into(),
        markers,
        threshold: Some(p.threshold),
    });
    let pass = rep.liminf_estimate >= p.threshold;
    ctx.task("twist", pass, format!("liminf estimate {:e} against {}", rep.liminf_estimate, p.threshold));
    Ok(json!({
        "liminf_estimate": rep.liminf_estimate,
        "threshold": p.threshold,
        "blocks": rep.blocks.len(),
        "fit": rep.fit,
        "pass": pass,
    }))
}

fn run_adjoint(cfg: &ExperimentConfig, ctx: &mut Ctx) -> Result<Value, CliError> {
    let p = cfg.adjoint.as_ref().unwrap();
    let layout = mode_layout(p.alpha, p.b).map_err(numeric("adjoint"))?;
    let basis = ModeBasis::Full;
    let k = Wavenumber::upper(C64::new(p.k_re, p.k_im)).map_err(numeric("adjoint"))?;
    let opts = EvolutionOptions {
        sample_step: p.sample_step,
        tol: p.tol,
    };
    let seed = ctx.seed();
    let runs: Vec<Result<Vec<_>, CliError>> = (0..p.runs)
        .into_par_iter()
        .map(|run| {
            let s = seed.wrapping_add(run as u64);
            let v = coupling(&p.coupling, basis, p.b, Some(s))?;
            let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x9e37_79b9_7f4a_7c15);
            let mut eta = ModeVector::zeros(basis, p.b);
            for z in eta.coefficients.iter_mut() {
                *z = C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            }
            p.times
                .iter()
                .map(|&t| {
                    adjoint_energy_identity(&layout, &v, k, p.xi, &eta, t, p.r_end, opts)
                        .map_err(numeric(&format!("adjoint run {run}, t = {t}")))
                })
                .collect()
        })
        .collect();
    let mut rows = Vec::new();
    let mut worst = 0.0f64;
    let mut non_decreasing = Vec::new();
    for (run, reps) in runs.into_iter().enumerate() {
        let reps = reps?;
        for (t, r) in p.times.iter().zip(&reps) {
            worst = worst.max(r.conservation_residual);
            rows.push(vec![
                run.to_string(),
                e(*t),
                e(r.conservation_residual),
                e(r.tail_derivative_l2),
                e(r.norm_at_t),
                e(r.dissipated),
            ]);
        }
        if reps.windows(2).any(|w| w[1].tail_derivative_l2 >= w[0].tail_derivative_l2) {
            non_decreasing.push(run);
        }
    }
    ctx.csv(
        "adjoint.csv",
        &["run", "t", "conservation_residual", "tail_derivative_l2", "norm_at_t", "dissipated"],
        &rows,
    )?;
    ctx.plots.push(PlotSpec::Lines {
        csv: "adjoint.csv".into(),
        x: 2,
        y: 4,
        xlabel: "t".into(),
        ylabel: "tail derivative integral".into(),
        logy: true,
    });
    let residual_ok = worst <= p.tolerance;
    ctx.task("adjoint conservation", residual_ok, format!("max residual {worst:e} over {} runs", p.runs));
    ctx.task(
        "adjoint tail monotone",
        non_decreasing.is_empty(),
        format!("runs without a decreasing tail: {non_decreasing:?}"),
    );
    Ok(json!({
        "runs": p.runs,
        "max_residual": worst,
        "tolerance": p.tolerance,
        "non_decreasing_runs": non_decreasing,
        "pass": residual_ok && non_decreasing.is_empty(),
    }))
}

fn fit_intercept(f: &DecayFit) -> f64 {
    let n = f.separations.len() as f64;
    let mx = f.separations.iter().sum::<f64>() / n;
    let my = f.log_norms.iter().sum::<f64>() / n;
    my + f.gamma_fit * mx
}

fn run_combes_thomas(cfg: &ExperimentConfig, ctx: &mut Ctx) -> Result<Value, CliError> {
    let p = cfg.combes_thomas.as_ref().unwrap();
    let grids = p
        .potentials
        .iter()
        .map(|v| v.grid(p.length, p.nodes))
        .collect::<Result<Vec<_>, _>>()
        .map_err(numeric("combes-thomas"))?;
    let tasks: Vec<(usize, f64)> = (0..grids.len()).flat_map(|i| p.k_im.iter().map(move |&k| (i, k))).collect();
    let fits: Vec<Result<DecayFit, Error>> = tasks
        .par_iter()
        .map(|&(i, kim)| {
            let g = &grids[i];
            let seps = default_separations(g, kim, p.left, p.separation_start, p.separation_step);
            combes_thomas_fit(g, p.xi, C64::new(p.k_re, kim), p.left, &seps)
        })
        .collect();
    let mut rows = Vec::new();
    let mut all = Vec::new();
    for (&(i, kim), fit) in tasks.iter().zip(fits) {
        let fit = fit.map_err(numeric(&format!("combes-thomas potential {i}, Im k = {kim}")))?;
        let name = format!("decay_p{i}_k{kim}.csv");
        let w = ctx.create(&name)?;
        fit.write_csv(w).map_err(numeric("combes-thomas"))?;
        ctx.plots.push(PlotSpec::Decay {
            csv: name,
            gamma: fit.gamma_fit,
            intercept: fit_intercept(&fit),
        });
        ctx.excluded += fit.excluded.len();
        let ok = fit.gamma_fit >= p.min_rate_ratio * kim && fit.r_squared >= p.min_r_squared && fit.symmetry_defect <= p.symmetry_tolerance;
        ctx.task(
            &format!("decay potential {i}, Im k = {kim}"),
            ok,
            format!(
                "gamma {:.6}, r^2 {:.6}, symmetry defect {:e}",
                fit.gamma_fit, fit.r_squared, fit.symmetry_defect
            ),
        );
        rows.push(vec![
            i.to_string(),
            e(p.k_re),
            e(kim),
            e(fit.gamma_fit),
            e(fit.r_squared),
            e(fit.nu_proxy),
            e(fit.symmetry_defect),
            fit.excluded.len().to_string(),
        ]);
        all.push((i, kim, fit));
    }
    ctx.csv(
        "fits.csv",
        &["potential", "k_re", "k_im", "gamma_fit", "r_squared", "nu_proxy", "symmetry_defect", "excluded"],
        &rows,
    )?;
    let mut ratios = Vec::new();
    for (i, a, fa) in &all {
        for (j, b, fb) in &all {
            if i == j && (b - 2.0 * a).abs() < 1e-12 {
                let ratio = fb.gamma_fit / fa.gamma_fit;
                let ok = ratio >= p.doubling_range[0] && ratio <= p.doubling_range[1];
                ctx.task(&format!("rate doubling potential {i}, Im k {a} -> {b}"), ok, format!("ratio {ratio:.6}"));
                ratios.push(json!({ "potential": i, "k_im": a, "ratio": ratio, "pass": ok }));
            }
        }
    }
    let fits_json: Vec<Value> = all
        .iter()
        .map(|(i, kim, f)| {
            json!({
                "potential": i,
                "k_im": kim,
                "gamma_fit": f.gamma_fit,
                "r_squared": f.r_squared,
                "nu_proxy": f.nu_proxy,
                "symmetry_defect": f.symmetry_defect,
                "separations": f.separations.len(),
            })
        })
        .collect();
    Ok(json!({ "fits": fits_json, "doubling": ratios }))
}

fn run_pencil_bound(cfg: &ExperimentConfig, ctx: &mut Ctx) -> Result<Value, CliError> {
    let p = cfg.pencil_bound.as_ref().unwrap();
    let seed = ctx.seed();
    let bat = resolvent_bound_battery(&p.potentials, p.nodes, p.length, p.solves, seed).map_err(numeric("pencil-bound"))?;
    let rows: Vec<Vec<String>> = bat
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            vec![
                i.to_string(),
                r.potential.to_string(),
                e(r.k_re),
                e(r.k_im),
                e(r.xi),
                e(r.norm_psi),
                e(r.bound),
                e(r.residual),
            ]
        })
        .collect();
    ctx.csv(
        "bound.csv",
        &["solve", "potential", "k_re", "k_im", "xi", "norm_psi", "bound", "residual"],
        &rows,
    )?;
    ctx.plots.push(PlotSpec::Lines {
        csv: "bound.csv".into(),
        x: 1,
        y: 8,
        xlabel: "solve".into(),
        ylabel: "relative residual".into(),
        logy: true,
    });
    ctx.task(
        "resolvent bound",
        bat.violations == 0,
        format!("{} violations in {} solves, min slack ratio {:e}", bat.violations, bat.solves, bat.min_slack_ratio),
    );
    let residual_ok = bat.max_residual <= p.residual_tolerance;
    ctx.task("solve residual", residual_ok, format!("max residual {:e}", bat.max_residual));

    // hyperbolicity on seeded test vectors
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5151);
    let mut root_rows = Vec::new();
    let mut hyperbolic = true;
    for (i, v) in p.potentials.iter().enumerate() {
        let g = v.grid(p.length, p.nodes).map_err(numeric("pencil-bound"))?;
        for j in 0..10 {
            let f: Vec<C64> = (0..g.unknowns())
                .map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            let xi = rng.random_range(-2.0..2.0);
            let r = hyperbolicity_roots(&g, xi, &f).map_err(numeric("pencil-bound"))?;
            hyperbolic &= r.k1 > r.k2;
            root_rows.push(vec![i.to_string(), j.to_string(), e(xi), e(r.k1), e(r.k2)]);
        }
    }
    ctx.csv("roots.csv", &["potential", "vector", "xi", "k1", "k2"], &root_rows)?;
    ctx.task("hyperbolicity", hyperbolic, format!("{} test vectors", root_rows.len()));

    let mut box_summary = Value::Null;
    if let Some(b) = &p.box3d {
        let cube = PencilBox3D::new(b.edge, b.length, |x, y, z| (x + 0.5 * y - z).cos()).map_err(numeric("pencil-bound box"))?;
        let mut rows = Vec::new();
        let (mut violations, mut worst) = (0, 0.0f64);
        for s in 0..b.solves {
            let k = C64::new(rng.random_range(-2.0..2.0), rng.random_range(0.3..2.0));
            let xi = rng.random_range(-2.0..2.0);
            let f: Vec<C64> = (0..b.edge.pow(3)).map(|_| C64::new(rng.random_range(-1.0..1.0), 0.0)).collect();
            let sol = cube.solve(xi, k, &f, 0.1 * p.residual_tolerance, 20_000).map_err(numeric("pencil-bound box"))?;
            if sol.norm_psi > sol.bound {
                violations += 1;
            }
            worst = worst.max(sol.residual);
            rows.push(vec![s.to_string(), e(k.re), e(k.im), e(xi), e(sol.norm_psi), e(sol.bound), e(sol.residual)]);
        }
        ctx.csv("box3d.csv", &["solve", "k_re", "k_im", "xi", "norm_psi", "bound", "residual"], &rows)?;
        ctx.task(
            "box bound",
            violations == 0 && worst <= p.residual_tolerance,
            format!("{violations} violations, max residual {worst:e}"),
        );
        box_summary = json!({ "solves": b.solves, "violations": violations, "max_residual": worst });
    }
    Ok(json!({
        "solves": bat.solves,
        "violations": bat.violations,
        "min_slack_ratio": bat.min_slack_ratio,
        "max_residual": bat.max_residual,
        "residual_tolerance": p.residual_tolerance,
        "hyperbolic": hyperbolic,
        "box3d": box_summary,
    }))
}
