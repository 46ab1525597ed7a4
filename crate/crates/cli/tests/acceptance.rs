//! Acceptance suite. Runs every shipped config through the runner at one and
//! four threads, checks each criterion from the written CSV files at its
//! stated tolerance, and prints one PASS/FAIL line per criterion.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use hyperpencil_cli::{run_with_threads, ExperimentConfig};

const SUITE: [&str; 8] = [
    "density_free",
    "identities",
    "krein_check",
    "pencil_bound",
    "combes_thomas",
    "entropy_stabilization",
    "adjoint",
    "twist",
];

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

struct Run {
    dir: PathBuf,
    elapsed: Duration,
    error: Option<String>,
}

fn run_suite(root: &Path, threads: usize) -> BTreeMap<&'static str, Run> {
    let mut out = BTreeMap::new();
    for name in SUITE {
        let dir = root.join(name);
        let start = Instant::now();
        let res = ExperimentConfig::load(&configs().join(format!("{name}.toml"))).and_then(|c| run_with_threads(&c, None, &dir, Some(threads)));
        out.insert(
            name,
            Run {
                dir,
                elapsed: start.elapsed(),
                error: res.err().map(|e| e.to_string()),
            },
        );
    }
    out
}

type Rows = Vec<BTreeMap<String, String>>;

fn read_csv(path: &Path) -> Result<Rows, String> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let headers = rd.headers().map_err(|e| e.to_string())?.clone();
    rd.records()
        .map(|r| {
            let r = r.map_err(|e| e.to_string())?;
            Ok(headers.iter().zip(r.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect())
        })
        .collect()
}

fn num(row: &BTreeMap<String, String>, key: &str) -> f64 {
    row[key].parse().unwrap_or(f64::NAN)
}

type Verdict = Result<String, String>;

fn check(cond: bool, detail: String) -> Verdict {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn runtime(run: &Run, limit: f64) -> Verdict {
    if let Some(e) = &run.error {
        return Err(format!("run failed: {e}"));
    }
    let s = run.elapsed.as_secs_f64();
    check(s < limit, format!("{s:.2} s (limit {limit} s)"))
}

fn family(runs: &BTreeMap<&str, Run>, name: &str) -> Result<Rows, String> {
    let rows = read_csv(&runs["identities"].dir.join("identities.csv"))?;
    Ok(rows.into_iter().filter(|r| r["check"] == name).collect())
}

fn c1(runs: &BTreeMap<&str, Run>) -> Verdict {
    let r = &runs["density_free"];
    let t = runtime(r, 5.0)?;
    let rows = read_csv(&r.dir.join("density.csv"))?;
    let mut worst = 0.0f64;
    for row in &rows {
        let k = num(row, "k");
        let exact = k / std::f64::consts::PI * ((1.0 - k.cos()) / (k * k)).powi(2);
        worst = worst.max((num(row, "density") - exact).abs());
    }
    let kmin = rows.iter().map(|r| num(r, "k")).fold(f64::INFINITY, f64::min);
    let kmax = rows.iter().map(|r| num(r, "k")).fold(0.0, f64::max);
    check(
        rows.len() == 50 && kmin >= 0.5 && kmax <= 5.0 && worst <= 1e-7,
        format!("{} values, max error {worst:e}, {t}", rows.len()),
    )
}

fn battery(runs: &BTreeMap<&str, Run>, name: &str, count: usize, ok: impl Fn(&BTreeMap<String, String>) -> bool, limit: f64) -> Verdict {
    let t = runtime(&runs["identities"], limit)?;
    let rows = family(runs, name)?;
    let bad = rows.iter().filter(|r| !ok(r)).count();
    let vals: Vec<f64> = rows.iter().map(|r| num(r, "value")).collect();
    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    check(
        rows.len() == count && bad == 0,
        format!("{} instances, values in [{lo:e}, {hi:e}], {bad} failures, battery {t}", rows.len()),
    )
}

fn c2(runs: &BTreeMap<&str, Run>) -> Verdict {
    battery(
        runs,
        "scattering-pair",
        100,
        |r| {
            num(r, "value") <= 1e-8
                && num(r, "dim") <= 4.0
                && num(r, "radius") <= 5.0
                && num(r, "param").abs() <= 2.0
                && (0.5..=5.0).contains(&num(r, "k_re"))
        },
        60.0,
    )
}

fn c3(runs: &BTreeMap<&str, Run>) -> Verdict {
    battery(
        runs,
        "weyl",
        50,
        |r| num(r, "value") <= 1e-6 && (0.2..=2.0).contains(&num(r, "k_im")),
        60.0,
    )
}

fn c4(runs: &BTreeMap<&str, Run>) -> Verdict {
    battery(runs, "herglotz", 20, |r| num(r, "value") >= -1e-8, 60.0)
}

fn c5(runs: &BTreeMap<&str, Run>) -> Verdict {
    let a = battery(runs, "pencil-jost", 50, |r| num(r, "value") <= 1e-7, f64::INFINITY);
    let b = battery(runs, "gronwall", 50, |r| num(r, "value") <= 1.0, f64::INFINITY);
    match (a, b) {
        (Ok(a), Ok(b)) => Ok(format!("D = J: {a}; Gronwall ratio: {b}")),
        (a, b) => Err(format!("D = J: {}; Gronwall ratio: {}", a.unwrap_or_else(|e| e), b.unwrap_or_else(|e| e))),
    }
}

fn c6(runs: &BTreeMap<&str, Run>) -> Verdict {
    let complex = family(runs, "krein")?.iter().filter(|r| num(r, "k_im") > 0.0).count();
    let v = battery(runs, "krein", 30, |r| num(r, "value") <= 1e-6, 60.0)?;
    check(complex > 0, format!("{v}, {complex} with complex k"))
}

fn c7(runs: &BTreeMap<&str, Run>) -> Verdict {
    let r = &runs["pencil_bound"];
    runtime(r, f64::INFINITY)?;
    let rows = read_csv(&r.dir.join("bound.csv"))?;
    let violations = rows.iter().filter(|r| num(r, "norm_psi") > num(r, "bound")).count();
    let worst = rows.iter().map(|r| num(r, "residual")).fold(0.0, f64::max);
    check(
        rows.len() == 100 && violations == 0 && worst <= 1e-10,
        format!("{} solves, {violations} violations, max residual {worst:e}", rows.len()),
    )
}

fn c8(runs: &BTreeMap<&str, Run>) -> Verdict {
    let r = &runs["combes_thomas"];
    let t = runtime(r, 120.0)?;
    let cfg = ExperimentConfig::load(&configs().join("combes_thomas.toml")).map_err(|e| e.to_string())?;
    let nodes = cfg.combes_thomas.as_ref().map(|c| c.nodes).unwrap_or(0);
    let rows = read_csv(&r.dir.join("fits.csv"))?;
    let mut bad = Vec::new();
    let mut ratios = Vec::new();
    let mut by: BTreeMap<(String, String), f64> = BTreeMap::new();
    for row in &rows {
        let (g, kim, r2) = (num(row, "gamma_fit"), num(row, "k_im"), num(row, "r_squared"));
        if !(g >= 0.5 * kim && r2 >= 0.95) {
            bad.push(format!("p{} Im k {kim}: gamma {g}, r2 {r2}", row["potential"]));
        }
        by.insert((row["potential"].clone(), row["k_im"].clone()), g);
    }
    let potentials: std::collections::BTreeSet<&String> = rows.iter().map(|r| &r["potential"]).collect();
    for p in &potentials {
        for (a, b) in [("5e-1", "1e0"), ("1e0", "2e0")] {
            match (by.get(&((*p).clone(), a.into())), by.get(&((*p).clone(), b.into()))) {
                (Some(ga), Some(gb)) => {
                    let ratio = gb / ga;
                    ratios.push(ratio);
                    if !(1.6..=2.4).contains(&ratio) {
                        bad.push(format!("p{p} ratio {ratio}"));
                    }
                }
                _ => bad.push(format!("p{p} missing Im k pair {a}/{b}")),
            }
        }
    }
    let rmin = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    let rmax = ratios.iter().cloned().fold(0.0, f64::max);
    check(
        nodes == 4096 && potentials.len() == 3 && rows.len() == 9 && bad.is_empty(),
        format!("{} fits on N = {nodes}, doubling ratios in [{rmin:.3}, {rmax:.3}], {t}{}", rows.len(), if bad.is_empty() { String::new() } else { format!("; {}", bad.join("; ")) }),
    )
}

fn c9(runs: &BTreeMap<&str, Run>) -> Verdict {
    let r = &runs["entropy_stabilization"];
    let t = runtime(r, 600.0)?;
    let rows = read_csv(&r.dir.join("entropy_vs_radius.csv"))?;
    let scans: Vec<(f64, f64)> = rows.iter().map(|r| (num(r, "radius"), num(r, "entropy"))).collect();
    let e50 = scans.iter().find(|s| s.0 == 50.0).map(|s| s.1).unwrap_or(f64::NAN);
    let e100 = scans.iter().find(|s| s.0 == 100.0).map(|s| s.1).unwrap_or(f64::NAN);
    let change = (e100 - e50).abs() / e50.abs();
    let n = read_csv(&r.dir.join("entropy_R100.csv"))?.len();
    check(
        change < 0.1 && e50 > -50.0 && e100 > -50.0 && n == 65 * 65,
        format!("entropy R=50 {e50:.6}, R=100 {e100:.6}, relative change {change:e}, {n} nodes, {t}"),
    )
}

fn c10(runs: &BTreeMap<&str, Run>) -> Verdict {
    battery(runs, "subharmonic", 20, |r| num(r, "value") >= -1e-4, f64::INFINITY)
}

fn c11(runs: &BTreeMap<&str, Run>) -> Verdict {
    let r = &runs["adjoint"];
    runtime(r, f64::INFINITY)?;
    let rows = read_csv(&r.dir.join("adjoint.csv"))?;
    let mut tails: BTreeMap<u64, Vec<(f64, f64)>> = BTreeMap::new();
    let mut worst = 0.0f64;
    for row in &rows {
        worst = worst.max(num(row, "conservation_residual"));
        tails.entry(row["run"].parse().unwrap()).or_default().push((num(row, "t"), num(row, "tail_derivative_l2")));
    }
    let monotone = tails.values().all(|v| v.windows(2).all(|w| w[1].0 > w[0].0 && w[1].1 < w[0].1));
    check(
        tails.len() == 20 && worst <= 1e-6 && monotone,
        format!("{} runs, max residual {worst:e}, tails decreasing: {monotone}", tails.len()),
    )
}

fn c12(runs: &BTreeMap<&str, Run>) -> Verdict {
    let r = &runs["twist"];
    let t = runtime(r, 600.0)?;
    let text = std::fs::read_to_string(r.dir.join("summary.json")).map_err(|e| e.to_string())?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let liminf = v["liminf_estimate"].as_f64().unwrap_or(f64::NAN);
    let cfg = ExperimentConfig::load(&configs().join("twist.toml")).map_err(|e| e.to_string())?;
    let p = cfg.twist.unwrap();
    let instance = p.alpha == 0.66 && p.gamma == 0.95 && p.k_re == 0.0 && p.k_im == 0.5 && p.xi == -2.0 && p.d == 20.0 && p.b == 32 && p.r_max == 1e4;
    check(
        instance && liminf >= 0.1,
        format!("liminf estimate {liminf:.6} over {} blocks, {t}", v["blocks"]),
    )
}

fn csv_files(dir: &Path) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map(|d| d.filter_map(|e| e.ok().map(|e| e.path())).collect())
        .unwrap_or_default();
    out.retain(|p| p.extension().is_some_and(|x| x == "csv"));
    out.sort();
    out
}

fn c13(a: &BTreeMap<&str, Run>, b: &BTreeMap<&str, Run>) -> Verdict {
    let mut compared = 0;
    let mut diffs = Vec::new();
    for name in SUITE {
        let (fa, fb) = (csv_files(&a[name].dir), csv_files(&b[name].dir));
        let na: Vec<_> = fa.iter().map(|p| p.file_name().unwrap().to_owned()).collect();
        let nb: Vec<_> = fb.iter().map(|p| p.file_name().unwrap().to_owned()).collect();
        if na != nb || na.is_empty() {
            diffs.push(format!("{name}: file lists differ"));
            continue;
        }
        for (x, y) in fa.iter().zip(&fb) {
            compared += 1;
            if std::fs::read(x).ok() != std::fs::read(y).ok() {
                diffs.push(format!("{}", x.display()));
            }
        }
    }
    check(
        diffs.is_empty() && compared > 0,
        format!("{compared} CSV files byte-identical at 1 vs 4 threads{}", if diffs.is_empty() { String::new() } else { format!("; differing: {}", diffs.join(", ")) }),
    )
}

fn main() -> ExitCode {
    let root = tempfile::tempdir().expect("temp dir");
    let first = run_suite(&root.path().join("threads1"), 1);
    let second = run_suite(&root.path().join("threads4"), 4);
    let criteria: Vec<(&str, Verdict)> = vec![
        ("free-case density", c1(&first)),
        ("scattering pair identity", c2(&first)),
        ("Weyl-type identity", c3(&first)),
        ("Herglotz positivity", c4(&first)),
        ("pencil/Jost consistency and Gronwall bound", c5(&first)),
        ("Krein transform equivalence", c6(&first)),
        ("pencil resolvent bound", c7(&first)),
        ("Combes-Thomas decay", c8(&first)),
        ("entropy stabilization", c9(&first)),
        ("subharmonic mean value", c10(&first)),
        ("adjoint conservation identity", c11(&first)),
        ("twist experiment", c12(&first)),
        ("reproducibility across threads", c13(&first, &second)),
    ];
    let mut failed = 0;
    for (i, (name, v)) in criteria.iter().enumerate() {
        match v {
            Ok(d) => println!("PASS {:>2} {name}: {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {d}", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
