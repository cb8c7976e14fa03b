//! Command-line front end.
//!
//! Configuration is a flat `key=value` file, overridden by flags (last
//! wins). Every run writes `config.txt`, the canonical echo of the parsed
//! configuration, next to its CSV/JSON outputs. Exit codes: 0 ok,
//! 1 bad configuration (nothing written), 2 no convergence or rank
//! deficiency, 3 numerical failure, 4 inconclusive statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use nalgebra::DMatrix;
use serde_json::{json, Value};

use crate::error::Error;
use crate::fluctuation::{covariance, FluctuationKernel};
use crate::models::{zoo, Model};
use crate::montecarlo::{self, SdeConfig};
use crate::secondvar;
use crate::shooting::{self, GeodesicSolution, ShootOptions};

pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NO_CONVERGENCE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_INCONCLUSIVE: i32 = 4;

/// Parsed run configuration. All keys always have a value; `x` defaults to
/// the origin of the model's chart.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Initial covector; when set it replaces shooting toward `y`.
    pub p0: Vec<f64>,
    /// RK4 steps for the Hamiltonian flow.
    pub steps: usize,
    /// Fluctuation / ensemble grid.
    pub grid: usize,
    pub eps: Vec<f64>,
    pub n: usize,
    pub seed: u64,
    pub rho: f64,
    pub out: PathBuf,
    pub threads: usize,
    /// (s, t) pairs for covariance blocks.
    pub pairs: Vec<(f64, f64)>,
    /// Euler steps of the Monte Carlo runs.
    pub sde_steps: usize,
    /// Intervals of the discretized second variation.
    pub qn: usize,
    /// Standard-error multiple in the verify-clt verdict.
    pub se_mult: f64,
    pub starts: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: String::new(),
            x: Vec::new(),
            y: Vec::new(),
            p0: Vec::new(),
            steps: 1000,
            grid: 16,
            eps: vec![0.05],
            n: 10_000,
            seed: 0,
            rho: 0.5,
            out: PathBuf::from("out"),
            threads: 0,
            pairs: vec![(0.25, 0.75), (0.5, 0.5)],
            sde_steps: 400,
            qn: 32,
            se_mult: 4.0,
            starts: ShootOptions::default().starts,
        }
    }
}

pub const KEYS: [&str; 17] = [
    "eps", "grid", "model", "n", "out", "p0", "pairs", "qn", "rho", "sde_steps", "se_mult", "seed", "starts",
    "steps", "threads", "x", "y",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.trim().parse().map_err(|_| ConfigError(format!("{key}: cannot parse '{v}'")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>, ConfigError> {
    let v = v.trim();
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_num::<f64>(key, s)).collect()
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "model" => self.model = value.trim().to_string(),
            "x" => self.x = parse_list(key, value)?,
            "y" => self.y = parse_list(key, value)?,
            "p0" => self.p0 = parse_list(key, value)?,
            "steps" => self.steps = parse_num(key, value)?,
            "grid" => self.grid = parse_num(key, value)?,
            "eps" => self.eps = parse_list(key, value)?,
            "n" => self.n = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "rho" => self.rho = parse_num(key, value)?,
            "out" => self.out = PathBuf::from(value.trim()),
            "threads" => self.threads = parse_num(key, value)?,
            "pairs" => {
                self.pairs = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|p| {
                        let (a, b) = p
                            .split_once(':')
                            .ok_or_else(|| ConfigError(format!("pairs: '{p}' is not s:t")))?;
                        Ok((parse_num(key, a)?, parse_num(key, b)?))
                    })
                    .collect::<Result<_, ConfigError>>()?
            }
            "sde_steps" => self.sde_steps = parse_num(key, value)?,
            "qn" => self.qn = parse_num(key, value)?,
            "se_mult" => self.se_mult = parse_num(key, value)?,
            "starts" => self.starts = parse_num(key, value)?,
            _ => return Err(ConfigError(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Parses a `key=value` text; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("line {}: expected key=value", no + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Sorted `key=value` lines; parsing them gives back the same config.
    pub fn canonical(&self) -> String {
        let mut m = BTreeMap::new();
        m.insert("model", self.model.clone());
        m.insert("x", fmt_list(&self.x));
        m.insert("y", fmt_list(&self.y));
        m.insert("p0", fmt_list(&self.p0));
        m.insert("steps", self.steps.to_string());
        m.insert("grid", self.grid.to_string());
        m.insert("eps", fmt_list(&self.eps));
        m.insert("n", self.n.to_string());
        m.insert("seed", self.seed.to_string());
        m.insert("rho", self.rho.to_string());
        m.insert("out", self.out.display().to_string());
        m.insert("threads", self.threads.to_string());
        m.insert("pairs", self.pairs.iter().map(|(s, t)| format!("{s}:{t}")).collect::<Vec<_>>().join(","));
        m.insert("sde_steps", self.sde_steps.to_string());
        m.insert("qn", self.qn.to_string());
        m.insert("se_mult", self.se_mult.to_string());
        m.insert("starts", self.starts.to_string());
        let mut s = String::new();
        for (k, v) in m {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Resolves the model and checks everything a subcommand needs.
    pub fn resolve(&mut self, cmd: Command) -> Result<Model, ConfigError> {
        let model = zoo::by_name(&self.model)
            .ok_or_else(|| ConfigError(format!("unknown model '{}'", self.model)))?;
        let d = model.d;
        if self.x.is_empty() {
            self.x = vec![0.0; d];
        }
        let dim = |name: &str, v: &[f64]| {
            if !v.is_empty() && v.len() != d {
                Err(ConfigError(format!("{name} has {} entries, model dimension is {d}", v.len())))
            } else {
                Ok(())
            }
        };
        dim("x", &self.x)?;
        dim("y", &self.y)?;
        dim("p0", &self.p0)?;
        let all = self.x.iter().chain(&self.y).chain(&self.p0).chain(&self.eps);
        if all.copied().any(|v| !v.is_finite()) {
            return Err(ConfigError("non-finite coordinate".into()));
        }
        if self.y.is_empty() && self.p0.is_empty() {
            return Err(ConfigError("either y or p0 is required".into()));
        }
        if cmd == Command::Geodesic && self.y.is_empty() {
            return Err(ConfigError("geodesic needs y".into()));
        }
        if self.steps < 2 || self.qn < 2 || self.n == 0 || self.starts == 0 {
            return Err(ConfigError("steps, qn, n and starts must be positive (steps, qn ≥ 2)".into()));
        }
        if self.eps.is_empty() || self.eps.iter().any(|&e| e <= 0.0) {
            return Err(ConfigError("eps must be a non-empty list of positive values".into()));
        }
        if !(self.rho > 0.0) || !(self.se_mult > 0.0) {
            return Err(ConfigError("rho and se_mult must be positive".into()));
        }
        if self.grid == 0 {
            return Err(ConfigError("grid must be positive".into()));
        }
        for &(s, t) in &self.pairs {
            if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&t) {
                return Err(ConfigError(format!("pair {s}:{t} outside [0,1]")));
            }
        }
        if matches!(cmd, Command::VerifyClt | Command::Varadhan) {
            self.sde_config(self.eps[0]).validate().map_err(|e| ConfigError(e.to_string()))?;
        }
        Ok(model)
    }

    pub fn sde_config(&self, eps: f64) -> SdeConfig {
        SdeConfig { eps, steps: self.sde_steps, n: self.n, seed: self.seed, rho: self.rho, grid: self.grid }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Minimizing geodesic from x to y.
    Geodesic,
    /// Conjugate points and cut-locus classification.
    Conjugate,
    /// Spectrum of the second variation.
    Qspec,
    /// Small-time heat-kernel constant.
    HeatConst,
    /// Samples of the limiting bridge fluctuations.
    Fluctuate,
    /// Bridge-ensemble covariances against the limiting covariance.
    VerifyClt,
    /// ε·log p̂ against −d²/2.
    Varadhan,
}

#[derive(Debug, Parser)]
#[command(name = "subrift", version, about = "Sub-Riemannian geodesics, heat-kernel constants and bridge fluctuations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// key=value configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub model: Option<String>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub x: Option<String>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub y: Option<String>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub p0: Option<String>,
    #[arg(long, global = true)]
    pub eps: Option<String>,
    #[arg(long, global = true)]
    pub n: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<String>,
    #[arg(long, global = true)]
    pub rho: Option<String>,
    #[arg(long, global = true)]
    pub grid: Option<String>,
    #[arg(long, global = true)]
    pub steps: Option<String>,
    #[arg(long, global = true)]
    pub out: Option<String>,
    #[arg(long, global = true)]
    pub threads: Option<String>,
    /// Any other key, as key=value; repeatable, last wins.
    #[arg(long = "set", global = true)]
    pub set: Vec<String>,
}

/// Builds the configuration: file, then SUBRIFT_SEED, then flags.
pub fn build_config(cli: &Cli, env_seed: Option<String>) -> Result<RunConfig, ConfigError> {
    let mut c = RunConfig::default();
    if let Some(p) = &cli.config {
        let text = std::fs::read_to_string(p).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?;
        c.apply_text(&text)?;
    }
    if let Some(s) = env_seed {
        c.set("seed", &s)?;
    }
    let flags = [
        ("model", &cli.model),
        ("x", &cli.x),
        ("y", &cli.y),
        ("p0", &cli.p0),
        ("eps", &cli.eps),
        ("n", &cli.n),
        ("seed", &cli.seed),
        ("rho", &cli.rho),
        ("grid", &cli.grid),
        ("steps", &cli.steps),
        ("out", &cli.out),
        ("threads", &cli.threads),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            c.set(k, v)?;
        }
    }
    for kv in &cli.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| ConfigError(format!("--set '{kv}' is not key=value")))?;
        c.set(k.trim(), v)?;
    }
    Ok(c)
}

/// A failed run: exit code plus message.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NoConvergence { .. } | Error::RankDeficiency { .. } => EXIT_NO_CONVERGENCE,
            Error::Inconclusive(_) | Error::ZeroAcceptance => EXIT_INCONCLUSIVE,
            _ => EXIT_NUMERIC,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure { code: EXIT_NUMERIC, message: e.to_string() }
    }
}

type Run = std::result::Result<(), Failure>;

fn g17(v: f64) -> String {
    format!("{v:.16e}")
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn write_json(dir: &Path, name: &str, v: &Value) -> std::io::Result<()> {
    let mut s = serde_json::to_string_pretty(v).expect("json values serialize");
    s.push('\n');
    std::fs::write(dir.join(name), s)
}

fn write_csv(dir: &Path, name: &str, header: &[String], body: impl Iterator<Item = Vec<String>>) -> std::io::Result<()> {
    let mut s = header.join(",");
    s.push('\n');
    for r in body {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    std::fs::write(dir.join(name), s)
}

fn solution(model: &Model, c: &RunConfig) -> Result<GeodesicSolution, Error> {
    if !c.p0.is_empty() {
        return GeodesicSolution::from_covector(model, &c.x, &c.p0, c.steps);
    }
    let o = ShootOptions { starts: c.starts, steps: c.steps, seed: c.seed, ..Default::default() };
    shooting::solve_geodesic(model, &c.x, &c.y, &o)
}

fn discretized(model: &Model, sol: &GeodesicSolution, n: usize) -> Result<secondvar::DiscreteGeodesic, Error> {
    secondvar::discretize(model, sol, n).or_else(|_| secondvar::discretize_free(model, sol, n))
}

fn cmd_geodesic(model: &Model, c: &RunConfig) -> Run {
    let sol = match solution(model, c) {
        Ok(s) => s,
        Err(Error::NoConvergence { candidates, best_residual }) => {
            let v = json!({
                "status": "no_convergence",
                "model": model.name,
                "candidates": candidates,
                "best_residual": best_residual,
            });
            write_json(&c.out, "geodesic.json", &v)?;
            return Err(Error::NoConvergence { candidates, best_residual }.into());
        }
        Err(e) => return Err(e.into()),
    };
    let v = json!({
        "status": "ok",
        "model": model.name,
        "x": sol.x.as_slice(),
        "y": sol.y.as_slice(),
        "lambda0": {"x": sol.lambda0.x.as_slice(), "p": sol.lambda0.p.as_slice()},
        "distance": sol.distance,
        "energy": sol.energy,
        "residual": sol.residual,
        "multiplicity": sol.multiplicity,
        "minimal": sol.minimal,
    });
    write_json(&c.out, "geodesic.json", &v)?;
    let mut header = vec!["t".to_string()];
    header.extend((1..=model.d).map(|i| format!("x_{i}")));
    let body = sol.path.t.iter().zip(&sol.path.points).map(|(t, p)| {
        std::iter::once(g17(*t)).chain(p.x.iter().map(|v| g17(*v))).collect()
    });
    write_csv(&c.out, "geodesic.csv", &header, body)?;
    Ok(())
}

fn cmd_conjugate(model: &Model, c: &RunConfig) -> Run {
    let sol = solution(model, c)?;
    let report = shooting::classify(model, &sol);
    let mut v = serde_json::to_value(&report).expect("report serializes");
    let spectrum = discretized(model, &sol, c.qn).and_then(|g| secondvar::q_spectrum(model, &g));
    let (mu_min, note) = match spectrum {
        Ok(s) => (Some(s.mu_min()), None),
        Err(e @ Error::RankDeficiency { .. }) => {
            v["mu_min"] = Value::Null;
            v["note"] = json!(format!("RankDeficiency: {e}"));
            write_json(&c.out, "conjugate.json", &v)?;
            return Err(e.into());
        }
        Err(e) => (None, Some(e.to_string())),
    };
    v["mu_min"] = json!(mu_min);
    v["outside_cut_locus"] = json!(report.outside_cut_locus && mu_min.is_some_and(|m| m > 0.0));
    if let Some(n) = note {
        v["note"] = json!(n);
    }
    write_json(&c.out, "conjugate.json", &v)?;
    Ok(())
}

fn cmd_qspec(model: &Model, c: &RunConfig) -> Run {
    let sol = solution(model, c)?;
    let geo = discretized(model, &sol, c.qn)?;
    let s = secondvar::q_spectrum(model, &geo)?;
    let v = json!({
        "model": model.name,
        "intervals": c.qn,
        "kernel_dim": s.mu.len(),
        "mu_min": s.mu_min(),
        "kkt_residual": geo.kkt_residual,
        "tail_deviation": secondvar::tail_deviation(&s.mu, 4 * model.d),
    });
    write_json(&c.out, "qspec.json", &v)?;
    let header = vec!["index".to_string(), "mu".to_string()];
    write_csv(&c.out, "qspec.csv", &header, s.mu.iter().enumerate().map(|(i, m)| vec![i.to_string(), g17(*m)]))?;
    Ok(())
}

fn cmd_heat_const(model: &Model, c: &RunConfig) -> Run {
    let sol = solution(model, c)?;
    let h = secondvar::heat_constant(model, &sol, c.qn)?;
    let mut v = serde_json::to_value(&h).expect("heat constant serializes");
    v["model"] = json!(model.name);
    v["intervals"] = json!(c.qn);
    write_json(&c.out, "heat_const.json", &v)?;
    Ok(())
}

fn cmd_fluctuate(model: &Model, c: &RunConfig) -> Run {
    let sol = solution(model, c)?;
    let k = FluctuationKernel::new(model, &sol, c.grid)?;
    let paths = k.sample(c.n, c.seed);
    let mut header = vec!["sample_id".to_string(), "t".to_string()];
    header.extend((1..=model.d).map(|i| format!("v_{i}")));
    let body = paths.iter().enumerate().flat_map(|(id, p)| {
        k.times.iter().enumerate().map(move |(r, t)| {
            [id.to_string(), g17(*t)].into_iter().chain(p.row(r).iter().map(|v| g17(*v))).collect()
        })
    });
    write_csv(&c.out, "fluctuate.csv", &header, body)?;
    let blocks = c
        .pairs
        .iter()
        .map(|&(s, t)| Ok(json!({"s": s, "t": t, "c": rows(&covariance(model, &sol, s, t)?)})))
        .collect::<Result<Vec<Value>, Error>>()?;
    let v = json!({
        "model": model.name,
        "grid": c.grid,
        "samples": c.n,
        "jitter": k.jitter,
        "min_eigenvalue": k.min_eigenvalue,
        "blocks": blocks,
    });
    write_json(&c.out, "fluctuate.json", &v)?;
    Ok(())
}

fn cmd_verify_clt(model: &Model, c: &RunConfig) -> Run {
    let sol = solution(model, c)?;
    let cfg = c.sde_config(c.eps[0]);
    let ens = montecarlo::bridge_ensemble(model, &sol, &cfg)?;
    let est = montecarlo::empirical_covariance(&ens, &c.pairs)?;
    let mut out = Vec::new();
    let mut lines = Vec::new();
    let mut all = true;
    for e in &est {
        let oracle = covariance(model, &sol, e.s, e.t)?;
        let band = if ens.exact { 0.0 } else { montecarlo::clt_band(&sol, e.s, e.t, ens.rho)? };
        let corrected = montecarlo::window_corrected_covariance(model, &sol, &ens, e.s, e.t)?;
        let mut pass = true;
        let mut max_z: f64 = 0.0;
        let mut corrected_z: f64 = 0.0;
        for i in 0..model.d {
            for j in 0..model.d {
                let err = (e.estimate[i][j] - oracle[(i, j)]).abs();
                let ok = err <= c.se_mult * e.se[i][j] + band;
                pass &= ok;
                if e.se[i][j] > 0.0 {
                    max_z = max_z.max(err / e.se[i][j]);
                    corrected_z = corrected_z.max((e.estimate[i][j] - corrected[(i, j)]).abs() / e.se[i][j]);
                }
                lines.push(vec![
                    g17(e.s),
                    g17(e.t),
                    i.to_string(),
                    j.to_string(),
                    g17(e.estimate[i][j]),
                    g17(e.se[i][j]),
                    g17(oracle[(i, j)]),
                    g17(band),
                    g17(corrected[(i, j)]),
                    (ok as u8).to_string(),
                ]);
            }
        }
        all &= pass;
        out.push(json!({
            "s": e.s, "t": e.t,
            "estimate": e.estimate, "se": e.se, "oracle": rows(&oracle),
            "band": band, "max_z": max_z,
            "window_corrected": rows(&corrected), "window_corrected_max_z": corrected_z,
            "pass": pass,
        }));
    }
    let v = json!({
        "model": model.name,
        "eps": cfg.eps,
        "rho": ens.rho,
        "se_mult": c.se_mult,
        "exact_bridge": ens.exact,
        "proposals": ens.proposals,
        "accepted": ens.len(),
        "acceptance_rate": ens.acceptance_rate,
        "dropped": ens.dropped,
        "pairs": out,
        "verdict": if all { "pass" } else { "fail" },
    });
    write_json(&c.out, "verify_clt.json", &v)?;
    let header: Vec<String> =
        ["s", "t", "i", "j", "estimate", "se", "oracle", "band", "window_corrected", "pass"].iter().map(|s| s.to_string()).collect();
    write_csv(&c.out, "verify_clt.csv", &header, lines.into_iter())?;
    Ok(())
}

fn cmd_varadhan(model: &Model, c: &RunConfig) -> Run {
    let sol = solution(model, c)?;
    let table = montecarlo::varadhan_estimate(model, &sol, &c.eps, &c.sde_config(c.eps[0]))?;
    let analytic = |eps: f64| model.flat.then(|| montecarlo::gaussian_log_density(eps, sol.distance, model.d));
    let header: Vec<String> =
        ["eps", "value", "se", "limit", "analytic", "hits", "r_kde"].iter().map(|s| s.to_string()).collect();
    let body = table.iter().map(|r| {
        vec![
            g17(r.eps),
            g17(r.value),
            g17(r.se),
            g17(r.limit),
            analytic(r.eps).map(g17).unwrap_or_default(),
            r.hits.to_string(),
            g17(r.r_kde),
        ]
    });
    write_csv(&c.out, "varadhan.csv", &header, body)?;
    let rows: Vec<Value> = table
        .iter()
        .map(|r| {
            let mut v = serde_json::to_value(r).expect("row serializes");
            v["analytic"] = json!(analytic(r.eps));
            v
        })
        .collect();
    let v = json!({"model": model.name, "distance": sol.distance, "rows": rows});
    write_json(&c.out, "varadhan.json", &v)?;
    Ok(())
}

/// Runs one invocation and returns the process exit code.
pub fn run(cli: Cli, env_seed: Option<String>) -> i32 {
    let mut cfg = match build_config(&cli, env_seed) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return EXIT_CONFIG;
        }
    };
    let model = match cfg.resolve(cli.command) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("config error: {e}");
            return EXIT_CONFIG;
        }
    };
    if cfg.threads > 0 {
        // a second global init in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    let res = std::fs::create_dir_all(&cfg.out)
        .and_then(|_| std::fs::write(cfg.out.join("config.txt"), cfg.canonical()))
        .map_err(Failure::from)
        .and_then(|_| match cli.command {
            Command::Geodesic => cmd_geodesic(&model, &cfg),
            Command::Conjugate => cmd_conjugate(&model, &cfg),
            Command::Qspec => cmd_qspec(&model, &cfg),
            Command::HeatConst => cmd_heat_const(&model, &cfg),
            Command::Fluctuate => cmd_fluctuate(&model, &cfg),
            Command::VerifyClt => cmd_verify_clt(&model, &cfg),
            Command::Varadhan => cmd_varadhan(&model, &cfg),
        });
    match res {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

pub fn main_from_env() -> i32 {
    let cli = Cli::parse();
    run(cli, std::env::var("SUBRIFT_SEED").ok())
}
