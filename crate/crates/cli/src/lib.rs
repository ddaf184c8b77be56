//! Command-line driver for the dichotomy pipeline.
//!
//! Every command writes its artifacts under `--out`:
//!
//! ```text
//! manifest.json
//! spectrum.json  classification.csv
//! blocks/blocks.json  blocks/S.csv  blocks/S_inv.csv  blocks/B.csv
//! nf/normalform.json  nf/h_<k>.csv  nf/g_<k>.csv
//! verify.json
//! ```
//!
//! All flags can also be set through `NUDICH_<FLAG>` environment variables
//! (`NUDICH_WINDOW=-20,20`, `NUDICH_TAIL_TOL=1e-8`, ...).

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use nalgebra::DMatrix;
use serde_json::{json, Value};

use nudich::builtin::{example, example_names};
use nudich::documents::{classification_csv, coefficient_grid_csv, matrix_grid_csv, normal_form_document, reduction_document, spectrum_document};
use nudich::normalform::{default_residual_check, MAX_DEGREE};
use nudich::reduction::similarity_defect;
use nudich::report::{parse_grid_csv, to_json, write_atomic};
use nudich::spectrum::Verdict;
use nudich::{analyze, normalize, parse_system, reduce, Analysis, BlockSystem, NormalFormResult, PipelineOptions, RunManifest, SpectrumResult, SystemSpec};

/// Stored and recomputed artifacts may differ by this much.
pub const REPRODUCTION_TOL: f64 = 1e-9;
pub const INVERSE_TOL: f64 = 1e-8;
pub const SIMILARITY_TOL: f64 = 1e-5;
/// Allowed shortfall of the residual slope.
pub const SLOPE_MARGIN: f64 = 0.2;
/// Residuals below this count as exact.
pub const EXACT_RESIDUAL: f64 = 1e-12;

#[derive(Debug, Parser)]
#[command(name = "nudich", version, about = "Nonuniform dichotomy spectra, block reductions and normal forms")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// System config file.
    #[arg(long, global = true, env = "NUDICH_CONFIG", conflicts_with = "example")]
    pub config: Option<PathBuf>,

    /// Built-in example system.
    #[arg(long, global = true, env = "NUDICH_EXAMPLE")]
    pub example: Option<String>,

    /// Time window, as `T0 T1` or `T0,T1`.
    #[arg(long, global = true, env = "NUDICH_WINDOW", num_args = 1..=2, value_names = ["T0", "T1"],
          value_delimiter = ',', allow_negative_numbers = true)]
    pub window: Option<Vec<f64>>,

    /// Output directory.
    #[arg(long, global = true, env = "NUDICH_OUT", default_value = "nudich-out")]
    pub out: PathBuf,

    #[arg(long, global = true, env = "NUDICH_TOL_INTEGRATOR")]
    pub tol_integrator: Option<f64>,

    /// Resolution of spectral interval endpoints.
    #[arg(long, global = true, env = "NUDICH_TOL_GAMMA")]
    pub tol_gamma: Option<f64>,

    /// Tail tolerance of the truncated normal-form integrals.
    #[arg(long, global = true, env = "NUDICH_TAIL_TOL")]
    pub tail_tol: Option<f64>,

    /// Highest normal-form degree.
    #[arg(long, global = true, env = "NUDICH_DEGREE")]
    pub degree: Option<u32>,

    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true, env = "NUDICH_THREADS")]
    pub threads: Option<usize>,

    /// Seed for randomized sampling.
    #[arg(long, global = true, env = "NUDICH_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scan the dichotomy spectrum.
    Spectrum,
    /// Block-diagonalize along the spectral gaps.
    Reduce,
    /// Compute the normal form up to `--degree`.
    Normalform,
    /// Check stored artifacts against a fresh computation.
    Verify {
        /// Artifact directory; defaults to `--out`.
        dir: Option<PathBuf>,
    },
    /// List the built-in example systems.
    Examples,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// The run finished but some verdict is indeterminate or unbounded.
    Indeterminate,
}

impl Outcome {
    pub fn code(self) -> i32 {
        match self {
            Outcome::Success => 0,
            Outcome::Indeterminate => 2,
        }
    }
}

struct Loaded {
    system: Arc<SystemSpec>,
    label: String,
}

fn load_system(config: Option<&Path>, example_name: Option<&str>) -> anyhow::Result<Loaded> {
    match (config, example_name) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
            let system = parse_system(&text).with_context(|| format!("in config {}", path.display()))?;
            Ok(Loaded { system: Arc::new(system), label: path.display().to_string() })
        }
        (None, Some(name)) => {
            let ex = example(name).ok_or_else(|| anyhow!("unknown example '{name}' (known: {})", example_names().join(", ")))?;
            Ok(Loaded { system: Arc::new(ex.system()?), label: format!("example:{name}") })
        }
        (None, None) => bail!("one of --config or --example is required"),
    }
}

fn load_label(label: &str) -> anyhow::Result<Loaded> {
    match label.strip_prefix("example:") {
        Some(name) => load_system(None, Some(name)),
        None => load_system(Some(Path::new(label)), None),
    }
}

fn options(cli: &Cli) -> anyhow::Result<PipelineOptions> {
    let mut opts = PipelineOptions::default();
    if let Some(w) = &cli.window {
        if w.len() != 2 || !(w[0] < w[1]) || !w.iter().all(|v| v.is_finite()) {
            bail!("--window needs two finite times T0 < T1");
        }
        opts.window = (w[0], w[1]);
    }
    let positive = |name: &str, v: Option<f64>, slot: &mut f64| -> anyhow::Result<()> {
        if let Some(v) = v {
            if !(v > 0.0 && v.is_finite()) {
                bail!("{name} must be positive");
            }
            *slot = v;
        }
        Ok(())
    };
    positive("--tol-integrator", cli.tol_integrator, &mut opts.tolerances.integrator)?;
    positive("--tol-gamma", cli.tol_gamma, &mut opts.tolerances.gamma)?;
    positive("--tail-tol", cli.tail_tol, &mut opts.tolerances.tail)?;
    if let Some(d) = cli.degree {
        if d > MAX_DEGREE {
            bail!("degree {d} exceeds the cap {MAX_DEGREE}");
        }
        if d < 2 {
            bail!("degree must be at least 2");
        }
        opts.degree = d;
    }
    if let Some(s) = cli.seed {
        opts.seed = s;
    }
    Ok(opts)
}

/// Files of one run, written together once every stage succeeded.
#[derive(Default)]
struct Artifacts {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Artifacts {
    fn add(&mut self, path: PathBuf, contents: impl Into<Vec<u8>>) {
        self.files.push((path, contents.into()));
    }

    fn commit(self) -> anyhow::Result<()> {
        for (path, bytes) in self.files {
            write_atomic(&path, &bytes).with_context(|| format!("cannot write {}", path.display()))?;
        }
        Ok(())
    }
}

/// Indeterminate points inside a reported interval are spectral points;
/// anywhere else they leave the spectrum undecided.
fn spectrum_outcome(spec: &SpectrumResult) -> Outcome {
    let indeterminate = spec
        .points
        .iter()
        .any(|p| p.verdict == Verdict::Indeterminate && !spec.intervals.iter().any(|iv| iv.contains(p.gamma)));
    if indeterminate || !spec.is_bounded() {
        Outcome::Indeterminate
    } else {
        Outcome::Success
    }
}

fn describe_spectrum(spec: &SpectrumResult) {
    for (i, iv) in spec.intervals.iter().enumerate() {
        println!("interval {}: [{:.6}, {:.6}], dimension {}", i + 1, iv.lo, iv.hi, spec.manifold_dims.get(i + 1).copied().unwrap_or(0));
    }
    if spec.unbounded_low || spec.unbounded_high {
        println!("spectrum is unbounded within the scanned range");
    }
    let mu = spec.max_nonuniformity();
    println!("max nonuniformity {mu:.4e}");
}

fn add_spectrum(art: &mut Artifacts, out: &Path, manifest: &RunManifest, an: &Analysis) {
    art.add(out.join("spectrum.json"), to_json(&spectrum_document(manifest, &an.spectrum)));
    art.add(out.join("classification.csv"), classification_csv(&an.spectrum));
}

fn add_blocks(art: &mut Artifacts, out: &Path, manifest: &RunManifest, bs: &BlockSystem) {
    let dir = out.join("blocks");
    let t = &bs.transform;
    art.add(dir.join("blocks.json"), to_json(&reduction_document(manifest, bs)));
    art.add(dir.join("S.csv"), matrix_grid_csv("S", &t.times, &t.s));
    art.add(dir.join("S_inv.csv"), matrix_grid_csv("S_inv", &t.times, &t.s_inv));
    art.add(dir.join("B.csv"), matrix_grid_csv("B", &t.times, &bs.b));
}

fn add_normal_form(art: &mut Artifacts, out: &Path, manifest: &RunManifest, nf: &NormalFormResult) {
    let dir = out.join("nf");
    art.add(dir.join("normalform.json"), to_json(&normal_form_document(manifest, nf, None)));
    for d in &nf.degrees {
        if let Some(csv) = coefficient_grid_csv("h", nf, d.k, false) {
            art.add(dir.join(format!("h_{}.csv", d.k)), csv);
        }
        if let Some(csv) = coefficient_grid_csv("g", nf, d.k, true) {
            art.add(dir.join(format!("g_{}.csv", d.k)), csv);
        }
    }
}

fn manifest_for(command: &str, label: &str, opts: &PipelineOptions, out: &Path) -> RunManifest {
    RunManifest::new(command, label, opts.window, opts.tolerances.clone(), &out.display().to_string(), opts.seed)
}

fn cmd_pipeline(cli: &Cli, stage: &Command) -> anyhow::Result<Outcome> {
    let opts = options(cli)?;
    let loaded = load_system(cli.config.as_deref(), cli.example.as_deref())?;
    let name = match stage {
        Command::Spectrum => "spectrum",
        Command::Reduce => "reduce",
        _ => "normalform",
    };
    let manifest = manifest_for(name, &loaded.label, &opts, &cli.out);
    let mut art = Artifacts::default();
    art.add(cli.out.join("manifest.json"), to_json(&manifest));

    let an = analyze(loaded.system.clone(), &opts)?;
    describe_spectrum(&an.spectrum);
    add_spectrum(&mut art, &cli.out, &manifest, &an);
    let outcome = spectrum_outcome(&an.spectrum);
    if matches!(stage, Command::Spectrum) {
        art.commit()?;
        return Ok(outcome);
    }
    if !an.spectrum.is_bounded() {
        art.commit()?;
        eprintln!("spectrum is unbounded in the scanned range; reduction skipped");
        return Ok(Outcome::Indeterminate);
    }

    let bs = reduce(&an, &opts)?;
    if bs.blocks.len() == 1 {
        println!("single spectral interval: the reduction is the identity");
    } else {
        let d = &bs.diagnostics;
        println!("blocks {:?}, coupling {:.3e}, similarity defect {:.3e}", bs.block_sizes(), d.coupling, d.similarity_defect);
    }
    add_blocks(&mut art, &cli.out, &manifest, &bs);
    if matches!(stage, Command::Reduce) {
        art.commit()?;
        return Ok(outcome);
    }

    let nf = normalize(&an, &bs, &opts)?;
    for d in &nf.degrees {
        let resonant = d.table.entries.iter().filter(|e| e.resonant).count();
        println!("degree {}: {} of {} blocks resonant, valid region {:?}", d.k, resonant, d.table.entries.len(), d.valid);
    }
    println!("status {} (σ/ϱ = {:.4})", nf.theorem.status, nf.theorem.ratio);
    for w in &nf.warnings {
        eprintln!("warning: {w}");
    }
    add_normal_form(&mut art, &cli.out, &manifest, &nf);
    art.commit()?;
    Ok(outcome)
}

#[derive(serde::Serialize)]
struct Check {
    name: String,
    value: f64,
    tolerance: f64,
    passed: bool,
}

impl Check {
    fn at_most(name: impl Into<String>, value: f64, tolerance: f64) -> Check {
        Check { name: name.into(), value, tolerance, passed: value <= tolerance }
    }
}

fn read_json(path: &Path) -> anyhow::Result<Value> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{} is not valid JSON", path.display()))
}

fn read_matrices(path: &Path, n: usize) -> anyhow::Result<(Vec<f64>, Vec<DMatrix<f64>>)> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let (header, rows) = parse_grid_csv(&text).map_err(|e| anyhow!("{}: {e}", path.display()))?;
    if header.len() != n * n {
        bail!("{}: expected {} matrix columns, found {}", path.display(), n * n, header.len());
    }
    let times = rows.iter().map(|r| r.0).collect();
    let mats = rows.into_iter().map(|(_, v)| DMatrix::from_row_slice(n, n, &v)).collect();
    Ok((times, mats))
}

fn read_grid(path: &Path) -> anyhow::Result<Vec<(f64, Vec<f64>)>> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    parse_grid_csv(&text).map(|(_, rows)| rows).map_err(|e| anyhow!("{}: {e}", path.display()))
}

fn max_relative(stored: &[DMatrix<f64>], fresh: &[DMatrix<f64>]) -> f64 {
    stored.iter().zip(fresh).map(|(a, b)| (a - b).amax() / (1.0 + b.amax())).fold(0.0, f64::max)
}

fn cmd_verify(cli: &Cli, dir: &Path) -> anyhow::Result<Outcome> {
    let manifest: RunManifest = serde_json::from_value(read_json(&dir.join("manifest.json"))?).context("manifest.json has an unexpected shape")?;
    let loaded = match (cli.config.as_deref(), cli.example.as_deref()) {
        (None, None) => load_label(&manifest.config)?,
        (c, e) => load_system(c, e)?,
    };
    let nf_doc = dir.join("nf/normalform.json");
    let has_blocks = dir.join("blocks").is_dir();
    let has_nf = nf_doc.exists();
    let stored_nf = if has_nf { Some(read_json(&nf_doc)?) } else { None };
    let degree = match &stored_nf {
        Some(v) => v["max_degree"].as_u64().ok_or_else(|| anyhow!("{} lacks max_degree", nf_doc.display()))? as u32,
        None => PipelineOptions::default().degree,
    };
    let opts = PipelineOptions {
        window: (manifest.window[0], manifest.window[1]),
        tolerances: manifest.tolerances.clone(),
        degree,
        gamma_range: None,
        seed: manifest.seed,
    };
    let stored_spectrum = read_json(&dir.join("spectrum.json"))?;

    let mut checks = Vec::new();
    let an = analyze(loaded.system.clone(), &opts)?;
    let stored_iv = stored_spectrum["spectrum"]["intervals"].as_array().ok_or_else(|| anyhow!("spectrum.json lacks intervals"))?;
    let mut iv_diff = if stored_iv.len() == an.spectrum.intervals.len() { 0.0 } else { f64::INFINITY };
    for (s, f) in stored_iv.iter().zip(&an.spectrum.intervals) {
        let lo = s["lo"].as_f64().unwrap_or(f64::NAN);
        let hi = s["hi"].as_f64().unwrap_or(f64::NAN);
        let d = (lo - f.lo).abs().max((hi - f.hi).abs());
        iv_diff = if d.is_nan() { f64::INFINITY } else { iv_diff.max(d) };
    }
    checks.push(Check::at_most("spectrum reproduction", iv_diff, REPRODUCTION_TOL));

    let mut residual = None;
    let mut outcome = spectrum_outcome(&an.spectrum);
    if has_blocks {
        let n = loaded.system.n;
        let (_, s) = read_matrices(&dir.join("blocks/S.csv"), n)?;
        let (_, s_inv) = read_matrices(&dir.join("blocks/S_inv.csv"), n)?;
        let (_, b) = read_matrices(&dir.join("blocks/B.csv"), n)?;
        read_json(&dir.join("blocks/blocks.json"))?;
        let inv = s.iter().zip(&s_inv).map(|(a, ai)| (a * ai - DMatrix::identity(n, n)).amax()).fold(0.0, f64::max);
        checks.push(Check::at_most("stored S times S_inv", inv, INVERSE_TOL));
        let bs = reduce(&an, &opts)?;
        let t = &bs.transform;
        let repro = if s.len() == t.s.len() && b.len() == bs.b.len() {
            max_relative(&s, &t.s).max(max_relative(&s_inv, &t.s_inv)).max(max_relative(&b, &bs.b))
        } else {
            f64::INFINITY
        };
        checks.push(Check::at_most("transform reproduction", repro, REPRODUCTION_TOL));
        let sim = similarity_defect(&an.evolution, &bs, 32, opts.seed)?;
        checks.push(Check::at_most("similarity identity", sim, SIMILARITY_TOL));

        if has_nf {
            let nf = normalize(&an, &bs, &opts)?;
            let mut coeff = 0.0f64;
            for d in &nf.degrees {
                for (tag, use_g) in [("h", false), ("g", true)] {
                    let rows = read_grid(&dir.join(format!("nf/{tag}_{}.csv", d.k)))?;
                    let fresh = if use_g { &d.g.values } else { &d.h.values };
                    if rows.len() != fresh.len() {
                        coeff = f64::INFINITY;
                        continue;
                    }
                    for ((_, v), f) in rows.iter().zip(fresh) {
                        let e = if v.len() == f.len() { v.iter().zip(f.iter()).map(|(a, b)| (a - b).abs() / (1.0 + b.abs())).fold(0.0, f64::max) } else { f64::INFINITY };
                        coeff = coeff.max(e);
                    }
                }
            }
            checks.push(Check::at_most("coefficient reproduction", coeff, REPRODUCTION_TOL));
            let r = default_residual_check(&loaded.system, &bs, &nf, opts.seed)?;
            let exact = r.max_residual.iter().all(|&v| v <= EXACT_RESIDUAL);
            println!("residual slope {:.4} (needs {:.1}), max residual {:.3e}", r.slope, r.required_slope, r.max_residual.first().copied().unwrap_or(0.0));
            if !(exact || r.slope >= r.required_slope - SLOPE_MARGIN) {
                eprintln!("residual slope {:.4} below {:.4}", r.slope, r.required_slope - SLOPE_MARGIN);
                outcome = Outcome::Indeterminate;
            }
            residual = Some(r);
        }
    }

    for c in &checks {
        println!("{}: {} ({:.3e} vs {:.1e})", c.name, if c.passed { "ok" } else { "FAILED" }, c.value, c.tolerance);
    }
    let vm = manifest_for("verify", &loaded.label, &opts, dir);
    let doc = json!({ "manifest": vm, "checks": checks, "residual": residual });
    write_atomic(&dir.join("verify.json"), to_json(&doc).as_bytes()).with_context(|| format!("cannot write {}", dir.join("verify.json").display()))?;
    if let Some(bad) = checks.iter().find(|c| !c.passed) {
        bail!("check '{}' failed: {:.3e} exceeds {:.1e}", bad.name, bad.value, bad.tolerance);
    }
    Ok(outcome)
}

pub fn run(cli: &Cli) -> anyhow::Result<Outcome> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        // Fails only if a pool already exists, as in repeated in-process runs.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Examples => {
            for name in example_names() {
                let ex = example(name).expect("listed examples exist");
                println!("{:<18} {}", ex.name, ex.summary);
            }
            Ok(Outcome::Success)
        }
        Command::Verify { dir } => cmd_verify(cli, dir.as_deref().unwrap_or(&cli.out)),
        stage => cmd_pipeline(cli, stage),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("nudich").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn window_accepts_negative_times() {
        let cli = parse(&["spectrum", "--example", "diag-1-2", "--window", "-5", "7.5"]);
        assert_eq!(options(&cli).unwrap().window, (-5.0, 7.5));
        let cli = parse(&["--window=-3,3", "reduce", "--example", "zero"]);
        assert_eq!(options(&cli).unwrap().window, (-3.0, 3.0));
    }

    #[test]
    fn bad_options_are_rejected() {
        assert!(options(&parse(&["spectrum", "--window", "2", "1"])).is_err());
        assert!(options(&parse(&["spectrum", "--tail-tol", "0"])).is_err());
        let err = options(&parse(&["normalform", "--degree", "40"])).unwrap_err();
        assert!(err.to_string().contains("cap"));
        assert!(Cli::try_parse_from(["nudich", "spectrum", "--config", "a.toml", "--example", "zero"]).is_err());
    }
}
