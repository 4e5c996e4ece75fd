use std::fmt;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde_json::{json, Value};
use timeseed_core::spectral::{
    build_liouvillian, scaling_fit, spectrum_at, spectrum_ladder, DickeSpace, ScalingFit,
    SolverPath, SpectrumOptions,
};
use timeseed_core::stationary::{critical_coupling_search_with, gamma_crit, OscillationOracle};
use timeseed_core::sweep::{fill_cells, load_grid, save_grid, write_grid, Execution, GridResult};
use timeseed_core::{integrate, CouplingKind, Error};

use crate::config::{parse_config, parse_triples, ConfigError, RunConfig};
use crate::{Common, CritArgs, SimulateArgs, SpectrumArgs, SweepArgs};

/// Tolerance of the dense against iterative comparison.
const CROSS_CHECK_TOL: f64 = 1e-7;

#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Core(Error),
    CrossCheck(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(e) => e.fmt(f),
            CliError::Core(e) => e.fmt(f),
            CliError::CrossCheck(msg) => write!(f, "cross-check failed: {msg}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

type CliResult<T = ()> = Result<T, CliError>;

/// Twelve significant digits, the same on every platform.
pub fn fmt12(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.11e}")
    } else {
        format!("{x}")
    }
}

fn num12(x: f64) -> Value {
    if x.is_finite() {
        json!(fmt12(x).parse::<f64>().expect("formatted float parses"))
    } else {
        Value::Null
    }
}

fn load(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match (&common.config, common.preset) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError::single("--config", format!("{}: {e}", path.display())))?;
            parse_config(&text)?
        }
        (None, Some(p)) => p.config(),
        (None, None) => return Err(ConfigError::single("", "need --config <path> or --preset <name>").into()),
    };
    if let Some(g) = common.coupling {
        cfg.params.coupling.strength = g;
    }
    if let Some(raw) = &common.seed_override {
        cfg.initial = Some(parse_triples(raw)?);
    }
    if let Some(k) = common.threads {
        set_threads(k)?;
    }
    Ok(cfg)
}

#[cfg(feature = "parallel")]
fn set_threads(k: usize) -> CliResult {
    if k == 0 {
        return Err(ConfigError::single("--threads", "must be >= 1").into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(k)
        .build_global()
        .map_err(|e| ConfigError::single("--threads", e.to_string()).into())
}

#[cfg(not(feature = "parallel"))]
fn set_threads(_k: usize) -> CliResult {
    eprintln!("timeseed: built without the parallel feature, --threads ignored");
    Ok(())
}

/// Single writer for the command's data output.
fn sink(out: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match out {
        Some(path) => Box::new(BufWriter::new(File::create(path)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

pub fn simulate(args: &SimulateArgs) -> CliResult {
    let mut cfg = load(&args.common)?;
    if let Some(t) = args.t_end {
        cfg.integration.t_end = t;
    }
    if let Some(dt) = args.dt_out {
        cfg.integration.dt_out = dt;
    }
    cfg.validate()?;
    let traj = integrate(&cfg.params, &cfg.initial_state(), &cfg.integration)?;

    let mut w = sink(args.common.out.as_deref())?;
    let mut header = vec!["t".to_string()];
    for a in 0..traj.n_ensembles() {
        header.extend(["mx", "my", "mz"].map(|c| format!("{c}_{a}")));
    }
    writeln!(w, "{}", header.join(","))?;
    for (t, state) in traj.times.iter().zip(&traj.states) {
        let mut row = vec![fmt12(*t)];
        row.extend(state.components.iter().flatten().map(|&x| fmt12(x)));
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn fit_json(fit: &ScalingFit, requested: usize) -> Value {
    json!({
        "mu": fit.mu,
        "mu_requested": requested,
        "coefficients": fit.coefficients.iter().map(|&c| num12(c)).collect::<Vec<_>>(),
        "residual": num12(fit.residual),
        "extrapolated": num12(fit.extrapolated),
    })
}

pub fn spectrum(args: &SpectrumArgs) -> CliResult {
    let mut cfg = load(&args.common)?;
    if args.full {
        cfg.spectrum.sizes = (6..=38).step_by(4).collect();
    } else if let Some(sizes) = &args.sizes {
        cfg.spectrum.sizes = sizes.clone();
    }
    cfg.validate()?;
    let sizes = cfg.spectrum.sizes.clone();
    if sizes.is_empty() {
        return Err(ConfigError::single("spectrum.sizes", "empty ladder").into());
    }
    if args.fit && sizes.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "fit underdetermined: {} size(s) cannot fix a constant and a 1/N term",
            sizes.len()
        ))
        .into());
    }
    let opts = SpectrumOptions::from_env()?;

    if let Some(path) = &args.export {
        let l = build_liouvillian(&cfg.params, &DickeSpace::symmetric(*sizes.iter().min().unwrap())?)?;
        l.write_coordinate(BufWriter::new(File::create(path)?))?;
    }

    let ladder = spectrum_ladder(&cfg.params, &sizes, cfg.spectrum.k, &opts)?;
    let mut l1 = Vec::with_capacity(sizes.len());
    let mut w = sink(args.common.out.as_deref())?;
    writeln!(w, "N,re_l1,im_l1,re_l2,im_l2")?;
    for (n, res) in sizes.iter().zip(&ladder) {
        let d1 = res.dominant.ok_or_else(|| {
            Error::Numerical(format!("no oscillating eigenvalue found at N = {n}"))
        })?;
        l1.push(d1);
        let d2 = res.second_dominant;
        let cols = [
            d1.re,
            d1.im,
            d2.map_or(f64::NAN, |z| z.re),
            d2.map_or(f64::NAN, |z| z.im),
        ];
        let cols: Vec<String> = cols.iter().map(|&x| fmt12(x)).collect();
        writeln!(w, "{n},{}", cols.join(","))?;
    }

    if args.fit {
        let cap = sizes.len() - 1;
        let (mu_re, mu_im) = (cfg.spectrum.mu_re.min(cap), cfg.spectrum.mu_im.min(cap));
        if mu_re < cfg.spectrum.mu_re || mu_im < cfg.spectrum.mu_im {
            eprintln!("timeseed: {} sizes determine fits up to order {cap}", sizes.len());
        }
        let re: Vec<f64> = l1.iter().map(|z| z.re).collect();
        let im: Vec<f64> = l1.iter().map(|z| z.im).collect();
        let fit_re = scaling_fit(&sizes, &re, mu_re)?;
        let fit_im = scaling_fit(&sizes, &im, mu_im)?;
        let doc = json!({
            "sizes": sizes,
            "coupling": num12(cfg.params.coupling.strength),
            "re": fit_json(&fit_re, cfg.spectrum.mu_re),
            "im": fit_json(&fit_im, cfg.spectrum.mu_im),
        });
        let text = serde_json::to_string_pretty(&doc).expect("fit document serialises");
        match &args.common.out {
            Some(path) => {
                let mut p = path.clone().into_os_string();
                p.push(".fit.json");
                std::fs::write(p, text + "\n")?;
            }
            None => writeln!(w, "# fit\n{text}")?,
        }
    }
    w.flush()?;
    drop(w);

    if args.cross_check {
        cross_check(&cfg, &sizes, &opts)?;
    }
    Ok(())
}

/// Dense and iterative λ₁ on every size within the dense cap, or on the
/// smallest size when none fits.
fn cross_check(cfg: &RunConfig, sizes: &[usize], opts: &SpectrumOptions) -> CliResult {
    let mut chosen: Vec<usize> = Vec::new();
    for &n in sizes {
        if DickeSpace::symmetric(n)?.liouvillian_dim() <= opts.dense_cap {
            chosen.push(n);
        }
    }
    if chosen.is_empty() {
        chosen.push(*sizes.iter().min().unwrap());
    }
    let mut worst = 0.0f64;
    for &n in &chosen {
        let space = DickeSpace::symmetric(n)?;
        let mut dense = opts.clone();
        dense.force = Some(SolverPath::Dense);
        let mut iter = opts.clone();
        iter.force = Some(SolverPath::Iterative);
        let a = spectrum_at(&cfg.params, &space, cfg.spectrum.k, &dense)?.dominant;
        let b = spectrum_at(&cfg.params, &space, cfg.spectrum.k, &iter)?.dominant;
        let (a, b) = match (a, b) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(CliError::CrossCheck(format!("a solver found no λ₁ at N = {n}"))),
        };
        let d = (a - b).norm();
        eprintln!(
            "cross-check N={n} dim={} |dλ1|={}",
            space.liouvillian_dim(),
            fmt12(d)
        );
        worst = worst.max(d);
    }
    eprintln!("cross-check max |dλ1|={}", fmt12(worst));
    if !(worst < CROSS_CHECK_TOL) {
        return Err(CliError::CrossCheck(format!(
            "max |dλ1| = {} exceeds {CROSS_CHECK_TOL:e}",
            fmt12(worst)
        )));
    }
    Ok(())
}

pub fn sweep(args: &SweepArgs) -> CliResult {
    let partial = match &args.resume {
        Some(path) => {
            if let Some(k) = args.common.threads {
                set_threads(k)?;
            }
            load_grid(path)?
        }
        None => {
            let cfg = load(&args.common)?;
            if cfg.sweep.is_none() {
                return Err(ConfigError::single("sweep", "no sweep section in this configuration").into());
            }
            cfg.validate()?;
            GridResult::empty(cfg.grid_spec().expect("sweep section present"), cfg.integration)
        }
    };
    let out = args.common.out.as_deref().or(args.resume.as_deref());
    let mut grid = partial;
    let pending = grid.pending();
    let chunks = args.checkpoints.max(1);
    let chunk = pending.len().div_ceil(chunks).max(1);
    for cells in pending.chunks(chunk) {
        grid = fill_cells(grid, cells, Execution::default())?;
        if let Some(path) = out {
            save_grid(&grid, path)?;
        }
    }
    match out {
        Some(path) => save_grid(&grid, path)?,
        None => {
            let mut w = sink(None)?;
            write_grid(&grid, &mut w)?;
            w.flush()?;
        }
    }
    let failed = grid.pending().len();
    if failed > 0 {
        eprintln!("timeseed: {failed} cell(s) failed and stay masked; rerun with --resume to retry");
    }
    Ok(())
}

pub fn crit(args: &CritArgs) -> CliResult {
    let mut cfg = load(&args.common)?;
    if let Some(lo) = args.lo {
        cfg.crit.lo = lo;
    }
    if let Some(hi) = args.hi {
        cfg.crit.hi = hi;
    }
    if let Some(tol) = args.tol {
        cfg.crit.tol = tol;
    }
    cfg.validate()?;
    let params = &cfg.params;

    let analytic = match params.coupling.kind {
        CouplingKind::Dissipative if params.n() == 2 => match gamma_crit(params) {
            Ok(g) => Some(g),
            Err(Error::OutOfDomain(_)) => None,
            Err(e) => return Err(e.into()),
        },
        _ => None,
    };
    let oracle = OscillationOracle {
        initial: cfg.initial.as_ref().map(|v| timeseed_core::BlochState::new(v.clone())),
        window_fraction: cfg.window_fraction,
        ..OscillationOracle::default()
    };
    let c = cfg.crit;
    let bisection = critical_coupling_search_with(&oracle, params, c.lo, c.hi, c.tol)?;
    let na = || Value::from("n/a");
    let doc = json!({
        "kind": params.coupling.kind,
        "n": params.n(),
        "analytic": analytic.map_or_else(na, num12),
        "bisection": num12(bisection),
        "delta": analytic.map_or_else(na, |g| num12((bisection - g).abs())),
        "bracket": [num12(c.lo), num12(c.hi)],
        "tol": num12(c.tol),
    });
    let mut w = sink(args.common.out.as_deref())?;
    writeln!(w, "{}", serde_json::to_string_pretty(&doc).expect("report serialises"))?;
    w.flush()?;
    Ok(())
}
