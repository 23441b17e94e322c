//! Sweep orchestration and the machine-readable outputs behind the binary:
//! phase-diagram CSV tables, the symmetric threshold table, and the
//! matching-initialization demo.
//!
//! Reproducibility contract: per-cell seeds derive from the master seed and
//! the grid indices through [`crate::numerics::seed::cell_seed`], so any cell
//! can be recomputed in isolation; all numbers are formatted with `{:.12e}`,
//! which is locale-independent; rows are emitted in grid order regardless of
//! the parallel execution order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::amp::{amp_decode, AmpConfig};
use crate::error::{Error, Result};
use crate::model::{generate_instance, Composition};
use crate::numerics::seed::cell_seed;
use crate::numerics::{ExpectationEngine, SupSearchConfig, DEFAULT_GH_NODES};
use crate::se::{se_iterate, SEConfig, SEMatrix, SETrajectory};
use crate::thresholds::{kappa_matching, kappa_sym, scalar_se, ScalarMap, ThresholdResult};

/// How the category proportions vary across a sweep.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "kebab-case", tag = "pi_mode")]
pub enum PiMode {
    /// `d = 2` cells with proportions `(p, 1-p)` for each grid `p`.
    BinaryPGrid { p_grid: Vec<f64> },
    /// One column of cells at the uniform distribution on `d` categories.
    Uniform { d: usize },
    /// One column of cells at an explicit proportions vector.
    Explicit { pi: Vec<f64> },
}

/// Full configuration of a phase-diagram sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    #[serde(flatten)]
    pub pi_mode: PiMode,
    pub kappa_grid: Vec<f64>,
    /// Population size for the AMP runs.
    pub n: usize,
    pub seeds_per_cell: usize,
    pub alpha: f64,
    /// Monte Carlo sample budget for full-matrix SE cells (ignored on the
    /// scalar fast path).
    pub se_samples: usize,
    pub master_seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            pi_mode: PiMode::BinaryPGrid { p_grid: vec![0.5] },
            kappa_grid: vec![0.5],
            n: 2000,
            seeds_per_cell: 1,
            alpha: 0.5,
            se_samples: 20_000,
            master_seed: 1,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        let grids: Vec<&[f64]> = match &self.pi_mode {
            PiMode::BinaryPGrid { p_grid } => vec![p_grid.as_slice(), &self.kappa_grid],
            _ => vec![self.kappa_grid.as_slice()],
        };
        for grid in grids {
            if grid.is_empty() {
                return Err(Error::InvalidParam("sweep grids must be non-empty".into()));
            }
            if grid.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::InvalidParam(
                    "sweep grids must be strictly increasing".into(),
                ));
            }
        }
        if let PiMode::BinaryPGrid { p_grid } = &self.pi_mode {
            if p_grid.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
                return Err(Error::InvalidParam(
                    "p grid entries must be in (0,1)".into(),
                ));
            }
        }
        if let PiMode::Explicit { pi } = &self.pi_mode {
            crate::model::validate_simplex(pi)?;
        }
        if self.seeds_per_cell == 0 {
            return Err(Error::InvalidParam("seeds_per_cell must be >= 1".into()));
        }
        if self.n == 0 {
            return Err(Error::InvalidParam("n must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidParam("alpha must be in (0,1]".into()));
        }
        Ok(())
    }

    fn pi_cells(&self) -> Vec<(String, Vec<f64>)> {
        match &self.pi_mode {
            PiMode::BinaryPGrid { p_grid } => p_grid
                .iter()
                .map(|&p| (fmt_float(p), vec![p, 1.0 - p]))
                .collect(),
            PiMode::Uniform { d } => {
                vec![(format!("uniform{d}"), vec![1.0 / *d as f64; *d])]
            }
            PiMode::Explicit { pi } => {
                let digest = pi
                    .iter()
                    .map(|v| format!("{v}"))
                    .collect::<Vec<_>>()
                    .join(":");
                vec![(digest, pi.clone())]
            }
        }
    }
}

/// One emitted sweep row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRecord {
    pub p: String,
    pub kappa: f64,
    /// Replicate index for AMP rows; `"se"` for the per-cell SE row.
    pub seed: String,
    pub mse_amp: Option<f64>,
    pub mse_se: f64,
    pub iters_amp: Option<usize>,
    pub converged: bool,
    pub error: Option<String>,
    /// Scalar fixed point, when the scalar fast path applied.
    pub a_star: Option<f64>,
}

/// Fixed CSV column set, in order.
pub const SWEEP_CSV_HEADER: &str = "p,kappa,seed,mse_amp,mse_se,iters_amp,converged,error";

fn fmt_float(v: f64) -> String {
    format!("{v:.12e}")
}

fn fmt_opt(v: &Option<f64>) -> String {
    v.map(fmt_float).unwrap_or_default()
}

impl SweepRecord {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.p,
            fmt_float(self.kappa),
            self.seed,
            fmt_opt(&self.mse_amp),
            fmt_float(self.mse_se),
            self.iters_amp.map(|v| v.to_string()).unwrap_or_default(),
            self.converged,
            self.error.as_deref().unwrap_or_default()
        )
    }
}

/// Asymptotic MSE prediction for one cell, through the scalar fast path when
/// the proportions admit one and the full-matrix engine otherwise.
fn se_prediction(
    pi: &[f64],
    kappa: f64,
    se_samples: usize,
    cell: u64,
) -> Result<(f64, usize, bool, Option<f64>)> {
    let d = pi.len();
    let scalar_map = if d == 2 {
        Some(ScalarMap::Binary { p: pi[0] })
    } else if pi.iter().all(|&v| (v - 1.0 / d as f64).abs() < 1e-12) {
        Some(ScalarMap::Symmetric { d })
    } else {
        None
    };
    match scalar_map {
        Some(map) => {
            let engine = crate::thresholds::default_scalar_engine();
            // Non-informative start: a0 such that X0 = kappa^{-1}(D - pi pi^T)
            // lies on the ray.
            let a0 = match map {
                ScalarMap::Binary { p } => p * (1.0 - p) / kappa,
                ScalarMap::Symmetric { d } => 1.0 / (d as f64 * kappa),
                ScalarMap::Matching { .. } => unreachable!(),
            };
            let engine = match map {
                ScalarMap::Symmetric { d } if d > 2 => {
                    ExpectationEngine::monte_carlo(d, se_samples, cell)
                }
                _ => engine,
            };
            let res = scalar_se(map, kappa, a0, 2000, 1e-10, &engine)?;
            Ok((
                res.mse_limit,
                res.trajectory.len(),
                res.converged,
                Some(res.a_star),
            ))
        }
        None => {
            let engine = ExpectationEngine::monte_carlo(d, se_samples, cell);
            let cfg = SEConfig::new(kappa, pi.to_vec(), engine)?;
            let traj = se_iterate(&SEMatrix::noninformative(pi, kappa), &cfg)?;
            let mse = traj.steps.last().map(|s| s.mse).unwrap_or(f64::NAN);
            Ok((mse, traj.steps.len(), traj.converged, None))
        }
    }
}

/// Run the sweep and return the rows in deterministic grid order: for each
/// cell, `seeds_per_cell` AMP rows followed by one SE row.
pub fn run_phase_diagram(cfg: &SweepConfig) -> Result<Vec<SweepRecord>> {
    cfg.validate()?;
    let pi_cells = cfg.pi_cells();

    // Independent jobs: one per (pi, kappa, replicate) plus one SE job per
    // cell, executed by the worker pool and reassembled in grid order.
    struct Job {
        p_idx: usize,
        k_idx: usize,
        rep: Option<usize>,
    }
    let mut jobs = Vec::new();
    for p_idx in 0..pi_cells.len() {
        for k_idx in 0..cfg.kappa_grid.len() {
            for rep in 0..cfg.seeds_per_cell {
                jobs.push(Job {
                    p_idx,
                    k_idx,
                    rep: Some(rep),
                });
            }
            jobs.push(Job {
                p_idx,
                k_idx,
                rep: None,
            });
        }
    }

    let rows: Vec<SweepRecord> = jobs
        .par_iter()
        .map(|job| {
            let (p_label, pi) = &pi_cells[job.p_idx];
            let kappa = cfg.kappa_grid[job.k_idx];
            let m = (kappa * cfg.n as f64).round() as usize;
            match job.rep {
                Some(rep) => {
                    let seed = cell_seed(cfg.master_seed, job.p_idx, job.k_idx, rep);
                    let amp = generate_instance(
                        cfg.n,
                        pi.len(),
                        m,
                        cfg.alpha,
                        pi,
                        seed,
                        Composition::Exact,
                    )
                    .and_then(|inst| amp_decode(&inst, &AmpConfig::default()));
                    // The SE value repeats on AMP rows so each row is
                    // self-contained for plotting.
                    let se = se_prediction(
                        pi,
                        kappa,
                        cfg.se_samples,
                        cell_seed(cfg.master_seed, job.p_idx, job.k_idx, cfg.seeds_per_cell),
                    );
                    match (amp, se) {
                        (Ok(res), Ok((mse_se, _, _, a_star))) => SweepRecord {
                            p: p_label.clone(),
                            kappa,
                            seed: rep.to_string(),
                            mse_amp: Some(res.report.mse),
                            mse_se,
                            iters_amp: Some(res.iterations),
                            converged: res.converged,
                            error: None,
                            a_star,
                        },
                        (amp, se) => SweepRecord {
                            p: p_label.clone(),
                            kappa,
                            seed: rep.to_string(),
                            mse_amp: amp.as_ref().ok().map(|r| r.report.mse),
                            mse_se: se.as_ref().map(|s| s.0).unwrap_or(f64::NAN),
                            iters_amp: amp.as_ref().ok().map(|r| r.iterations),
                            converged: false,
                            error: Some(
                                amp.err()
                                    .map(|e| e.to_string())
                                    .or_else(|| se.err().map(|e| e.to_string()))
                                    .unwrap_or_default(),
                            ),
                            a_star: None,
                        },
                    }
                }
                None => {
                    let se_seed =
                        cell_seed(cfg.master_seed, job.p_idx, job.k_idx, cfg.seeds_per_cell);
                    match se_prediction(pi, kappa, cfg.se_samples, se_seed) {
                        Ok((mse_se, iters, converged, a_star)) => SweepRecord {
                            p: p_label.clone(),
                            kappa,
                            seed: "se".into(),
                            mse_amp: None,
                            mse_se,
                            iters_amp: Some(iters),
                            converged,
                            error: None,
                            a_star,
                        },
                        Err(e) => SweepRecord {
                            p: p_label.clone(),
                            kappa,
                            seed: "se".into(),
                            mse_amp: None,
                            mse_se: f64::NAN,
                            iters_amp: None,
                            converged: false,
                            error: Some(e.to_string()),
                            a_star: None,
                        },
                    }
                }
            }
        })
        .collect();
    Ok(rows)
}

/// Render sweep rows as the fixed-header CSV document.
pub fn phase_diagram_csv(rows: &[SweepRecord]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.to_csv_row());
        out.push('\n');
    }
    out
}

/// `phase-diagram` command: run the sweep, render CSV.
pub fn cmd_phase_diagram(cfg: &SweepConfig) -> Result<String> {
    Ok(phase_diagram_csv(&run_phase_diagram(cfg)?))
}

/// One row of the symmetric threshold table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdTableRow {
    pub d: usize,
    pub kappa_sym: f64,
    pub std_err: f64,
    pub seconds: f64,
}

/// `threshold-table` command: `kappa*_sym(d)` for each requested `d`
/// (duplicates dropped), with the documented Monte Carlo budget.
pub fn cmd_threshold_table(
    d_list: &[usize],
    samples: usize,
    replicates: usize,
    master_seed: u64,
) -> Result<(Vec<ThresholdTableRow>, Vec<String>)> {
    let mut warnings = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    let mut unique = Vec::new();
    for &d in d_list {
        if d < 2 {
            return Err(Error::InvalidParam(format!("d must be >= 2, got {d}")));
        }
        if seen.insert(d) {
            unique.push(d);
        } else {
            warnings.push(format!("duplicate d = {d} dropped"));
        }
    }
    let sup_cfg = SupSearchConfig::default();
    let mut rows = Vec::new();
    for d in unique {
        let start = std::time::Instant::now();
        let engine = ExpectationEngine::monte_carlo(d, samples, cell_seed(master_seed, d, 0, 0));
        let res = kappa_sym(d, &engine, &sup_cfg, replicates)?;
        if res.boundary {
            warnings.push(format!("d = {d}: supremum hit the search boundary"));
        }
        rows.push(ThresholdTableRow {
            d,
            kappa_sym: res.kappa_star,
            std_err: res.std_err,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok((rows, warnings))
}

pub fn threshold_table_csv(rows: &[ThresholdTableRow]) -> String {
    let mut out = String::from("d,kappa_sym,std_err\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{}\n",
            r.d,
            fmt_float(r.kappa_sym),
            fmt_float(r.std_err)
        ));
    }
    out
}

/// Matching demo: per-edge thresholds, and for each requested `kappa` the
/// surviving-edge set of the full-matrix SE fixed point against the
/// prediction `{(r,s) : kappa < kappa*_rs}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchingDemoEdge {
    pub r: usize,
    pub s: usize,
    pub kappa_star: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchingDemoRun {
    pub kappa: f64,
    pub surviving_edges: Vec<(usize, usize)>,
    pub predicted_edges: Vec<(usize, usize)>,
    pub agree: bool,
    pub se_converged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchingDemoReport {
    pub pi: Vec<f64>,
    pub matching: Vec<(usize, usize)>,
    pub edges: Vec<MatchingDemoEdge>,
    pub runs: Vec<MatchingDemoRun>,
}

/// Survival cutoff in units of the fixed-point tolerance.
const SURVIVAL_FACTOR: f64 = 10.0;

pub fn cmd_matching_demo(
    pi: &[f64],
    matching: &[(usize, usize)],
    kappa_list: &[f64],
    se_samples: usize,
    master_seed: u64,
) -> Result<MatchingDemoReport> {
    crate::model::validate_simplex(pi)?;
    let d = pi.len();
    // Disjointness and range checks happen in the Laplacian constructor.
    let x0 = SEMatrix::from_matching(d, matching, &vec![1.0; matching.len()])?;

    let scalar_engine = crate::thresholds::default_scalar_engine();
    let sup_cfg = SupSearchConfig::default();
    let edges: Vec<MatchingDemoEdge> = matching
        .iter()
        .map(|&(r, s)| {
            kappa_matching(pi, r, s, &scalar_engine, &sup_cfg).map(|t: ThresholdResult| {
                MatchingDemoEdge {
                    r,
                    s,
                    kappa_star: t.kappa_star,
                }
            })
        })
        .collect::<Result<_>>()?;

    let mut runs = Vec::new();
    for (k_idx, &kappa) in kappa_list.iter().enumerate() {
        let engine =
            ExpectationEngine::monte_carlo(d, se_samples, cell_seed(master_seed, k_idx, 0, 0));
        let cfg = SEConfig::new(kappa, pi.to_vec(), engine)?;
        let traj = se_iterate(&x0, &cfg)?;
        let cutoff = SURVIVAL_FACTOR * cfg.fp_tol;
        let x_star = traj.fixed_point.matrix();
        let mut surviving: Vec<(usize, usize)> = matching
            .iter()
            .copied()
            .filter(|&(r, s)| -x_star[(r.min(s), r.max(s))] > cutoff)
            .collect();
        surviving.sort_unstable();
        let mut predicted: Vec<(usize, usize)> = edges
            .iter()
            .filter(|e| kappa < e.kappa_star)
            .map(|e| (e.r, e.s))
            .collect();
        predicted.sort_unstable();
        runs.push(MatchingDemoRun {
            kappa,
            agree: surviving == predicted,
            surviving_edges: surviving,
            predicted_edges: predicted,
            se_converged: traj.converged,
        });
    }
    Ok(MatchingDemoReport {
        pi: pi.to_vec(),
        matching: matching.to_vec(),
        edges,
        runs,
    })
}

// ---------------------------------------------------------------------------
// Serialization of SE trajectories (the `se` subcommand payload)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixedPointJson {
    pub x_star: Vec<f64>,
    pub residual: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryJson {
    pub d: usize,
    pub kappa: f64,
    pub trajectory: Vec<crate::se::SEStep>,
    pub fixed_point: FixedPointJson,
}

pub fn trajectory_json(traj: &SETrajectory, kappa: f64) -> TrajectoryJson {
    let d = traj.fixed_point.dim();
    TrajectoryJson {
        d,
        kappa,
        trajectory: traj.steps.clone(),
        fixed_point: FixedPointJson {
            x_star: {
                let m = traj.fixed_point.matrix();
                (0..d * d).map(|k| m[(k / d, k % d)]).collect()
            },
            residual: traj.residual,
            converged: traj.converged,
        },
    }
}

/// Parse `r1:s1,r2:s2` (one-based vertex labels) into zero-based pairs.
pub fn parse_matching(text: &str, d: usize) -> Result<Vec<(usize, usize)>> {
    let mut pairs = Vec::new();
    for part in text.split(',').filter(|p| !p.is_empty()) {
        let (a, b) = part.split_once(':').ok_or_else(|| {
            Error::InvalidParam(format!("matching entry '{part}' is not of the form r:s"))
        })?;
        let parse = |v: &str| -> Result<usize> {
            let k: usize = v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidParam(format!("bad vertex '{v}'")))?;
            if k == 0 || k > d {
                return Err(Error::InvalidParam(format!(
                    "vertex {k} out of range 1..={d}"
                )));
            }
            Ok(k - 1)
        };
        pairs.push((parse(a)?, parse(b)?));
    }
    if pairs.is_empty() {
        return Err(Error::InvalidParam("matching must not be empty".into()));
    }
    Ok(pairs)
}

/// Engine used by the `se` subcommand: exact quadrature in two dimensions,
/// seeded Monte Carlo otherwise.
pub fn default_se_engine(d: usize, samples: usize, seed: u64) -> ExpectationEngine {
    if d <= 2 {
        ExpectationEngine::gauss_hermite(d.max(1), DEFAULT_GH_NODES).expect("dimension at most two")
    } else {
        ExpectationEngine::monte_carlo(d, samples, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se::connected_components;

    #[test]
    fn sweep_config_validation() {
        let mut cfg = SweepConfig::default();
        cfg.kappa_grid = vec![];
        assert!(cfg.validate().is_err());
        cfg.kappa_grid = vec![0.5, 0.4];
        assert!(cfg.validate().is_err());
        cfg.kappa_grid = vec![0.4, 0.5];
        assert!(cfg.validate().is_ok());
        cfg.seeds_per_cell = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn single_cell_sweep_above_threshold() {
        let cfg = SweepConfig {
            pi_mode: PiMode::BinaryPGrid { p_grid: vec![0.5] },
            kappa_grid: vec![0.6],
            n: 400,
            seeds_per_cell: 1,
            alpha: 0.5,
            se_samples: 10_000,
            master_seed: 7,
        };
        let rows = run_phase_diagram(&cfg).unwrap();
        assert_eq!(rows.len(), 2);
        let amp_row = &rows[0];
        assert_eq!(amp_row.seed, "0");
        assert!(amp_row.error.is_none());
        assert!(
            amp_row.mse_amp.unwrap() < 1e-4,
            "mse = {:?}",
            amp_row.mse_amp
        );
        assert!(amp_row.mse_se < 1e-3);
        let se_row = &rows[1];
        assert_eq!(se_row.seed, "se");
        assert!(se_row.mse_amp.is_none());
    }

    #[test]
    fn sweep_output_is_reproducible() {
        let cfg = SweepConfig {
            pi_mode: PiMode::BinaryPGrid {
                p_grid: vec![0.4, 0.5],
            },
            kappa_grid: vec![0.55, 0.7],
            n: 150,
            seeds_per_cell: 2,
            alpha: 0.5,
            se_samples: 5_000,
            master_seed: 99,
        };
        let a = cmd_phase_diagram(&cfg).unwrap();
        let b = cmd_phase_diagram(&cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.starts_with(SWEEP_CSV_HEADER));
        // (2 p) x (2 kappa) x (2 seeds + 1 se row)
        assert_eq!(a.lines().count(), 1 + 2 * 2 * 3);
    }

    #[test]
    fn threshold_table_dedupes() {
        let (rows, warnings) = cmd_threshold_table(&[2, 2], 4_000, 1, 3).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(warnings.len(), 1);
        assert!((rows[0].kappa_sym - 0.47f64).abs() < 0.05);
    }

    #[test]
    fn matching_parse_round_trip() {
        let pairs = parse_matching("1:2,3:4", 4).unwrap();
        assert_eq!(pairs, vec![(0, 1), (2, 3)]);
        assert!(parse_matching("0:2", 4).is_err());
        assert!(parse_matching("1:5", 4).is_err());
        assert!(parse_matching("", 4).is_err());
    }

    #[test]
    fn matching_demo_overlapping_pairs_rejected() {
        let err = cmd_matching_demo(
            &[0.25, 0.25, 0.25, 0.25],
            &[(0, 1), (1, 2)],
            &[0.5],
            2_000,
            1,
        );
        assert!(err.is_err());
    }

    #[test]
    fn components_used_by_demo_detect_blocks() {
        let x = SEMatrix::from_matching(4, &[(0, 1), (2, 3)], &[1.0, 1.0]).unwrap();
        let p = connected_components(&x, 1e-9);
        assert_eq!(p.blocks.len(), 2);
    }
}
