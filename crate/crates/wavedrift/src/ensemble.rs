//! Monte Carlo orchestration over independent paths: variance-reduced
//! averaging of the phase drift, the observed orbital drift
//! `c^od_obs = (2/T)∫_{T/2}^T E[Γ(t) − c_σ t]/t dt`, and the stability
//! probability `p_ε(T, η) = P(sup_t N_ε(t) > η)`.

use crate::spdesim::{run_path, PathRecord, SimConfig};
use crate::{Error, Result};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

/// Counter-based per-path seed: a splitmix64-style bijective finalizer on
/// `base + (index+1)·golden`, collision-free across indices for a fixed base.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add((index.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Wilson 95% interval for an exceedance fraction.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct PEpsEstimate {
    pub eta: f64,
    pub fraction: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_exceed: usize,
    pub n_paths: usize,
}

/// Exceedance fraction of `sup N_ε` over `eta` with a Wilson 95% CI.
pub fn p_eps_for_eta(sup_neps: &[f64], eta: f64) -> Result<PEpsEstimate> {
    let n = sup_neps.len();
    if n == 0 {
        return Err(Error::validation("p_eps needs at least one path"));
    }
    let k = sup_neps.iter().filter(|&&s| s > eta).count();
    let z = 1.959_963_984_540_054f64;
    let nf = n as f64;
    let p_hat = k as f64 / nf;
    let denom = 1.0 + z * z / nf;
    let center = (p_hat + z * z / (2.0 * nf)) / denom;
    let half = z * (p_hat * (1.0 - p_hat) / nf + z * z / (4.0 * nf * nf)).sqrt() / denom;
    Ok(PEpsEstimate {
        eta,
        fraction: p_hat,
        ci_low: (center - half).max(0.0),
        ci_high: (center + half).min(1.0),
        n_exceed: k,
        n_paths: n,
    })
}

/// Cross-path aggregates of a seeded ensemble.
#[derive(Debug, Clone)]
pub struct EnsembleStats {
    pub times: Vec<f64>,
    /// `E[Γ(t) − c_σ t]`, estimated from the variance-reduced series (the
    /// subtracted Brownian term has zero mean, so no bias is introduced).
    pub mean_drift: Vec<f64>,
    pub sem_drift: Vec<f64>,
    pub n_paths: usize,
    pub n_excluded: usize,
    /// Observed orbital drift over `[t_end/2, t_end]`.
    pub c_od_obs: f64,
    pub p_eps: Option<PEpsEstimate>,
    /// `sup_t N_ε` of every included path, in path order.
    pub sup_neps: Vec<f64>,
    /// Mean and SEM of the subtracted correction `σ b(Φ_σ,ψ) β_T` at the
    /// final time (should vanish within sampling error).
    pub mean_correction: f64,
    pub sem_correction: f64,
    /// Sample variances of the raw and variance-reduced drift at `t_end`.
    pub var_raw_final: f64,
    pub var_vr_final: f64,
    pub config_fingerprint: String,
}

fn fingerprint(cfg: &SimConfig, n_paths: usize, base_seed: u64, eta: Option<f64>) -> String {
    let grid = cfg.swave.profile.grid();
    let mut h = Sha256::new();
    let desc = format!(
        "{}|L={}|N={}|sigma={}|c_sigma={}|c0={}|dt={}|t_end={}|eps={}|stride={}|paths={}|seed={}|eta={:?}",
        cfg.model.name(),
        grid.half_length(),
        grid.points(),
        cfg.sigma,
        cfg.swave.speed,
        cfg.c0,
        cfg.dt,
        cfg.t_end,
        cfg.eps,
        cfg.record_stride,
        n_paths,
        base_seed,
        eta,
    );
    h.update(desc.as_bytes());
    h.finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn mean_and_sem(samples: &[f64]) -> (f64, f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = if samples.len() > 1 {
        samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, (var / n).sqrt(), var)
}

/// Run `n_paths` independent paths with counter-derived seeds and aggregate.
///
/// Paths that blow up are excluded with a warning as long as they stay below
/// 1% of the ensemble; more than that is a hard error.  Aggregation happens
/// in path order, so the result does not depend on worker scheduling.
pub fn run_ensemble(
    cfg: &SimConfig,
    n_paths: usize,
    base_seed: u64,
    eta: Option<f64>,
) -> Result<EnsembleStats> {
    if n_paths < 2 {
        return Err(Error::validation("an ensemble needs at least two paths"));
    }
    cfg.validate()?;

    let results: Vec<(u64, Result<PathRecord>)> = (0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(base_seed, i);
            (seed, run_path(cfg, seed))
        })
        .collect();

    let mut records = Vec::with_capacity(n_paths);
    let mut n_excluded = 0usize;
    for (seed, res) in results {
        match res {
            Ok(rec) => records.push(rec),
            Err(e) => {
                n_excluded += 1;
                log::warn!("excluding blown-up path (seed {seed}): {e}");
            }
        }
    }
    if n_excluded > 0 && (n_excluded as f64) >= 0.01 * n_paths as f64 {
        return Err(Error::numerical(format!(
            "{n_excluded} of {n_paths} paths blew up; exceeds the 1% exclusion budget"
        )));
    }
    if records.len() < 2 {
        return Err(Error::numerical("fewer than two usable paths"));
    }

    let times = records[0].times.clone();
    let n_times = times.len();
    for rec in &records {
        if rec.times.len() != n_times {
            return Err(Error::numerical("paths recorded inconsistent time grids"));
        }
    }

    let nf = records.len() as f64;
    let mut mean_drift = vec![0.0; n_times];
    let mut sem_drift = vec![0.0; n_times];
    for j in 0..n_times {
        let mut sum = 0.0;
        for rec in &records {
            sum += rec.gamma_vr[j];
        }
        let mean = sum / nf;
        let mut ss = 0.0;
        for rec in &records {
            ss += (rec.gamma_vr[j] - mean).powi(2);
        }
        mean_drift[j] = mean;
        sem_drift[j] = if records.len() > 1 {
            (ss / (nf - 1.0) / nf).sqrt()
        } else {
            0.0
        };
    }

    let last = n_times - 1;
    let corrections: Vec<f64> = records
        .iter()
        .map(|r| r.gamma_minus_cst[last] - r.gamma_vr[last])
        .collect();
    let (mean_correction, sem_correction, _) = mean_and_sem(&corrections);
    let raw_final: Vec<f64> = records.iter().map(|r| r.gamma_minus_cst[last]).collect();
    let vr_final: Vec<f64> = records.iter().map(|r| r.gamma_vr[last]).collect();
    let (_, _, var_raw_final) = mean_and_sem(&raw_final);
    let (_, _, var_vr_final) = mean_and_sem(&vr_final);
    let sup_neps: Vec<f64> = records.iter().map(|r| r.sup_neps).collect();

    let mut stats = EnsembleStats {
        times,
        mean_drift,
        sem_drift,
        n_paths: records.len(),
        n_excluded,
        c_od_obs: 0.0,
        p_eps: None,
        sup_neps,
        mean_correction,
        sem_correction,
        var_raw_final,
        var_vr_final,
        config_fingerprint: fingerprint(cfg, n_paths, base_seed, eta),
    };
    stats.c_od_obs = observed_drift(&stats, cfg.t_end)?;
    if let Some(eta) = eta {
        stats.p_eps = Some(p_eps_for_eta(&stats.sup_neps, eta)?);
    }
    Ok(stats)
}

/// `c^od_obs(T) = (2/T) ∫_{T/2}^T E[Γ(t) − c_σ t] / t dt` by trapezoid
/// quadrature over the recorded times inside the window.
pub fn observed_drift(stats: &EnsembleStats, t_end: f64) -> Result<f64> {
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(Error::validation("observed_drift needs a positive horizon"));
    }
    let lo = 0.5 * t_end;
    let pts: Vec<(f64, f64)> = stats
        .times
        .iter()
        .zip(&stats.mean_drift)
        .filter(|(t, _)| **t >= lo * (1.0 - 1e-12) && **t <= t_end * (1.0 + 1e-12) && **t > 0.0)
        .map(|(t, m)| (*t, m / t))
        .collect();
    if pts.len() < 2 {
        return Err(Error::numerical(format!(
            "observed_drift: only {} recorded times inside [{lo}, {t_end}]",
            pts.len()
        )));
    }
    let mut integral = 0.0;
    for w in pts.windows(2) {
        integral += 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1);
    }
    Ok(2.0 / t_end * integral)
}

/// Run a fresh ensemble and report the exceedance probability of
/// `sup_t N_ε` over `eta`.
pub fn estimate_p_eps(
    cfg: &SimConfig,
    n_paths: usize,
    eta: f64,
    base_seed: u64,
) -> Result<PEpsEstimate> {
    if !(eta >= 0.0) {
        return Err(Error::validation("eta must be nonnegative"));
    }
    let stats = run_ensemble(cfg, n_paths, base_seed, Some(eta))?;
    stats
        .p_eps
        .ok_or_else(|| Error::numerical("p_eps missing from ensemble stats"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detwave::{adjoint_eigenfunction, nagumo_seed, solve_wave, NewtonOpts};
    use crate::grid::{Field, Grid};
    use crate::kinetics::{nagumo_model, Model};
    use crate::spdesim::SimConfig;
    use crate::stochwave::solve_stochastic_wave;
    use std::sync::Arc;

    fn nagumo_cfg(n: usize, sigma: f64, t_end: f64) -> SimConfig {
        let grid = Grid::new(40.0, n).unwrap();
        let (seed, c_guess) = nagumo_seed(grid, 0.1);
        let model = nagumo_model(0.1).unwrap();
        let wave = solve_wave(&model, &seed, c_guess, NewtonOpts::default()).unwrap();
        let adj = adjoint_eigenfunction(&model, &wave).unwrap();
        let swave =
            solve_stochastic_wave(&model, &wave, &adj.psi, sigma, NewtonOpts::default()).unwrap();
        let mut cfg = SimConfig::new(model, swave, adj.psi, wave.speed, sigma, 0.1).unwrap();
        cfg.t_end = t_end;
        cfg.record_stride = 50;
        cfg
    }

    #[test]
    fn derived_seeds_are_deterministic_and_distinct() {
        let mut seen = std::collections::HashSet::new();
        for i in 0..1000 {
            let s = derive_seed(12345, i);
            assert_eq!(s, derive_seed(12345, i));
            assert!(seen.insert(s), "seed collision at index {i}");
        }
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
    }

    #[test]
    fn wilson_interval_matches_hand_computation() {
        // k = 5, n = 100, z = 1.96: center = (0.05 + z²/200)/(1 + z²/100),
        // half-width = z·sqrt(0.05·0.95/100 + z²/40000)/(1 + z²/100).
        let sup: Vec<f64> = (0..100).map(|i| if i < 5 { 2.0 } else { 0.5 }).collect();
        let est = p_eps_for_eta(&sup, 1.0).unwrap();
        assert_eq!(est.n_exceed, 5);
        assert!((est.fraction - 0.05).abs() < 1e-15);
        assert!((est.ci_low - 0.0215).abs() < 5e-4, "lo = {}", est.ci_low);
        assert!((est.ci_high - 0.1117).abs() < 5e-4, "hi = {}", est.ci_high);

        // Degenerate fractions stay inside [0, 1]; at k = 0 the lower Wilson
        // endpoint collapses to zero and the upper one to z²/(n + z²).
        let est = p_eps_for_eta(&sup, 10.0).unwrap();
        assert_eq!(est.fraction, 0.0);
        assert!(est.ci_low <= 1e-12 && est.ci_high > 0.0 && est.ci_high < 0.05);
        let est = p_eps_for_eta(&sup, 0.0).unwrap();
        assert_eq!(est.fraction, 1.0);
        assert!(est.ci_high >= 1.0 - 1e-12 && est.ci_low > 0.95 && est.ci_low < 1.0);
    }

    #[test]
    fn p_eps_is_monotone_in_eta() {
        let sup = [0.1, 0.5, 0.9, 1.4, 2.2, 3.0];
        let mut prev = f64::INFINITY;
        for eta in [0.0, 0.2, 0.6, 1.0, 1.5, 2.5, 3.5] {
            let est = p_eps_for_eta(&sup, eta).unwrap();
            assert!(est.fraction <= prev);
            prev = est.fraction;
        }
    }

    #[test]
    fn observed_drift_reproduces_linear_trend() {
        let times: Vec<f64> = (0..=100).map(|k| k as f64 * 0.1).collect();
        let m = -0.37;
        let stats = EnsembleStats {
            mean_drift: times.iter().map(|t| m * t).collect(),
            sem_drift: vec![0.0; times.len()],
            times,
            n_paths: 2,
            n_excluded: 0,
            c_od_obs: 0.0,
            p_eps: None,
            sup_neps: vec![],
            mean_correction: 0.0,
            sem_correction: 0.0,
            var_raw_final: 0.0,
            var_vr_final: 0.0,
            config_fingerprint: String::new(),
        };
        let c = observed_drift(&stats, 10.0).unwrap();
        assert!((c - m).abs() <= 1e-12, "c_od_obs = {c}");

        let zero = EnsembleStats {
            mean_drift: vec![0.0; stats.times.len()],
            ..stats.clone()
        };
        assert_eq!(observed_drift(&zero, 10.0).unwrap(), 0.0);

        // Window outside the recorded range.
        assert!(observed_drift(&stats, 100.0).is_err());
    }

    #[test]
    fn sigma_zero_ensemble_has_no_drift() {
        let cfg = nagumo_cfg(256, 0.0, 1.0);
        let stats = run_ensemble(&cfg, 3, 7, Some(1e-3)).unwrap();
        let max = stats
            .mean_drift
            .iter()
            .fold(0.0f64, |m, &x| m.max(x.abs()));
        assert!(max <= 1e-3, "sigma=0 mean drift {max:e}");
        assert!(stats.sem_drift.iter().all(|&s| s == 0.0));
        assert_eq!(stats.p_eps.unwrap().fraction, 0.0);
        assert_eq!(stats.n_excluded, 0);
    }

    #[test]
    fn ensemble_is_reproducible_across_worker_counts() {
        let cfg = nagumo_cfg(256, 0.05, 0.3);
        let pool1 = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let pool4 = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap();
        let s1 = pool1.install(|| run_ensemble(&cfg, 6, 99, None).unwrap());
        let s4 = pool4.install(|| run_ensemble(&cfg, 6, 99, None).unwrap());
        assert_eq!(s1.mean_drift, s4.mean_drift);
        assert_eq!(s1.sup_neps, s4.sup_neps);
        assert_eq!(s1.config_fingerprint, s4.config_fingerprint);
        assert_eq!(s1.config_fingerprint.len(), 64);
    }

    #[test]
    fn sem_shrinks_with_ensemble_size_and_correction_is_centered() {
        let cfg = nagumo_cfg(256, 0.05, 0.5);
        let small = run_ensemble(&cfg, 48, 5, None).unwrap();
        let large = run_ensemble(&cfg, 96, 5, None).unwrap();
        let last = small.times.len() - 1;
        let ratio = large.sem_drift[last] / small.sem_drift[last];
        let expected = std::f64::consts::FRAC_1_SQRT_2;
        assert!(
            (ratio / expected - 1.0).abs() <= 0.2,
            "sem ratio {ratio} vs {expected}"
        );
        assert!(
            large.mean_correction.abs() <= 3.0 * large.sem_correction + 1e-12,
            "correction mean {} sem {}",
            large.mean_correction,
            large.sem_correction
        );
    }

    #[test]
    fn variance_reduction_beats_raw_series() {
        let cfg = nagumo_cfg(256, 0.05, 0.5);
        let stats = run_ensemble(&cfg, 100, 21, None).unwrap();
        assert!(
            stats.var_vr_final < stats.var_raw_final,
            "vr {:e} raw {:e}",
            stats.var_vr_final,
            stats.var_raw_final
        );
        // The subtraction removes the O(σ) Brownian term entirely.
        assert!(stats.var_vr_final < 0.1 * stats.var_raw_final);
    }

    #[test]
    fn widespread_blow_up_is_a_hard_error() {
        let grid = Grid::new(10.0, 32).unwrap();
        let zero = |_: &[f64], out: &mut [f64]| out[0] = 0.0;
        let model = Model::new(
            "quadratic",
            vec![0.1],
            vec![0.0],
            vec![0.0],
            Arc::new(|u: &[f64], out: &mut [f64]| out[0] = u[0] * u[0]),
            Arc::new(|u: &[f64], out: &mut [f64]| out[0] = 2.0 * u[0]),
            Arc::new(|_: &[f64], v: &[f64], out: &mut [f64]| out[0] = 2.0 * v[0] * v[0]),
            Arc::new(zero),
            Arc::new(zero),
        )
        .unwrap();
        let zeros = Field::zeros(grid.clone(), 1);
        let swave = crate::stochwave::StochasticWave {
            profile: zeros.clone(),
            speed: 0.0,
            sigma: 0.0,
            btilde: 0.0,
            kappa: vec![1.0],
            residual_norm: 0.0,
            newton_iters: 0,
        };
        let mut cfg = SimConfig::new(model, swave, zeros, 0.0, 0.0, 0.1).unwrap();
        cfg.dt = 0.1;
        cfg.t_end = 5.0;
        cfg.u0 = Some(Field::from_fn(grid, 1, |_, x| 10.0 * (-x * x).exp()));
        let err = run_ensemble(&cfg, 4, 3, None).unwrap_err();
        assert!(err.to_string().contains("exclusion budget"));
    }
}
