//! Pathwise integration of the coupled field/phase system
//!
//! ```text
//! dU = [ρ ∂_ξξU + f(U)] dt + σ g(U) dβ_t,
//! dΓ = [c_σ + a_σ(U, c_σ, T_Γψ)] dt + σ b(U, T_Γψ) dβ_t,
//! ```
//!
//! driven by a single scalar Brownian motion shared between both equations.
//! The field equation is integrated in the lab frame with a semi-implicit
//! Euler–Maruyama step (diffusion implicit, reaction and noise explicit); the
//! phase equation is explicit.  The phase functionals are evaluated against
//! the shifted frame function `T_Γψ`, whose second derivative is precomputed
//! once and shifted — never re-differenced — during stepping.
//!
//! Alongside `U` and `Γ` the integrator tracks the deviation
//! `V(t) = T_{−Γ(t)}U(t) − Φ_σ` and the stability functional
//! `N_ε(t) = ‖V(t)‖²_{L²} + ∫₀ᵗ e^{−ε(t−s)} ‖V(s)‖²_{H¹} ds`.

use crate::band::{BandLu, BandMatrix};
use crate::grid::{Field, Grid};
use crate::kinetics::{Cutoffs, Model};
use crate::stochwave::{eval_b, phase_rates_precomputed, StochasticWave};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeSet;
use std::sync::Arc;

/// Everything needed to integrate one path.
#[derive(Clone)]
pub struct SimConfig {
    pub model: Model,
    /// Reference wave `(Φ_σ, c_σ)` the phase tracks.
    pub swave: StochasticWave,
    /// Adjoint frame function `ψ`, normalized so `⟨Φ′, ψ⟩ = 1`.
    pub psi: Field,
    /// Deterministic wave speed, used only for the `c₀`-frame snapshots.
    pub c0: f64,
    /// Noise amplitude of this run (need not equal `swave.sigma`; a σ = 0 run
    /// around a corrected wave is a useful diagnostic).
    pub sigma: f64,
    pub dt: f64,
    pub t_end: f64,
    /// Decay rate ε of the `N_ε` memory integral; must be positive and should
    /// sit below twice the spectral gap for the bound to be meaningful.
    pub eps: f64,
    /// Record every this many steps (step 0 and the final step always record).
    pub record_stride: usize,
    /// Times at which frame-resolved profiles are captured.
    pub snapshot_times: Vec<f64>,
    /// Initial field; defaults to `Φ_σ` when absent.
    pub u0: Option<Field>,
    pub cutoffs: Cutoffs,
}

impl SimConfig {
    /// Configuration with desk-scale defaults: `dt = 1e−3`, `t_end = 10`,
    /// records ≈ every 0.01 time units, no snapshots, `u0 = Φ_σ`.
    pub fn new(
        model: Model,
        swave: StochasticWave,
        psi: Field,
        c0: f64,
        sigma: f64,
        eps: f64,
    ) -> Result<SimConfig> {
        let cfg = SimConfig {
            model,
            swave,
            psi,
            c0,
            sigma,
            dt: 1e-3,
            t_end: 10.0,
            eps,
            record_stride: 10,
            snapshot_times: Vec::new(),
            u0: None,
            cutoffs: Cutoffs::new(100.0)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::validation("dt must be positive and finite"));
        }
        if !(self.t_end >= self.dt && self.t_end.is_finite()) {
            return Err(Error::validation("t_end must be at least one step"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::validation("sigma must be nonnegative"));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::validation("eps must be positive"));
        }
        if self.record_stride == 0 {
            return Err(Error::validation("record_stride must be at least 1"));
        }
        if !self.c0.is_finite() {
            return Err(Error::validation("c0 must be finite"));
        }
        let grid = self.swave.profile.grid();
        if !Arc::ptr_eq(grid, self.psi.grid()) && grid.points() != self.psi.grid().points() {
            return Err(Error::validation("profile and psi live on different grids"));
        }
        if self.swave.profile.n_comp() != self.model.n_comp()
            || self.psi.n_comp() != self.model.n_comp()
        {
            return Err(Error::validation("component count mismatch in SimConfig"));
        }
        if let Some(u0) = &self.u0 {
            if u0.n_comp() != self.model.n_comp() || u0.grid().points() != grid.points() {
                return Err(Error::validation("u0 does not match the simulation grid"));
            }
        }
        for &ts in &self.snapshot_times {
            if !(0.0..=self.t_end + self.dt).contains(&ts) {
                return Err(Error::validation(format!(
                    "snapshot time {ts} outside [0, t_end]"
                )));
            }
        }
        Ok(())
    }

    /// Number of time steps; `t_end` is rounded to a whole number of steps.
    fn n_steps(&self) -> usize {
        ((self.t_end / self.dt).round() as usize).max(1)
    }
}

/// Integrator state at one time point.
#[derive(Debug, Clone)]
pub struct PathState {
    pub u: Field,
    pub gamma: f64,
    /// Cumulative Brownian motion `β_t` (needed for the variance-reduced
    /// phase series).
    pub beta: f64,
    /// Running memory integral `∫₀ᵗ e^{−ε(t−s)} ‖V(s)‖²_{H¹} ds`.
    pub neps_integral: f64,
    /// `‖V(t)‖²_{L²}` at the current time.
    pub v_l2_sq: f64,
    pub t: f64,
}

impl PathState {
    /// `N_ε(t) = ‖V‖²_{L²} + ∫₀ᵗ e^{−ε(t−s)}‖V‖²_{H¹} ds`.
    pub fn neps(&self) -> f64 {
        self.v_l2_sq + self.neps_integral
    }
}

/// Profiles of one realization resolved in the lab frame and the three
/// comoving frames.
#[derive(Debug, Clone)]
pub struct FrameSnapshot {
    pub t: f64,
    pub lab: Field,
    /// `U(· + c₀t)` — the deterministic frame, in which the corrected wave
    /// drifts.
    pub frame_c0: Field,
    /// `U(· + c_σt)`.
    pub frame_csigma: Field,
    /// `U(· + Γ(t))` — the tracked frame, in which the profile is pinned.
    pub frame_gamma: Field,
}

/// Recorded series of one path.
#[derive(Debug, Clone)]
pub struct PathRecord {
    pub times: Vec<f64>,
    pub gamma_series: Vec<f64>,
    /// `Γ(t) − c_σ t`.
    pub gamma_minus_cst: Vec<f64>,
    /// `Γ(t) − c_σ t − σ b(Φ_σ, ψ) β_t`: the leading Brownian term is
    /// subtracted, leaving the `O(σ²)` drift plus higher-order fluctuations.
    pub gamma_vr: Vec<f64>,
    pub neps_series: Vec<f64>,
    pub v_l2_series: Vec<f64>,
    /// Lab-frame position of the first-component maximum (parabolically
    /// refined argmax; meaningful for pulse-like profiles).
    pub position_series: Vec<f64>,
    /// Max of `N_ε` over the recorded times.
    pub sup_neps: f64,
    pub brownian_increments_seed: u64,
    pub snapshots: Vec<FrameSnapshot>,
}

/// Exponential-memory update of the `N_ε` integral term:
/// `I_{k+1} = e^{−ε·dt} I_k + dt·e^{−ε·dt/2} ‖V‖²_{H¹}`.
pub fn neps_update(prev_integral: f64, v_h1_sq: f64, dt: f64, eps: f64) -> f64 {
    (-eps * dt).exp() * prev_integral + dt * (-eps * dt / 2.0).exp() * v_h1_sq
}

/// `V(t) = T_{−Γ(t)}U(t) − Φ_σ`.
pub fn deviation(state: &PathState, swave: &StochasticWave) -> Result<Field> {
    let mut v = state.u.shift(-state.gamma)?;
    v.axpy(-1.0, &swave.profile)?;
    Ok(v)
}

/// Lab-frame position of the maximum of component `comp`, refined by a
/// parabola through the three nodes around the discrete argmax.
pub fn wave_position(u: &Field, comp: usize) -> f64 {
    let vals = u.component_slice(comp);
    let grid = u.grid();
    let mut k_max = 0;
    for (k, &v) in vals.iter().enumerate() {
        if v > vals[k_max] {
            k_max = k;
        }
    }
    if k_max == 0 || k_max + 1 == vals.len() {
        return grid.node(k_max);
    }
    let (ym, y0, yp) = (vals[k_max - 1], vals[k_max], vals[k_max + 1]);
    let curv = ym - 2.0 * y0 + yp;
    let delta = if curv.abs() < 1e-300 {
        0.0
    } else {
        (0.5 * (ym - yp) / curv).clamp(-0.5, 0.5)
    };
    grid.node(k_max) + delta * grid.spacing()
}

/// Phase offset `γ₀` solving `⟨T_{−γ}u0 − Φ_σ, ψ⟩ = 0`, found by a bracket
/// scan on `[−L/2, L/2]`, bisection, and a Newton polish to `1e−10`.  When
/// several roots exist the one closest to zero is returned.
pub fn init_gamma0(u0: &Field, swave: &StochasticWave, psi: &Field) -> Result<f64> {
    let half = u0.grid().half_length();
    let target = swave.profile.inner(psi)?;
    let du0 = u0.diff1();
    let f = |gamma: f64| -> Result<f64> { Ok(u0.shift(-gamma)?.inner(psi)? - target) };
    let fd = |gamma: f64| -> Result<f64> { du0.shift(-gamma)?.inner(psi) };

    let n_scan = 128;
    let mut best: Option<(f64, f64)> = None;
    let mut prev = (-0.5 * half, f(-0.5 * half)?);
    for k in 1..=n_scan {
        let g = -0.5 * half + half * k as f64 / n_scan as f64;
        let val = f(g)?;
        if prev.1 == 0.0 || prev.1 * val < 0.0 {
            let mid = 0.5 * (prev.0 + g);
            if best.is_none_or(|(b, _)| mid.abs() < b.abs()) {
                best = Some((mid, prev.0));
            }
        }
        prev = (g, val);
    }
    let (_, mut lo) = best.ok_or_else(|| {
        Error::numerical(
            "no phase bracket: ⟨T_{−γ}u0 − Φ_σ, ψ⟩ has no sign change on [−L/2, L/2]",
        )
    })?;
    let mut hi = lo + half / n_scan as f64;
    let mut flo = f(lo)?;
    if flo * f(hi)? > 0.0 {
        return Err(Error::numerical("phase bracket lost during bisection setup"));
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid)?;
        if flo * fm <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
            flo = fm;
        }
        if hi - lo < 1e-6 {
            break;
        }
    }
    let mut gamma = 0.5 * (lo + hi);
    for _ in 0..30 {
        let val = f(gamma)?;
        let slope = fd(gamma)?;
        if slope.abs() < 1e-14 {
            break;
        }
        let step = val / slope;
        gamma -= step;
        if step.abs() < 1e-12 {
            break;
        }
    }
    if f(gamma)?.abs() > 1e-10 * (1.0 + target.abs()) {
        return Err(Error::numerical("phase root polish did not converge to 1e-10"));
    }
    Ok(gamma)
}

/// One-path stepper with the implicit diffusion factorizations and the frame
/// function derivatives cached.
pub struct Stepper {
    model: Model,
    cut: Cutoffs,
    phi: Field,
    psi: Field,
    psi_dd: Field,
    c_sigma: f64,
    sigma: f64,
    dt: f64,
    eps: f64,
    /// Per-component LU of `I − dt·ρ_c·D₂` (tridiagonal, Neumann closure).
    lus: Vec<BandLu>,
    grid: Arc<Grid>,
}

impl Stepper {
    pub fn new(cfg: &SimConfig) -> Result<Stepper> {
        cfg.validate()?;
        let grid = cfg.swave.profile.grid().clone();
        let n = grid.points();
        let h = grid.spacing();
        let mut lus = Vec::with_capacity(cfg.model.n_comp());
        for c in 0..cfg.model.n_comp() {
            let r = cfg.dt * cfg.model.rho()[c] / (h * h);
            let mut m = BandMatrix::new(n, 1, 1);
            m.set(0, 0, 1.0 + 2.0 * r);
            m.set(0, 1, -2.0 * r);
            for k in 1..n - 1 {
                m.set(k, k - 1, -r);
                m.set(k, k, 1.0 + 2.0 * r);
                m.set(k, k + 1, -r);
            }
            m.set(n - 1, n - 2, -2.0 * r);
            m.set(n - 1, n - 1, 1.0 + 2.0 * r);
            lus.push(m.factorize()?);
        }
        Ok(Stepper {
            model: cfg.model.clone(),
            cut: cfg.cutoffs,
            phi: cfg.swave.profile.clone(),
            psi: cfg.psi.clone(),
            psi_dd: cfg.psi.diff2(),
            c_sigma: cfg.swave.speed,
            sigma: cfg.sigma,
            dt: cfg.dt,
            eps: cfg.eps,
            lus,
            grid,
        })
    }

    /// Initial state at `t = 0` from `u0` and its phase `γ₀`.
    pub fn initial_state(&self, u0: Field, gamma0: f64) -> Result<PathState> {
        let mut state = PathState {
            u: u0,
            gamma: gamma0,
            beta: 0.0,
            neps_integral: 0.0,
            v_l2_sq: 0.0,
            t: 0.0,
        };
        let v = deviation(&state, &self.reference())?;
        state.v_l2_sq = v.norm_l2_sq();
        Ok(state)
    }

    fn reference(&self) -> StochasticWave {
        StochasticWave {
            profile: self.phi.clone(),
            speed: self.c_sigma,
            sigma: self.sigma,
            btilde: 0.0,
            kappa: vec![1.0; self.model.n_comp()],
            residual_norm: 0.0,
            newton_iters: 0,
        }
    }

    /// Advance one semi-implicit Euler–Maruyama step with Brownian increment
    /// `dw ~ N(0, dt)` shared by the field and phase equations.
    pub fn step(&self, state: &mut PathState, dw: f64) -> Result<()> {
        // Phase coefficients at the current state, against the shifted frame
        // function.  The second derivative of ψ is shifted, not recomputed.
        let psi_g = self.psi.shift(state.gamma)?;
        let psi_dd_g = self.psi_dd.shift(state.gamma)?;
        let f_u = self.model.reaction_field(&state.u);
        let g_u = self.model.noise_field(&state.u);
        let du = state.u.diff1();
        let gd = g_u.diff1();
        let (a, b) = phase_rates_precomputed(
            self.model.rho(),
            &self.cut,
            &state.u,
            &du,
            &f_u,
            &g_u,
            &gd,
            self.c_sigma,
            &psi_g,
            &psi_dd_g,
            self.sigma,
        )?;

        // Field update: (I − dt ρ D₂) U_{k+1} = U_k + dt f(U_k) + σ g(U_k) dW.
        let n = self.grid.points();
        let mut rhs = vec![0.0; n];
        for c in 0..self.model.n_comp() {
            {
                let u_c = state.u.component_slice(c);
                let f_c = f_u.component_slice(c);
                let g_c = g_u.component_slice(c);
                for k in 0..n {
                    rhs[k] = u_c[k] + self.dt * f_c[k] + self.sigma * g_c[k] * dw;
                }
            }
            self.lus[c].solve_in_place(&mut rhs);
            state.u.component_mut_slice(c).copy_from_slice(&rhs);
        }

        // Phase update (explicit), shared increment.
        state.gamma += self.dt * (self.c_sigma + a) + self.sigma * b * dw;
        state.beta += dw;
        state.t += self.dt;

        if !state.gamma.is_finite() || state.u.values().iter().any(|x| !x.is_finite()) {
            return Err(Error::numerical(format!(
                "path blew up (NaN/Inf) at t = {:.6}",
                state.t
            )));
        }

        // Deviation and stability functional at the new time.
        let mut v = state.u.shift(-state.gamma)?;
        v.axpy(-1.0, &self.phi)?;
        state.neps_integral = neps_update(state.neps_integral, v.h1_norm_sq(), self.dt, self.eps);
        state.v_l2_sq = v.norm_l2_sq();
        Ok(())
    }
}

/// Integrate one full path.  `(cfg, seed)` determines the output exactly.
pub fn run_path(cfg: &SimConfig, seed: u64) -> Result<PathRecord> {
    cfg.validate()?;
    let stepper = Stepper::new(cfg)?;
    let u0 = match &cfg.u0 {
        Some(u0) => u0.clone(),
        None => cfg.swave.profile.clone(),
    };
    let gamma0 = match &cfg.u0 {
        Some(u0) => init_gamma0(u0, &cfg.swave, &cfg.psi)?,
        None => 0.0,
    };
    let b_star = eval_b(&cfg.model, &cfg.cutoffs, &cfg.swave.profile, &cfg.psi)?;
    let mut state = stepper.initial_state(u0, gamma0)?;

    let n = cfg.n_steps();
    let snap_steps: BTreeSet<usize> = cfg
        .snapshot_times
        .iter()
        .map(|&ts| ((ts / cfg.dt).round() as usize).min(n))
        .collect();

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let sqrt_dt = cfg.dt.sqrt();
    let mut rec = PathRecord {
        times: Vec::new(),
        gamma_series: Vec::new(),
        gamma_minus_cst: Vec::new(),
        gamma_vr: Vec::new(),
        neps_series: Vec::new(),
        v_l2_series: Vec::new(),
        position_series: Vec::new(),
        sup_neps: 0.0,
        brownian_increments_seed: seed,
        snapshots: Vec::new(),
    };
    for k in 0..=n {
        if k % cfg.record_stride == 0 || k == n {
            let drift = state.gamma - cfg.swave.speed * state.t;
            rec.times.push(state.t);
            rec.gamma_series.push(state.gamma);
            rec.gamma_minus_cst.push(drift);
            rec.gamma_vr.push(drift - cfg.sigma * b_star * state.beta);
            let neps = state.neps();
            rec.neps_series.push(neps);
            rec.v_l2_series.push(state.v_l2_sq.sqrt());
            rec.position_series.push(wave_position(&state.u, 0));
            rec.sup_neps = rec.sup_neps.max(neps);
        }
        if snap_steps.contains(&k) {
            rec.snapshots.push(FrameSnapshot {
                t: state.t,
                lab: state.u.clone(),
                frame_c0: state.u.shift(-cfg.c0 * state.t)?,
                frame_csigma: state.u.shift(-cfg.swave.speed * state.t)?,
                frame_gamma: state.u.shift(-state.gamma)?,
            });
        }
        if k < n {
            let dw: f64 = sqrt_dt * rng.sample::<f64, _>(StandardNormal);
            stepper.step(&mut state, dw)?;
        }
    }
    Ok(rec)
}
