//! Phase-coupling coefficients of the stochastic frame SDE and the
//! noise-corrected wave `(Φ_σ, c_σ)`.
//!
//! The scalar noise enters the frame dynamics through
//!
//! * `b(u, ψ) = -χ_high(⟨g(u), ψ⟩) / χ_low(⟨∂_ξ u, ψ⟩)` — the phase
//!   diffusion coefficient,
//! * `κ_{σ;i} = 1 + σ² b² / (2 ρ_i)` — the quadratic-variation correction to
//!   each diffusion coefficient,
//! * `a_σ(u, c, ψ)` — the order-σ² drift correction that keeps the tracked
//!   phase centered,
//!
//! and the corrected profile solves the modified wave equation
//! `ρ κ_σ Φ'' + c Φ' + f(Φ) + σ² b̃ ∂_ξ[g(Φ)] = 0` with `b̃` the uncut
//! variant of `b`.  Everything here depends on σ only through σ², so all
//! outputs are exactly even in σ.

use crate::band::{BandMatrix, Bordered};
use crate::detwave::{assemble_linearization, d1_neumann, wdot, NewtonOpts, WaveSolution};
use crate::grid::Field;
use crate::kinetics::{Cutoffs, Model};
use crate::{Error, Result};
use ndarray::Array2;

/// Phase diffusion coefficient `b(u, ψ)` with both cutoffs engaged.
pub fn eval_b(model: &Model, cut: &Cutoffs, u: &Field, psi: &Field) -> Result<f64> {
    let num = model.noise_field(u).inner(psi)?;
    let den = u.diff1().inner(psi)?;
    Ok(-cut.chi_high(num) / cut.chi_low(den))
}

/// Per-component diffusion corrections `κ_{σ;i}(u, ψ) = 1 + σ²b²/(2ρ_i)`.
pub fn eval_kappa(model: &Model, cut: &Cutoffs, u: &Field, psi: &Field, sigma: f64) -> Result<Vec<f64>> {
    let b = eval_b(model, cut, u, psi)?;
    Ok(model
        .rho()
        .iter()
        .map(|&rho| 1.0 + sigma * sigma * b * b / (2.0 * rho))
        .collect())
}

/// Drift correction
/// `a_σ(u, c, ψ) = -χ_low(⟨∂_ξu,ψ⟩)⁻¹ [ ⟨κ_σ u, ρ ∂_ξξψ⟩ + ⟨f(u) + c ∂_ξu + σ² b ∂_ξ[g(u)], ψ⟩ ]`.
pub fn eval_a(
    model: &Model,
    cut: &Cutoffs,
    u: &Field,
    c: f64,
    psi: &Field,
    sigma: f64,
) -> Result<f64> {
    phase_rates(model, cut, u, c, psi, &psi.diff2(), sigma).map(|(a, _)| a)
}

/// Both frame coefficients `(a_σ, b)` from a single evaluation.
///
/// Takes the second derivative of `ψ` precomputed so that time-stepping loops
/// (which shift `ψ` but never change its shape) do not re-difference it every
/// step.
pub fn phase_rates(
    model: &Model,
    cut: &Cutoffs,
    u: &Field,
    c: f64,
    psi: &Field,
    psi_dd: &Field,
    sigma: f64,
) -> Result<(f64, f64)> {
    let du = u.diff1();
    let g_u = model.noise_field(u);
    let gd = g_u.diff1();
    let f_u = model.reaction_field(u);
    phase_rates_precomputed(model.rho(), cut, u, &du, &f_u, &g_u, &gd, c, psi, psi_dd, sigma)
}

/// `phase_rates` with every pointwise field already evaluated: `du = ∂_ξu`,
/// `f_u = f(u)`, `g_u = g(u)`, `gd = ∂_ξ[g(u)]`.  The time stepper computes
/// these once per step for its own update and reuses them here.  Note
/// `κ_i ρ_i = ρ_i + σ²b²/2`, so the diffusion weights stay finite as
/// `ρ_i → 0`.
#[allow(clippy::too_many_arguments)]
pub fn phase_rates_precomputed(
    rho: &[f64],
    cut: &Cutoffs,
    u: &Field,
    du: &Field,
    f_u: &Field,
    g_u: &Field,
    gd: &Field,
    c: f64,
    psi: &Field,
    psi_dd: &Field,
    sigma: f64,
) -> Result<(f64, f64)> {
    let den_raw = du.inner(psi)?;
    let den = cut.chi_low(den_raw);
    let b = -cut.chi_high(g_u.inner(psi)?) / den;
    let s2 = sigma * sigma;
    let grid = u.grid();
    let mut term1 = 0.0;
    for (i, &rho_i) in rho.iter().enumerate() {
        let coeff = rho_i + 0.5 * s2 * b * b;
        let ui = u.component_slice(i);
        let pi = psi_dd.component_slice(i);
        let mut acc = 0.0;
        for k in 0..grid.points() {
            acc += grid.quad_weight(k) * ui[k] * pi[k];
        }
        term1 += coeff * acc;
    }
    let term2 = f_u.inner(psi)? + c * den_raw + s2 * b * gd.inner(psi)?;
    Ok((-(term1 + term2) / den, b))
}

/// Uncut phase coefficient `b̃(Φ) = -⟨g(Φ), ψ⟩ / ⟨∂_ξΦ, ψ⟩` entering the
/// corrected wave equation.
pub fn eval_btilde(model: &Model, phi: &Field, psi: &Field) -> Result<f64> {
    let num = model.noise_field(phi).inner(psi)?;
    let den = phi.diff1().inner(psi)?;
    if den.abs() < 1e-12 {
        return Err(Error::numerical(
            "b̃ undefined: ⟨∂_ξΦ, ψ⟩ vanished (profile lost its overlap with the reference frame)",
        ));
    }
    Ok(-num / den)
}

/// One-sided second-order first-derivative operator as a banded matrix
/// (bandwidth 2 only in the two boundary rows).
fn d1_matrix(field: &Field) -> BandMatrix {
    let n = field.grid().points();
    let nc = field.n_comp();
    let h = field.grid().spacing();
    let mut m = BandMatrix::new(n * nc, 2 * nc, 2 * nc);
    for c in 0..nc {
        m.set(c, c, -3.0 / (2.0 * h));
        m.set(c, nc + c, 4.0 / (2.0 * h));
        m.set(c, 2 * nc + c, -1.0 / (2.0 * h));
        let last = (n - 1) * nc + c;
        m.set(last, last, 3.0 / (2.0 * h));
        m.set(last, last - nc, -4.0 / (2.0 * h));
        m.set(last, last - 2 * nc, 1.0 / (2.0 * h));
        for k in 1..n - 1 {
            let row = k * nc + c;
            m.set(row, row - nc, -1.0 / (2.0 * h));
            m.set(row, row + nc, 1.0 / (2.0 * h));
        }
    }
    m
}

/// A noise-corrected traveling wave.
#[derive(Debug, Clone)]
pub struct StochasticWave {
    pub profile: Field,
    pub speed: f64,
    pub sigma: f64,
    /// `b̃(Φ_σ)` at the converged profile.
    pub btilde: f64,
    /// `κ_{σ;i}` at the converged profile.
    pub kappa: Vec<f64>,
    pub residual_norm: f64,
    pub newton_iters: usize,
}

fn stochastic_residual(
    model: &Model,
    phi: &Field,
    c: f64,
    psi: &Field,
    sigma: f64,
) -> Result<(Field, f64)> {
    let btilde = eval_btilde(model, phi, psi)?;
    let s2 = sigma * sigma;
    let mut res = phi.diff2();
    for i in 0..model.n_comp() {
        let kappa_rho = model.rho()[i] + s2 * btilde * btilde / 2.0;
        for v in res.component_mut_slice(i) {
            *v *= kappa_rho;
        }
    }
    res.axpy(c, &d1_neumann(phi))?;
    res.axpy(1.0, &model.reaction_field(phi))?;
    res.axpy(s2 * btilde, &d1_neumann(&model.noise_field(phi)))?;
    Ok((res, btilde))
}

/// Newton solve of the corrected wave equation at fixed σ, starting from
/// `(seed, seed_speed)`.  The nonlocal dependence through `b̃(Φ)` is folded
/// into the bordered system as a rank-one correction, so the iteration stays
/// an exact Newton method.
fn solve_at_sigma(
    model: &Model,
    psi: &Field,
    seed: &Field,
    seed_speed: f64,
    sigma: f64,
    anchor: &Field,
    opts: NewtonOpts,
) -> Result<(Field, f64, f64, usize)> {
    let nc = model.n_comp();
    let grid = seed.grid().clone();
    let w = grid.weights_interleaved(nc);
    let s2 = sigma * sigma;
    let anchor_d_vec = anchor.diff1().to_interleaved();
    let phase_row: Vec<f64> = anchor_d_vec.iter().zip(&w).map(|(v, wi)| v * wi).collect();
    let anchor_vec = anchor.to_interleaved();
    let d1op = d1_matrix(seed);
    let psi_vec = psi.to_interleaved();
    // row functional of δ⟨∂_ξ v, ψ⟩ = (D₁ᵀ W ψ)·v
    let mut dpsi_row = vec![0.0; psi_vec.len()];
    {
        let wpsi: Vec<f64> = psi_vec.iter().zip(&w).map(|(p, wi)| p * wi).collect();
        d1op.transpose().matvec(&wpsi, &mut dpsi_row);
    }

    let mut phi = seed.clone();
    let mut c = seed_speed;
    let merit = |phi: &Field, c: f64| -> Result<(Vec<f64>, f64, f64, f64)> {
        let (res, btilde) = stochastic_residual(model, phi, c, psi, sigma)?;
        let r = res.to_interleaved();
        let mut d = phi.to_interleaved();
        for (x, y) in d.iter_mut().zip(&anchor_vec) {
            *x -= y;
        }
        let phase = wdot(&w, &d, &anchor_d_vec) / wdot(&w, &anchor_d_vec, &anchor_d_vec);
        let norm = (wdot(&w, &r, &r) + phase * phase).sqrt();
        Ok((r, phase, norm, btilde))
    };

    let (mut r, mut phase, mut rnorm, mut btilde) = merit(&phi, c)?;
    let mut iters = 0;
    loop {
        let scale = 1.0 + phi.norm_l2();
        if rnorm <= opts.tol * scale {
            break;
        }
        if iters >= opts.max_iters {
            return Err(Error::numerical(format!(
                "corrected-wave Newton did not converge in {} iterations (σ = {sigma}, residual {rnorm:.3e})",
                opts.max_iters
            )));
        }
        // local part: linearization of ρκ D₂ + c D₁ + Df + σ²b̃ D₁ Dg at fixed b̃
        let mut jac = assemble_linearization(model, &phi, c);
        // upgrade diffusion ρ → ρ + σ²b̃²/2 by adding the D₂ difference
        let extra = s2 * btilde * btilde / 2.0;
        if extra != 0.0 {
            let n = grid.points();
            let h2 = grid.spacing() * grid.spacing();
            for comp in 0..nc {
                for k in 0..n {
                    let row = k * nc + comp;
                    if k == 0 {
                        jac.add(row, nc + comp, 2.0 * extra / h2);
                        jac.add(row, comp, -2.0 * extra / h2);
                    } else if k == n - 1 {
                        jac.add(row, row - nc, 2.0 * extra / h2);
                        jac.add(row, row, -2.0 * extra / h2);
                    } else {
                        jac.add(row, row - nc, extra / h2);
                        jac.add(row, row, -2.0 * extra / h2);
                        jac.add(row, row + nc, extra / h2);
                    }
                }
            }
        }
        if s2 * btilde != 0.0 {
            // + σ²b̃ · D₁∘Dg(Φ): bandwidth stays within nc because Dg is a
            // within-node block and D₁ couples only same-component neighbors
            // in its interior rows; the one-sided boundary rows of D₁ reach
            // two nodes, handled by zeroing (noise vanishes at the ends).
            let n = grid.points();
            let h = grid.spacing();
            let mut jbuf = vec![0.0; nc * nc];
            let mut pt = vec![0.0; nc];
            for k in 1..n - 1 {
                for comp in 0..nc {
                    let row = k * nc + comp;
                    for (sign, kk) in [(-1.0, k - 1), (1.0, k + 1)] {
                        for c2 in 0..nc {
                            pt[c2] = phi.component(c2)[kk];
                        }
                        model.noise_jac_at(&pt, &mut jbuf);
                        for c2 in 0..nc {
                            // cross-component couplings can exceed the band
                            // profile; only structurally present entries are
                            // written (zero entries never are)
                            let coeff = s2 * btilde * sign * jbuf[comp * nc + c2] / (2.0 * h);
                            if coeff != 0.0 {
                                jac.add(row, kk * nc + c2, coeff);
                            }
                        }
                    }
                }
            }
        }
        // rank-one correction: ∂R/∂b̃ · δb̃[v]
        // ∂R/∂b̃ = σ²(b̃ D₂Φ + D₁ g(Φ)), δb̃[v] = -(⟨Dg v, ψ⟩ + b̃⟨∂v, ψ⟩)/⟨∂Φ,ψ⟩
        let den = phi.diff1().inner(psi)?;
        let mut p_col = phi.diff2().to_interleaved();
        let gphi_d1 = d1_neumann(&model.noise_field(&phi)).to_interleaved();
        for (pv, gd) in p_col.iter_mut().zip(&gphi_d1) {
            *pv = s2 * (btilde * *pv + *gd);
        }
        let mut r_row = vec![0.0; p_col.len()];
        {
            // ⟨Dg(Φ)v, ψ⟩ = Σ w_i (Dgᵀψ)_i v_i
            let n = grid.points();
            let mut jbuf = vec![0.0; nc * nc];
            let mut pt = vec![0.0; nc];
            for k in 0..n {
                for c2 in 0..nc {
                    pt[c2] = phi.component(c2)[k];
                }
                model.noise_jac_at(&pt, &mut jbuf);
                for c2 in 0..nc {
                    let mut acc = 0.0;
                    for c3 in 0..nc {
                        acc += jbuf[c3 * nc + c2] * psi.component(c3)[k];
                    }
                    r_row[k * nc + c2] = grid.quad_weight(k) * acc;
                }
            }
            for (rr, dr) in r_row.iter_mut().zip(&dpsi_row) {
                *rr = -(*rr + btilde * *dr) / den;
            }
        }
        let dc_col = d1_neumann(&phi).to_interleaved();
        let phase_den = wdot(&w, &anchor_d_vec, &anchor_d_vec);
        let phase_row_scaled: Vec<f64> = phase_row.iter().map(|v| v / phase_den).collect();
        let cols = [p_col, dc_col];
        let rows = [r_row, phase_row_scaled];
        let mut corner = Array2::zeros((2, 2));
        corner[[0, 0]] = -1.0;
        let bordered = Bordered::new(&jac, &cols, &rows, &corner)?;
        let rhs: Vec<f64> = r.iter().map(|v| -v).collect();
        let (dphi, aux) = bordered.solve(&rhs, &[0.0, -phase], 1);
        let dc = aux[1];

        let mut lambda = 1.0;
        let mut accepted = false;
        while lambda >= opts.min_step {
            let mut trial = phi.clone();
            {
                let tv = trial.values_mut();
                for k in 0..grid.points() {
                    for comp in 0..nc {
                        tv[[comp, k]] += lambda * dphi[k * nc + comp];
                    }
                }
            }
            let trial_c = c + lambda * dc;
            match merit(&trial, trial_c) {
                Ok((tr, tphase, tnorm, tb)) if tnorm <= (1.0 - 0.25 * lambda) * rnorm || tnorm <= opts.tol => {
                    phi = trial;
                    c = trial_c;
                    r = tr;
                    phase = tphase;
                    rnorm = tnorm;
                    btilde = tb;
                    accepted = true;
                }
                _ => {
                    lambda *= 0.5;
                    continue;
                }
            }
            break;
        }
        if !accepted {
            return Err(Error::numerical(format!(
                "corrected-wave line search stalled (σ = {sigma}, residual {rnorm:.3e})"
            )));
        }
        iters += 1;
    }
    Ok((phi, c, rnorm, iters))
}

/// Solves the corrected wave equation at noise level σ by continuation from
/// the deterministic wave, bisecting the σ-steps adaptively when a stage
/// fails.  Results depend on σ only through σ², so ±σ give identical output.
pub fn solve_stochastic_wave(
    model: &Model,
    det_wave: &WaveSolution,
    psi: &Field,
    sigma: f64,
    opts: NewtonOpts,
) -> Result<StochasticWave> {
    if !sigma.is_finite() {
        return Err(Error::validation("sigma must be finite"));
    }
    let anchor = det_wave.profile.clone();
    let mut phi = det_wave.profile.clone();
    let mut c = det_wave.speed;
    let mut rnorm = det_wave.residual_norm;
    let mut total_iters = 0;
    let target = sigma.abs();
    let mut reached = 0.0f64;
    let mut step = target / 4.0;
    let mut failures = 0;
    while reached < target {
        if target == 0.0 {
            break;
        }
        let next = (reached + step).min(target);
        match solve_at_sigma(model, psi, &phi, c, next, &anchor, opts) {
            Ok((p, cc, rn, it)) => {
                phi = p;
                c = cc;
                rnorm = rn;
                total_iters += it;
                reached = next;
                step *= 1.5;
            }
            Err(e) => {
                failures += 1;
                step *= 0.5;
                if failures > 12 {
                    return Err(Error::numerical(format!(
                        "σ-continuation stalled at σ = {reached:.4e} targeting {target:.4e}: {e}"
                    )));
                }
            }
        }
    }
    if target == 0.0 {
        // verify the deterministic wave satisfies the σ = 0 equation
        let (res, _) = stochastic_residual(model, &phi, c, psi, 0.0)?;
        rnorm = res.norm_l2();
    }
    let btilde = eval_btilde(model, &phi, psi)?;
    let s2 = sigma * sigma;
    let kappa = model
        .rho()
        .iter()
        .map(|&rho| 1.0 + s2 * btilde * btilde / (2.0 * rho))
        .collect();
    Ok(StochasticWave {
        profile: phi,
        speed: c,
        sigma,
        btilde,
        kappa,
        residual_norm: rnorm,
        newton_iters: total_iters,
    })
}

/// Quadratic small-σ expansion `c_σ ≈ c₀ + σ² c₂` with the profile
/// correction `Φ₂` (gauge `⟨Φ₂, ψ⟩ = 0`).
#[derive(Debug, Clone)]
pub struct SpeedExpansion {
    pub c2: f64,
    pub phi2: Field,
    /// `b̃(Φ₀)` used to build the expansion.
    pub btilde: f64,
    /// Residual of the bordered solve.
    pub residual_norm: f64,
}

/// Solves `L Φ₂ + c₂ Φ₀' = -½ b̃² Φ₀'' - b̃ ∂_ξ[g(Φ₀)]` with gauge
/// `⟨Φ₂, ψ⟩ = 0`, and cross-checks `c₂` against the solvability formula
/// `c₂ = -½ b̃² ⟨Φ₀'', ψ⟩ - b̃ ⟨∂_ξ[g(Φ₀)], ψ⟩` (with `⟨Φ₀', ψ⟩ = 1`).
pub fn speed_expansion(
    model: &Model,
    det_wave: &WaveSolution,
    psi: &Field,
) -> Result<SpeedExpansion> {
    let phi0 = &det_wave.profile;
    let grid = phi0.grid().clone();
    let nc = model.n_comp();
    let w = grid.weights_interleaved(nc);
    let btilde = eval_btilde(model, phi0, psi)?;
    let phi0_d = phi0.diff1();
    let phi0_dd = phi0.diff2();
    let g_d = model.noise_field(phi0).diff1();

    let norm = phi0_d.inner(psi)?;
    let c2_formula = (-0.5 * btilde * btilde * phi0_dd.inner(psi)? - btilde * g_d.inner(psi)?) / norm;

    let mut rhs_field = phi0_dd.clone();
    rhs_field.scale(-0.5 * btilde * btilde);
    rhs_field.axpy(-btilde, &g_d)?;
    let rhs = rhs_field.to_interleaved();

    let a = assemble_linearization(model, phi0, det_wave.speed);
    let cols = [phi0_d.to_interleaved()];
    let psi_row: Vec<f64> = psi
        .to_interleaved()
        .iter()
        .zip(&w)
        .map(|(p, wi)| p * wi)
        .collect();
    let rows = [psi_row];
    let corner = Array2::zeros((1, 1));
    let bordered = Bordered::new(&a, &cols, &rows, &corner)?;
    let (phi2_vec, c2_vec) = bordered.solve(&rhs, &[0.0], 2);
    let c2 = c2_vec[0];

    // residual of the full bordered system
    let mut check = vec![0.0; rhs.len()];
    a.matvec(&phi2_vec, &mut check);
    let mut res = 0.0;
    for i in 0..check.len() {
        let d = rhs[i] - check[i] - c2 * cols[0][i];
        res += w[i] * d * d;
    }
    let res = res.sqrt();
    let phi2 = Field::from_interleaved(grid, nc, &phi2_vec);
    let gauge = phi2.inner(psi)?;

    if res > 1e-8 * (1.0 + phi2.norm_l2()) {
        return Err(Error::numerical(format!(
            "speed-expansion solve left residual {res:.3e}"
        )));
    }
    if gauge.abs() > 1e-10 * (1.0 + phi2.norm_l2()) {
        return Err(Error::numerical(format!(
            "speed-expansion gauge violated: ⟨Φ₂, ψ⟩ = {gauge:.3e}"
        )));
    }
    if (c2 - c2_formula).abs() > 1e-6 * c2_formula.abs().max(1.0) {
        return Err(Error::numerical(format!(
            "speed-expansion inconsistency: bordered c₂ = {c2:.8e}, solvability formula gives {c2_formula:.8e}"
        )));
    }
    Ok(SpeedExpansion {
        c2,
        phi2,
        btilde,
        residual_norm: res,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detwave::{nagumo_seed, solve_wave, adjoint_eigenfunction};
    use crate::grid::Grid;
    use crate::kinetics::nagumo_model;

    fn nagumo_setup(l: f64, n: usize) -> (Model, WaveSolution, Field) {
        let model = nagumo_model(0.1).unwrap();
        let grid = Grid::new(l, n).unwrap();
        let (seed, c) = nagumo_seed(grid, 0.1);
        let wave = solve_wave(&model, &seed, c, NewtonOpts::default()).unwrap();
        let adj = adjoint_eigenfunction(&model, &wave).unwrap();
        (model, wave, adj.psi)
    }

    #[test]
    fn eval_b_uses_cutoffs_on_degenerate_inputs() {
        let cut = Cutoffs::new(100.0).unwrap();
        let model = nagumo_model(0.1).unwrap();
        let grid = Grid::new(10.0, 256).unwrap();
        // field with tiny derivative-overlap: u ≈ constant level 0.5
        let u = Field::from_fn(grid.clone(), 1, |_, _| 0.5);
        let psi = Field::from_fn(grid, 1, |_, xi| (-xi * xi).exp());
        // ⟨∂u, ψ⟩ = 0 → χ_low floors at 1/4; ⟨g(u), ψ⟩ = 0.25·√π (in band)
        let b = eval_b(&model, &cut, &u, &psi).unwrap();
        let expect = -(0.25 * std::f64::consts::PI.sqrt()) / 0.25;
        assert!((b - expect).abs() < 1e-10, "b = {b}, expect {expect}");
    }

    #[test]
    fn eval_b_is_globally_bounded() {
        let cut = Cutoffs::new(100.0).unwrap();
        let model = nagumo_model(0.1).unwrap();
        let grid = Grid::new(10.0, 128).unwrap();
        for s in 0..20 {
            let amp = (s as f64 - 10.0) * 37.0;
            let u = Field::from_fn(grid.clone(), 1, |_, xi| amp * (xi * (s + 1) as f64).sin());
            let psi = Field::from_fn(grid.clone(), 1, |_, xi| (0.3 * xi).cos() * amp);
            let b = eval_b(&model, &cut, &u, &psi).unwrap();
            assert!(b.abs() <= 4.0 * (cut.k_high() + 1.0), "b = {b}");
        }
    }

    #[test]
    fn kappa_at_zero_sigma_is_identity() {
        let cut = Cutoffs::new(100.0).unwrap();
        let (model, wave, psi) = nagumo_setup(20.0, 400);
        let kap = eval_kappa(&model, &cut, &wave.profile, &psi, 0.0).unwrap();
        assert_eq!(kap, vec![1.0]);
        let kap2 = eval_kappa(&model, &cut, &wave.profile, &psi, 0.2).unwrap();
        assert!(kap2[0] > 1.0);
    }

    #[test]
    fn drift_vanishes_on_deterministic_wave() {
        let cut = Cutoffs::new(100.0).unwrap();
        let (model, wave, psi) = nagumo_setup(40.0, 2048);
        let a0 = eval_a(&model, &cut, &wave.profile, wave.speed, &psi, 0.0).unwrap();
        assert!(a0.abs() <= 1e-8, "a₀ = {a0:.3e}");
    }

    #[test]
    fn stochastic_wave_even_in_sigma_bitwise() {
        let (model, wave, psi) = nagumo_setup(30.0, 768);
        let plus = solve_stochastic_wave(&model, &wave, &psi, 0.08, NewtonOpts::default()).unwrap();
        let minus = solve_stochastic_wave(&model, &wave, &psi, -0.08, NewtonOpts::default()).unwrap();
        assert_eq!(plus.profile.values(), minus.profile.values());
        assert_eq!(plus.speed, minus.speed);
        assert_eq!(plus.btilde, minus.btilde);
    }

    #[test]
    fn stochastic_wave_at_zero_sigma_is_deterministic_wave() {
        let (model, wave, psi) = nagumo_setup(30.0, 768);
        let sw = solve_stochastic_wave(&model, &wave, &psi, 0.0, NewtonOpts::default()).unwrap();
        assert_eq!(sw.profile.values(), wave.profile.values());
        assert_eq!(sw.speed, wave.speed);
        assert_eq!(sw.kappa, vec![1.0]);
    }

    #[test]
    fn stochastic_wave_solves_modified_equation() {
        let (model, wave, psi) = nagumo_setup(30.0, 1024);
        let sigma = 0.1;
        let sw = solve_stochastic_wave(&model, &wave, &psi, sigma, NewtonOpts::default()).unwrap();
        assert!(sw.residual_norm <= 1e-9 * (1.0 + sw.profile.norm_l2()));
        assert!(sw.kappa[0] > 1.0);
        // the correction moves the speed by O(σ²·|c₂|), not more
        let exp = speed_expansion(&model, &wave, &psi).unwrap();
        let dev = (sw.speed - wave.speed - sigma * sigma * exp.c2).abs();
        assert!(
            dev <= 0.2 * (sigma * sigma * exp.c2).abs().max(1e-8),
            "c_σ - c₀ = {:.4e}, σ²c₂ = {:.4e}",
            sw.speed - wave.speed,
            sigma * sigma * exp.c2
        );
    }

    #[test]
    fn speed_expansion_consistency_fires_both_routes() {
        let (model, wave, psi) = nagumo_setup(30.0, 1024);
        let exp = speed_expansion(&model, &wave, &psi).unwrap();
        // the ctor already cross-checks the bordered c₂ against the
        // solvability formula at 1e-6; verify structure on top
        assert!(exp.residual_norm <= 1e-8 * (1.0 + exp.phi2.norm_l2()));
        assert!((exp.phi2.inner(&psi).unwrap()).abs() <= 1e-10 * (1.0 + exp.phi2.norm_l2()));
        assert!(exp.c2.is_finite() && exp.c2 != 0.0);
    }

    #[test]
    fn speed_deviation_shrinks_quartically() {
        let (model, wave, psi) = nagumo_setup(30.0, 1024);
        let exp = speed_expansion(&model, &wave, &psi).unwrap();
        let dev = |sigma: f64| {
            let sw = solve_stochastic_wave(&model, &wave, &psi, sigma, NewtonOpts::default()).unwrap();
            (sw.speed - wave.speed - sigma * sigma * exp.c2).abs()
        };
        let d1 = dev(0.1);
        let d2 = dev(0.05);
        let order = (d1 / d2).log2();
        assert!(order > 3.0, "observed σ-order {order} (devs {d1:.3e}, {d2:.3e})");
    }
}
