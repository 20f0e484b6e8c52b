//! Deterministic traveling waves: profile/speed Newton solves, linearization
//! assembly, the adjoint zero mode, and spectral-gap certificates.
//!
//! The traveling-wave equation `ρ Φ'' + c Φ' + f(Φ) = 0` is discretized on an
//! interleaved node-major layout and solved together with an integral phase
//! condition `⟨Φ - Φ_seed, Φ_seed'⟩ = 0` as a bordered banded system.  The
//! operator closure is homogeneous-Neumann at both ends (profiles are flat
//! there), which keeps the Jacobian an exact derivative of the discrete
//! residual and the bandwidth equal to the component count.

use crate::band::BandMatrix;
use crate::grid::{Field, Grid};
use crate::kinetics::{fhn_model, nagumo_front, nagumo_speed, FhnNoise, Model};
use crate::{Error, Result};
use ndarray::{Array1, Array2};
use ndarray_linalg::{Eig, EigVals};
use num_complex::Complex64;
use std::sync::Arc;

/// First derivative with the same closure the operator assembly uses:
/// central differences inside, zero in the boundary rows (the ghost-point
/// image of a flat profile).  [`Field::diff1`] with its one-sided rows is the
/// right choice for functionals of a field; this variant is the right choice
/// inside residuals that must match [`assemble_linearization`] exactly.
pub(crate) fn d1_neumann(u: &Field) -> Field {
    let n = u.grid().points();
    let h = u.grid().spacing();
    let mut out = Field::zeros(u.grid().clone(), u.n_comp());
    for c in 0..u.n_comp() {
        let v = u.component_slice(c);
        let d = out.component_mut_slice(c);
        d[0] = 0.0;
        for k in 1..n - 1 {
            d[k] = (v[k + 1] - v[k - 1]) / (2.0 * h);
        }
        d[n - 1] = 0.0;
    }
    out
}

/// Weighted dot product of interleaved vectors.
pub(crate) fn wdot(w: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += w[i] * a[i] * b[i];
    }
    acc
}

/// Assembles the linearization `L = ρ ∂_ξξ + c ∂_ξ + Df(Φ)` about a profile
/// as a banded matrix on the interleaved layout `x[k·n + i]`.
pub fn assemble_linearization(model: &Model, profile: &Field, speed: f64) -> BandMatrix {
    let nc = model.n_comp();
    assert_eq!(profile.n_comp(), nc, "profile/model component mismatch");
    let n = profile.grid().points();
    let h = profile.grid().spacing();
    let h2 = h * h;
    let mut a = BandMatrix::new(n * nc, nc, nc);
    let mut pt = vec![0.0; nc];
    let mut jac = vec![0.0; nc * nc];
    for k in 0..n {
        for c in 0..nc {
            pt[c] = profile.component(c)[k];
        }
        model.reaction_jac_at(&pt, &mut jac);
        for c in 0..nc {
            let row = k * nc + c;
            let rho = model.rho()[c];
            if k == 0 {
                a.add(row, nc + c, 2.0 * rho / h2);
                a.add(row, c, -2.0 * rho / h2);
            } else if k == n - 1 {
                a.add(row, row - nc, 2.0 * rho / h2);
                a.add(row, row, -2.0 * rho / h2);
            } else {
                a.add(row, row - nc, rho / h2 - speed / (2.0 * h));
                a.add(row, row, -2.0 * rho / h2);
                a.add(row, row + nc, rho / h2 + speed / (2.0 * h));
            }
            for c2 in 0..nc {
                a.add(row, k * nc + c2, jac[c * nc + c2]);
            }
        }
    }
    a
}

/// Discrete adjoint of the linearization with respect to the trapezoid inner
/// product: `L* = W⁻¹ Lᵀ W`.  By construction `⟨L v, w⟩ = ⟨v, L* w⟩` holds
/// for *all* grid fields (not only compactly supported ones) and the spectra
/// of `L` and `L*` coincide exactly.
pub fn assemble_adjoint(model: &Model, profile: &Field, speed: f64) -> BandMatrix {
    let a = assemble_linearization(model, profile, speed);
    let w = profile.grid().weights_interleaved(model.n_comp());
    a.weighted_adjoint(&w)
}

/// Discrete traveling-wave residual `ρ D₂Φ + c D₁Φ + f(Φ)` with the
/// assembly closure.
pub fn wave_residual(model: &Model, profile: &Field, speed: f64) -> Field {
    let mut res = profile.diff2();
    for c in 0..model.n_comp() {
        let rho = model.rho()[c];
        for v in res.component_mut_slice(c) {
            *v *= rho;
        }
    }
    res.axpy(speed, &d1_neumann(profile)).expect("same grid");
    res.axpy(1.0, &model.reaction_field(profile)).expect("same grid");
    res
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonOpts {
    /// Convergence: weighted residual norm ≤ tol · (1 + ‖Φ‖).
    pub tol: f64,
    pub max_iters: usize,
    /// Smallest backtracking step before the line search gives up.
    pub min_step: f64,
}

impl Default for NewtonOpts {
    fn default() -> Self {
        NewtonOpts {
            tol: 1e-10,
            max_iters: 50,
            min_step: (2.0f64).powi(-20),
        }
    }
}

/// A converged traveling-wave profile and speed.
#[derive(Debug, Clone)]
pub struct WaveSolution {
    pub profile: Field,
    pub speed: f64,
    /// Final weighted norm of (PDE residual, phase residual).
    pub residual_norm: f64,
    pub newton_iters: usize,
    /// Worst componentwise deviation of the profile from `u_±` at the ends.
    pub boundary_gap: f64,
}

fn boundary_gap(model: &Model, profile: &Field) -> f64 {
    let n = profile.grid().points();
    let mut worst = 0.0f64;
    for c in 0..model.n_comp() {
        let v = profile.component_slice(c);
        worst = worst.max((v[0] - model.u_minus()[c]).abs());
        worst = worst.max((v[n - 1] - model.u_plus()[c]).abs());
    }
    worst
}

/// Damped Newton iteration for `(Φ, c)` with the integral phase condition
/// anchored at the seed profile.
///
/// Fails with a numerical error when the iteration stalls, exceeds
/// `max_iters`, or the converged profile does not settle to `u_±` at the
/// window ends within 1e-4 (the window is then too small for the wave).
pub fn solve_wave(
    model: &Model,
    seed: &Field,
    seed_speed: f64,
    opts: NewtonOpts,
) -> Result<WaveSolution> {
    if seed.n_comp() != model.n_comp() {
        return Err(Error::validation(format!(
            "seed has {} components, model has {}",
            seed.n_comp(),
            model.n_comp()
        )));
    }
    if !seed_speed.is_finite() {
        return Err(Error::validation("seed speed must be finite"));
    }
    let nc = model.n_comp();
    let w = seed.grid().weights_interleaved(nc);
    let anchor = seed.clone();
    let anchor_d = anchor.diff1();
    let anchor_d_vec = anchor_d.to_interleaved();
    // phase-condition row: ⟨·, Φ_seed'⟩ in the weighted product
    let phase_row: Vec<f64> = anchor_d_vec
        .iter()
        .zip(&w)
        .map(|(v, wi)| v * wi)
        .collect();

    let mut phi = seed.clone();
    let mut c = seed_speed;

    let merit = |phi: &Field, c: f64| -> (Vec<f64>, f64, f64) {
        let r = wave_residual(model, phi, c).to_interleaved();
        let phase = {
            let mut d = phi.to_interleaved();
            let a = anchor.to_interleaved();
            for (x, y) in d.iter_mut().zip(&a) {
                *x -= y;
            }
            wdot(&w, &d, &anchor_d_vec)
        };
        let norm = (wdot(&w, &r, &r) + phase * phase).sqrt();
        (r, phase, norm)
    };

    let (mut r, mut phase, mut rnorm) = merit(&phi, c);
    let mut iters = 0;
    loop {
        let scale = 1.0 + phi.norm_l2();
        if rnorm <= opts.tol * scale {
            break;
        }
        if iters >= opts.max_iters {
            return Err(Error::numerical(format!(
                "wave Newton did not converge in {} iterations (residual {rnorm:.3e})",
                opts.max_iters
            )));
        }
        let jac = assemble_linearization(model, &phi, c);
        let dc_col = d1_neumann(&phi).to_interleaved();
        let cols = [dc_col];
        let rows = [phase_row.clone()];
        let corner = Array2::zeros((1, 1));
        let bordered = crate::band::Bordered::new(&jac, &cols, &rows, &corner)?;
        let rhs: Vec<f64> = r.iter().map(|v| -v).collect();
        let (dphi, dc) = bordered.solve(&rhs, &[-phase], 1);

        // backtracking line search on the merit norm
        let mut lambda = 1.0;
        let mut accepted = false;
        while lambda >= opts.min_step {
            let mut trial = phi.clone();
            {
                let tv = trial.values_mut();
                for k in 0..phi.grid().points() {
                    for comp in 0..nc {
                        tv[[comp, k]] += lambda * dphi[k * nc + comp];
                    }
                }
            }
            let trial_c = c + lambda * dc[0];
            let (tr, tphase, tnorm) = merit(&trial, trial_c);
            if tnorm <= (1.0 - 0.25 * lambda) * rnorm || tnorm <= opts.tol {
                phi = trial;
                c = trial_c;
                r = tr;
                phase = tphase;
                rnorm = tnorm;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            return Err(Error::numerical(format!(
                "wave Newton line search stalled at residual {rnorm:.3e} after {iters} iterations"
            )));
        }
        iters += 1;
    }
    let gap = boundary_gap(model, &phi);
    if gap > 1e-4 {
        return Err(Error::numerical(format!(
            "wave profile deviates from the rest states by {gap:.3e} at the window ends; \
             enlarge the window half-length"
        )));
    }
    Ok(WaveSolution {
        profile: phi,
        speed: c,
        residual_norm: rnorm,
        newton_iters: iters,
        boundary_gap: gap,
    })
}

/// Closed-form Nagumo front restricted to the grid, with the exact speed.
pub fn nagumo_seed(grid: Arc<Grid>, a: f64) -> (Field, f64) {
    let f = Field::from_fn(grid, 1, |_, xi| nagumo_front(xi));
    (f, nagumo_speed(a))
}

/// Pulse seed for the FitzHugh–Nagumo system: a front/back pair of Nagumo
/// fronts of width `width` for `u`, and the exact linear response for `w`
/// obtained from `(ρ_w D₂ + c D₁ - εγ) w = -ε u`.
pub fn fhn_seed(
    grid: Arc<Grid>,
    a: f64,
    eps: f64,
    gamma: f64,
    rho_w: f64,
    width: f64,
) -> Result<(Field, f64)> {
    let c = nagumo_speed(a);
    let u = Field::from_fn(grid.clone(), 1, |_, xi| {
        nagumo_front(xi - 0.5 * width) * (1.0 - nagumo_front(xi + 0.5 * width))
    });
    // banded solve for the w seed
    let n = grid.points();
    let h = grid.spacing();
    let h2 = h * h;
    let mut m = BandMatrix::new(n, 1, 1);
    for k in 0..n {
        if k == 0 {
            m.add(0, 1, 2.0 * rho_w / h2);
            m.add(0, 0, -2.0 * rho_w / h2);
        } else if k == n - 1 {
            m.add(k, k - 1, 2.0 * rho_w / h2);
            m.add(k, k, -2.0 * rho_w / h2);
        } else {
            m.add(k, k - 1, rho_w / h2 - c / (2.0 * h));
            m.add(k, k, -2.0 * rho_w / h2);
            m.add(k, k + 1, rho_w / h2 + c / (2.0 * h));
        }
        m.add(k, k, -eps * gamma);
    }
    let rhs: Vec<f64> = u.component_slice(0).iter().map(|v| -eps * v).collect();
    let wvals = m.factorize()?.solve(&rhs);
    let mut seed = Field::zeros(grid, 2);
    seed.component_mut_slice(0).copy_from_slice(u.component_slice(0));
    seed.component_mut_slice(1).copy_from_slice(&wvals);
    Ok((seed, c))
}

/// Builds the FitzHugh–Nagumo model and solves for its pulse, with a
/// continuation ladder in ε as fallback when the direct solve fails.
pub fn fhn_find_wave(
    grid: Arc<Grid>,
    a: f64,
    eps: f64,
    gamma: f64,
    rho_w: f64,
    noise: FhnNoise,
    opts: NewtonOpts,
) -> Result<(Model, WaveSolution)> {
    let model = fhn_model(a, eps, gamma, rho_w, noise)?;
    let (seed, c_seed) = fhn_seed(grid.clone(), a, eps, gamma, rho_w, 7.0)?;
    match solve_wave(&model, &seed, c_seed, opts) {
        Ok(wave) => Ok((model, wave)),
        Err(first_err) => {
            log::warn!("direct FHN solve failed ({first_err}); starting ε-continuation");
            let stages = 8;
            let mut current: Option<WaveSolution> = None;
            for k in 1..=stages {
                let eps_k = eps * k as f64 / stages as f64;
                let model_k = fhn_model(a, eps_k, gamma, rho_w, noise)?;
                let (stage_seed, stage_speed) = match &current {
                    Some(wv) => (wv.profile.clone(), wv.speed),
                    None => fhn_seed(grid.clone(), a, eps_k, gamma, rho_w, 7.0)?,
                };
                current = Some(solve_wave(&model_k, &stage_seed, stage_speed, opts).map_err(
                    |e| {
                        Error::numerical(format!(
                            "ε-continuation stage {k}/{stages} (ε = {eps_k:.4e}) failed: {e}"
                        ))
                    },
                )?);
            }
            Ok((model, current.expect("at least one stage ran")))
        }
    }
}

/// The adjoint zero mode `ψ`, normalized so that `⟨Φ', ψ⟩ = 1`.
#[derive(Debug, Clone)]
pub struct AdjointEigenfunction {
    pub psi: Field,
    /// The discrete eigenvalue nearest zero (ideally ~0; its size measures
    /// how well the grid preserves translation invariance).
    pub lambda: f64,
    /// Weighted eigen-residual ‖L*ψ - λψ‖ / ‖ψ‖ after convergence.
    pub residual: f64,
}

/// Inverse iteration on the discrete adjoint for the eigenvalue nearest
/// zero, with stagnation detection and the normalization `⟨Φ', ψ⟩ = 1`.
pub fn adjoint_eigenfunction(model: &Model, wave: &WaveSolution) -> Result<AdjointEigenfunction> {
    let nc = model.n_comp();
    let grid = wave.profile.grid().clone();
    let w = grid.weights_interleaved(nc);
    let astar = assemble_adjoint(model, &wave.profile, wave.speed);
    let lu = match astar.factorize() {
        Ok(lu) => lu,
        Err(_) => astar.scale_plus_identity(1.0, 1e-10).factorize()?,
    };
    let phi_d = wave.profile.diff1().to_interleaved();

    let mut x = phi_d.clone();
    let nrm = wdot(&w, &x, &x).sqrt();
    for v in x.iter_mut() {
        *v /= nrm;
    }
    let mut best_res = f64::INFINITY;
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut stale = 0;
    let mut ax = vec![0.0; x.len()];
    for _ in 0..100 {
        let mut y = lu.solve(&x);
        let ynrm = wdot(&w, &y, &y).sqrt();
        if !ynrm.is_finite() || ynrm == 0.0 {
            return Err(Error::numerical("adjoint inverse iteration produced a degenerate vector"));
        }
        for v in y.iter_mut() {
            *v /= ynrm;
        }
        astar.matvec(&y, &mut ax);
        let lambda = wdot(&w, &y, &ax);
        let mut res = 0.0;
        for i in 0..y.len() {
            let d = ax[i] - lambda * y[i];
            res += w[i] * d * d;
        }
        let res = res.sqrt();
        if res < best_res {
            if res > 0.5 * best_res {
                stale += 1;
            } else {
                stale = 0;
            }
            best_res = res;
            best = Some((y.clone(), lambda));
        } else {
            stale += 1;
        }
        x = y;
        if best_res <= 1e-13 || stale >= 3 {
            break;
        }
    }
    let (y, lambda) = best.ok_or_else(|| Error::numerical("adjoint inverse iteration failed"))?;
    if best_res > 1e-8 {
        return Err(Error::numerical(format!(
            "adjoint eigen-residual stalled at {best_res:.3e} (want ≤ 1e-8)"
        )));
    }
    // normalize against the translation mode
    let overlap = wdot(&w, &phi_d, &y);
    let scale_ref = wdot(&w, &phi_d, &phi_d).sqrt(); // ‖Φ'‖, ‖y‖ = 1
    if overlap.abs() < 1e-8 * scale_ref {
        return Err(Error::numerical(
            "adjoint mode is orthogonal to the translation mode; wrong eigenvalue branch",
        ));
    }
    let psi_vec: Vec<f64> = y.iter().map(|v| v / overlap).collect();
    let psi = Field::from_interleaved(grid, nc, &psi_vec);
    Ok(AdjointEigenfunction {
        psi,
        lambda,
        residual: best_res,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectrumMethod {
    Dense,
    ShiftInvertArnoldi,
}

/// Spectral data of the linearization about a wave.
#[derive(Debug, Clone)]
pub struct SpectralReport {
    /// Resolved eigenvalues, sorted by descending real part.
    pub eigenvalues: Vec<Complex64>,
    /// The resolved eigenvalue nearest zero (the discrete translation mode).
    pub zero_eig: Complex64,
    /// Half the distance from zero to the real part of the next-slowest
    /// resolved mode: the decay rate budget available to semigroup bounds.
    pub gap_beta: f64,
    /// Whether exactly one resolved eigenvalue sits within the zero cluster.
    pub zero_is_simple: bool,
    /// Supremum of `max Re eig(Df(u_±) - k²ρ)` over the resolved wavenumber
    /// range: an upper bound for the essential spectrum.
    pub essential_bound: f64,
    pub method: SpectrumMethod,
}

/// Upper bound for the essential spectrum from the dispersion relations at
/// the two rest states, sampling `k ∈ [0, k_max]`.
pub fn essential_bound(model: &Model, k_max: f64, samples: usize) -> f64 {
    let nc = model.n_comp();
    let mut worst = f64::NEG_INFINITY;
    let mut jac = vec![0.0; nc * nc];
    for state in [model.u_minus(), model.u_plus()] {
        model.reaction_jac_at(state, &mut jac);
        for s in 0..=samples {
            let k = k_max * s as f64 / samples as f64;
            let mut m = Array2::zeros((nc, nc));
            for r in 0..nc {
                for c in 0..nc {
                    m[[r, c]] = jac[r * nc + c];
                }
                m[[r, r]] -= k * k * model.rho()[r];
            }
            let eigs = m.eigvals().expect("small dense eigvals");
            for e in eigs.iter() {
                worst = worst.max(e.re);
            }
        }
    }
    worst
}

fn analyze_eigs(
    mut eigs: Vec<Complex64>,
    ess_bound: f64,
    method: SpectrumMethod,
) -> SpectralReport {
    eigs.sort_by(|a, b| b.re.total_cmp(&a.re).then(b.im.total_cmp(&a.im)));
    let zero_eig = *eigs
        .iter()
        .min_by(|a, b| a.norm().total_cmp(&b.norm()))
        .expect("nonempty spectrum");
    let radius = eigs.iter().map(|e| e.norm()).fold(0.0f64, f64::max);
    let cluster = 1e-6 * radius.max(1.0);
    let n_zero = eigs.iter().filter(|e| e.norm() <= cluster).count();
    // slowest nonzero mode: largest real part among eigenvalues outside the
    // zero cluster (excluding the nearest-zero one even if it escaped the
    // cluster threshold)
    let mut slowest = f64::NEG_INFINITY;
    for e in &eigs {
        if *e == zero_eig || e.norm() <= cluster {
            continue;
        }
        slowest = slowest.max(e.re);
    }
    let gap_beta = if slowest.is_finite() { -slowest / 2.0 } else { 0.0 };
    SpectralReport {
        zero_eig,
        gap_beta,
        zero_is_simple: n_zero <= 1,
        essential_bound: ess_bound,
        eigenvalues: eigs,
        method,
    }
}

/// Eigenvalues of the linearization about a wave.
///
/// Dense LAPACK when the total dimension is ≤ 4096; otherwise shift-invert
/// Arnoldi around zero resolving `num_eigs` eigenvalues (default 40).
pub fn spectrum(model: &Model, wave: &WaveSolution, num_eigs: Option<usize>) -> Result<SpectralReport> {
    let a = assemble_linearization(model, &wave.profile, wave.speed);
    let dim = a.n();
    let k_max = std::f64::consts::PI / wave.profile.grid().spacing();
    let ess = essential_bound(model, k_max, 400);
    if dim <= 4096 {
        let eigs = a
            .to_dense()
            .eigvals()
            .map_err(|e| Error::numerical(format!("dense eigensolver failed: {e}")))?;
        Ok(analyze_eigs(eigs.to_vec(), ess, SpectrumMethod::Dense))
    } else {
        let k = num_eigs.unwrap_or(40).min(dim - 2);
        let eigs = shift_invert_arnoldi(&a, k)?;
        Ok(analyze_eigs(eigs, ess, SpectrumMethod::ShiftInvertArnoldi))
    }
}

/// Shift-invert Arnoldi at shift zero: resolves the `k` eigenvalues of `A`
/// nearest the origin.
fn shift_invert_arnoldi(a: &BandMatrix, k: usize) -> Result<Vec<Complex64>> {
    let n = a.n();
    let lu = match a.factorize() {
        Ok(lu) => lu,
        // exactly singular: nudge the shift off zero
        Err(_) => a.scale_plus_identity(1.0, 1e-10).factorize()?,
    };
    let m = (4 * k).clamp(80, 240).min(n);
    let mut v: Vec<Vec<f64>> = Vec::with_capacity(m + 1);
    let mut h = Array2::<f64>::zeros((m + 1, m));
    // deterministic start vector with broad spectral content
    let mut v0: Vec<f64> = (0..n)
        .map(|i| ((i as f64 * 0.7391).sin() + 0.3) / (n as f64).sqrt())
        .collect();
    let nrm = v0.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in v0.iter_mut() {
        *x /= nrm;
    }
    v.push(v0);
    let mut mstop = m;
    for j in 0..m {
        let mut wv = lu.solve(&v[j]);
        // modified Gram–Schmidt with one re-orthogonalization pass
        for _ in 0..2 {
            for (i, vi) in v.iter().enumerate() {
                let c: f64 = wv.iter().zip(vi).map(|(x, y)| x * y).sum();
                if c != 0.0 {
                    h[[i, j]] += c;
                    for (x, y) in wv.iter_mut().zip(vi) {
                        *x -= c * y;
                    }
                }
            }
        }
        let beta = wv.iter().map(|x| x * x).sum::<f64>().sqrt();
        h[[j + 1, j]] = beta;
        if beta < 1e-12 {
            mstop = j + 1;
            break;
        }
        for x in wv.iter_mut() {
            *x /= beta;
        }
        v.push(wv);
    }
    let hm = h.slice(ndarray::s![0..mstop, 0..mstop]).to_owned();
    let (ritz, vecs): (Array1<Complex64>, Array2<Complex64>) = hm
        .eig()
        .map_err(|e| Error::numerical(format!("Hessenberg eigensolver failed: {e}")))?;
    let beta_last = h[[mstop, mstop - 1]];
    // rank Ritz pairs by |μ| descending (eigenvalues of A nearest zero)
    let mut order: Vec<usize> = (0..ritz.len()).collect();
    order.sort_by(|&i, &j| ritz[j].norm().total_cmp(&ritz[i].norm()));
    let mut out = Vec::with_capacity(k);
    for &i in order.iter().take(k) {
        let mu = ritz[i];
        if mu.norm() < 1e-14 {
            continue;
        }
        let resid = beta_last * vecs[[mstop - 1, i]].norm();
        let rel = resid / mu.norm();
        if rel > 1e-8 {
            log::warn!(
                "Arnoldi Ritz value {:.4e}{:+.4e}i unconverged (rel residual {rel:.1e})",
                mu.re,
                mu.im
            );
        }
        out.push(Complex64::new(1.0, 0.0) / mu);
    }
    if out.is_empty() {
        return Err(Error::numerical("Arnoldi resolved no eigenvalues"));
    }
    Ok(out)
}
