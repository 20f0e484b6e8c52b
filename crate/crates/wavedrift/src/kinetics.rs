//! Reaction terms, noise terms, diffusion coefficients, and the cutoff
//! functions used by the phase-tracking formulas.
//!
//! A [`Model`] bundles pointwise callbacks for the reaction `f`, its Jacobian
//! and directional second derivative, and the noise shape `g` with its
//! Jacobian.  Builders are provided for the FitzHugh–Nagumo system and the
//! scalar Nagumo equation; anything else can be assembled through
//! [`Model::new`] as long as the asymptotic states are genuine equilibria of
//! both `f` and `g`.

use crate::grid::Field;
use crate::{Error, Result};
use std::fmt;
use std::sync::Arc;

type PointFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
type PointFn2 = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;

#[derive(Clone)]
pub struct Model {
    name: String,
    n_comp: usize,
    rho: Vec<f64>,
    u_minus: Vec<f64>,
    u_plus: Vec<f64>,
    /// f(u) -> out (length n)
    reaction: PointFn,
    /// Df(u) -> out (row-major n×n)
    reaction_jac: PointFn,
    /// D²f(u)[v,v] -> out (length n)
    reaction_hess_dir: PointFn2,
    /// g(u) -> out (length n)
    noise: PointFn,
    /// Dg(u) -> out (row-major n×n)
    noise_jac: PointFn,
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("name", &self.name)
            .field("n_comp", &self.n_comp)
            .field("rho", &self.rho)
            .field("u_minus", &self.u_minus)
            .field("u_plus", &self.u_plus)
            .finish()
    }
}

impl Model {
    /// Assembles a model from parts, checking that the diffusion coefficients
    /// are positive and that `u_±` are equilibria of the reaction on which
    /// the noise vanishes.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        rho: Vec<f64>,
        u_minus: Vec<f64>,
        u_plus: Vec<f64>,
        reaction: PointFn,
        reaction_jac: PointFn,
        reaction_hess_dir: PointFn2,
        noise: PointFn,
        noise_jac: PointFn,
    ) -> Result<Model> {
        let n = rho.len();
        if n == 0 {
            return Err(Error::validation("model needs at least one component"));
        }
        if u_minus.len() != n || u_plus.len() != n {
            return Err(Error::validation(format!(
                "equilibria must have {n} components"
            )));
        }
        for (i, &r) in rho.iter().enumerate() {
            if !(r.is_finite() && r > 0.0) {
                return Err(Error::validation(format!(
                    "diffusion coefficient rho[{i}] = {r} must be positive"
                )));
            }
        }
        let model = Model {
            name: name.into(),
            n_comp: n,
            rho,
            u_minus,
            u_plus,
            reaction,
            reaction_jac,
            reaction_hess_dir,
            noise,
            noise_jac,
        };
        let mut buf = vec![0.0; n];
        for (label, state) in [("u_minus", &model.u_minus), ("u_plus", &model.u_plus)] {
            (model.reaction)(state, &mut buf);
            if buf.iter().any(|v| v.abs() > 1e-14) {
                return Err(Error::validation(format!(
                    "{label} is not an equilibrium of the reaction: f = {buf:?}"
                )));
            }
            (model.noise)(state, &mut buf);
            if buf.iter().any(|v| v.abs() > 1e-14) {
                return Err(Error::validation(format!(
                    "noise does not vanish at {label}: g = {buf:?}"
                )));
            }
        }
        Ok(model)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n_comp(&self) -> usize {
        self.n_comp
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn u_minus(&self) -> &[f64] {
        &self.u_minus
    }

    pub fn u_plus(&self) -> &[f64] {
        &self.u_plus
    }

    pub fn reaction_at(&self, u: &[f64], out: &mut [f64]) {
        (self.reaction)(u, out);
    }

    pub fn reaction_jac_at(&self, u: &[f64], out: &mut [f64]) {
        (self.reaction_jac)(u, out);
    }

    pub fn noise_at(&self, u: &[f64], out: &mut [f64]) {
        (self.noise)(u, out);
    }

    pub fn noise_jac_at(&self, u: &[f64], out: &mut [f64]) {
        (self.noise_jac)(u, out);
    }

    fn field_map(&self, u: &Field, f: &PointFn) -> Field {
        assert_eq!(u.n_comp(), self.n_comp, "field/model component mismatch");
        let n = u.grid().points();
        let nc = self.n_comp;
        let mut out = Field::zeros(u.grid().clone(), nc);
        let mut pt = vec![0.0; nc];
        let mut val = vec![0.0; nc];
        for k in 0..n {
            for c in 0..nc {
                pt[c] = u.component(c)[k];
            }
            f(&pt, &mut val);
            for c in 0..nc {
                out.component_mut(c)[k] = val[c];
            }
        }
        out
    }

    /// f applied nodewise.
    pub fn reaction_field(&self, u: &Field) -> Field {
        self.field_map(u, &self.reaction.clone())
    }

    /// g applied nodewise.
    pub fn noise_field(&self, u: &Field) -> Field {
        self.field_map(u, &self.noise.clone())
    }

    /// D²f(u)[v,v] applied nodewise.
    pub fn reaction_hess_dir_field(&self, u: &Field, v: &Field) -> Field {
        assert_eq!(u.n_comp(), self.n_comp);
        assert_eq!(v.n_comp(), self.n_comp);
        let n = u.grid().points();
        let nc = self.n_comp;
        let mut out = Field::zeros(u.grid().clone(), nc);
        let mut pu = vec![0.0; nc];
        let mut pv = vec![0.0; nc];
        let mut val = vec![0.0; nc];
        for k in 0..n {
            for c in 0..nc {
                pu[c] = u.component(c)[k];
                pv[c] = v.component(c)[k];
            }
            (self.reaction_hess_dir)(&pu, &pv, &mut val);
            for c in 0..nc {
                out.component_mut(c)[k] = val[c];
            }
        }
        out
    }

    /// Dg(u)·v applied nodewise.
    pub fn noise_jac_dir_field(&self, u: &Field, v: &Field) -> Field {
        let n = u.grid().points();
        let nc = self.n_comp;
        let mut out = Field::zeros(u.grid().clone(), nc);
        let mut pu = vec![0.0; nc];
        let mut jac = vec![0.0; nc * nc];
        for k in 0..n {
            for c in 0..nc {
                pu[c] = u.component(c)[k];
            }
            (self.noise_jac)(&pu, &mut jac);
            for r in 0..nc {
                let mut acc = 0.0;
                for c in 0..nc {
                    acc += jac[r * nc + c] * v.component(c)[k];
                }
                out.component_mut(r)[k] = acc;
            }
        }
        out
    }

    /// Compares the analytic Jacobians and the directional Hessian against
    /// central finite differences at random points; returns the worst
    /// relative discrepancy.  Used as a construction-sanity diagnostic.
    pub fn verify_derivatives(&self, seed: u64, n_points: usize) -> f64 {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = self.n_comp;
        let hstep = 1e-5;
        let mut worst = 0.0f64;
        let mut fp = vec![0.0; n];
        let mut fm = vec![0.0; n];
        let mut jac = vec![0.0; n * n];
        for _ in 0..n_points {
            let u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
            for (func, jfunc) in [
                (&self.reaction, &self.reaction_jac),
                (&self.noise, &self.noise_jac),
            ] {
                jfunc(&u, &mut jac);
                for c in 0..n {
                    let mut up = u.clone();
                    let mut um = u.clone();
                    up[c] += hstep;
                    um[c] -= hstep;
                    func(&up, &mut fp);
                    func(&um, &mut fm);
                    for r in 0..n {
                        let fd = (fp[r] - fm[r]) / (2.0 * hstep);
                        let scale = jac[r * n + c].abs().max(1.0);
                        worst = worst.max((jac[r * n + c] - fd).abs() / scale);
                    }
                }
            }
            // directional Hessian of the reaction against FD of the Jacobian
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut hv = vec![0.0; n];
            (self.reaction_hess_dir)(&u, &v, &mut hv);
            let mut jp = vec![0.0; n * n];
            let mut jm = vec![0.0; n * n];
            let up: Vec<f64> = u.iter().zip(&v).map(|(x, d)| x + hstep * d).collect();
            let um: Vec<f64> = u.iter().zip(&v).map(|(x, d)| x - hstep * d).collect();
            (self.reaction_jac)(&up, &mut jp);
            (self.reaction_jac)(&um, &mut jm);
            for r in 0..n {
                let mut fd = 0.0;
                for c in 0..n {
                    fd += (jp[r * n + c] - jm[r * n + c]) / (2.0 * hstep) * v[c];
                }
                let scale = hv[r].abs().max(1.0);
                worst = worst.max((hv[r] - fd).abs() / scale);
            }
        }
        worst
    }
}

/// Noise shape for the FitzHugh–Nagumo `u`-equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FhnNoise {
    /// g = (u, 0)
    LinearU,
    /// g = (χ(u)·u(1-u), 0) with χ a C² bump: 1 on |u| ≤ 2, 0 on |u| ≥ 3
    CubicCutoff,
}

/// Quintic smoothstep on [0, 1]: C² monotone ramp.
fn smoothstep(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x >= 1.0 {
        1.0
    } else {
        x * x * x * (10.0 + x * (-15.0 + 6.0 * x))
    }
}

fn smoothstep_d(x: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        0.0
    } else {
        30.0 * x * x * (1.0 - x) * (1.0 - x)
    }
}

fn fhn_bump(u: f64) -> f64 {
    1.0 - smoothstep(u.abs() - 2.0)
}

fn fhn_bump_d(u: f64) -> f64 {
    -smoothstep_d(u.abs() - 2.0) * u.signum()
}

/// FitzHugh–Nagumo:
/// `f(u, w) = (u(1-u)(u-a) - w, eps·(u - gamma·w))`, `rho = diag(1, rho_w)`.
pub fn fhn_model(a: f64, eps: f64, gamma: f64, rho_w: f64, noise: FhnNoise) -> Result<Model> {
    if !(a > 0.0 && a < 0.5) {
        return Err(Error::validation(format!(
            "fhn: threshold a = {a} outside (0, 0.5)"
        )));
    }
    if !(eps > 0.0 && gamma > 0.0 && rho_w > 0.0) {
        return Err(Error::validation(format!(
            "fhn: eps = {eps}, gamma = {gamma}, rho_w = {rho_w} must all be positive"
        )));
    }
    let cubic = move |u: f64| u * (1.0 - u) * (u - a);
    let cubic_d = move |u: f64| -3.0 * u * u + 2.0 * (1.0 + a) * u - a;
    let cubic_dd = move |u: f64| -6.0 * u + 2.0 * (1.0 + a);

    let reaction: PointFn = Arc::new(move |u, out| {
        out[0] = cubic(u[0]) - u[1];
        out[1] = eps * (u[0] - gamma * u[1]);
    });
    let reaction_jac: PointFn = Arc::new(move |u, out| {
        out[0] = cubic_d(u[0]);
        out[1] = -1.0;
        out[2] = eps;
        out[3] = -eps * gamma;
    });
    let reaction_hess_dir: PointFn2 = Arc::new(move |u, v, out| {
        out[0] = cubic_dd(u[0]) * v[0] * v[0];
        out[1] = 0.0;
    });
    let (noise_fn, noise_jac): (PointFn, PointFn) = match noise {
        FhnNoise::LinearU => (
            Arc::new(|u: &[f64], out: &mut [f64]| {
                out[0] = u[0];
                out[1] = 0.0;
            }),
            Arc::new(|_u: &[f64], out: &mut [f64]| {
                out[0] = 1.0;
                out[1] = 0.0;
                out[2] = 0.0;
                out[3] = 0.0;
            }),
        ),
        FhnNoise::CubicCutoff => (
            Arc::new(|u: &[f64], out: &mut [f64]| {
                out[0] = fhn_bump(u[0]) * u[0] * (1.0 - u[0]);
                out[1] = 0.0;
            }),
            Arc::new(|u: &[f64], out: &mut [f64]| {
                out[0] = fhn_bump_d(u[0]) * u[0] * (1.0 - u[0]) + fhn_bump(u[0]) * (1.0 - 2.0 * u[0]);
                out[1] = 0.0;
                out[2] = 0.0;
                out[3] = 0.0;
            }),
        ),
    };
    Model::new(
        "fhn",
        vec![1.0, rho_w],
        vec![0.0, 0.0],
        vec![0.0, 0.0],
        reaction,
        reaction_jac,
        reaction_hess_dir,
        noise_fn,
        noise_jac,
    )
}

/// Scalar Nagumo equation `u_t = u_xx + u(1-u)(u-a)` with noise shape
/// `g(u) = u(1-u)` (vanishing at both rest states).  The front connecting
/// `u_- = 1` to `u_+ = 0` has the closed form
/// `Φ(ξ) = 1 / (1 + exp(ξ/√2))`, `c = √2·(1/2 - a)`.
pub fn nagumo_model(a: f64) -> Result<Model> {
    if !(a > 0.0 && a < 0.5) {
        return Err(Error::validation(format!(
            "nagumo: threshold a = {a} outside (0, 0.5)"
        )));
    }
    let reaction: PointFn = Arc::new(move |u, out| {
        out[0] = u[0] * (1.0 - u[0]) * (u[0] - a);
    });
    let reaction_jac: PointFn = Arc::new(move |u, out| {
        out[0] = -3.0 * u[0] * u[0] + 2.0 * (1.0 + a) * u[0] - a;
    });
    let reaction_hess_dir: PointFn2 = Arc::new(move |u, v, out| {
        out[0] = (-6.0 * u[0] + 2.0 * (1.0 + a)) * v[0] * v[0];
    });
    let noise: PointFn = Arc::new(|u, out| {
        out[0] = u[0] * (1.0 - u[0]);
    });
    let noise_jac: PointFn = Arc::new(|u, out| {
        out[0] = 1.0 - 2.0 * u[0];
    });
    Model::new(
        "nagumo",
        vec![1.0],
        vec![1.0],
        vec![0.0],
        reaction,
        reaction_jac,
        reaction_hess_dir,
        noise,
        noise_jac,
    )
}

/// Closed-form Nagumo front profile (decreasing, 1 at -∞, 0 at +∞).
pub fn nagumo_front(xi: f64) -> f64 {
    1.0 / (1.0 + (xi / std::f64::consts::SQRT_2).exp())
}

/// Closed-form Nagumo front speed `√2 (1/2 - a)`.
pub fn nagumo_speed(a: f64) -> f64 {
    std::f64::consts::SQRT_2 * (0.5 - a)
}

/// The two cutoff functions entering the phase SDE coefficients.
///
/// * `chi_low: ℝ → [1/4, ∞)` equals `1/4` below `1/4` and the identity above
///   `1/2`, keeping the denominator `⟨∂_ξ u, ψ⟩` bounded away from zero.
/// * `chi_high` is odd, equals the identity on `[-K, K]` and saturates at
///   `±(K+1)`, keeping the diffusion coefficient of the phase bounded.
///
/// Both blend with a quintic smoothstep, so they are C² and monotone.
#[derive(Debug, Clone, Copy)]
pub struct Cutoffs {
    k_high: f64,
}

impl Cutoffs {
    pub fn new(k_high: f64) -> Result<Cutoffs> {
        if !(k_high.is_finite() && k_high >= 1.0) {
            return Err(Error::validation(format!(
                "cutoff level k_high = {k_high} must be ≥ 1"
            )));
        }
        Ok(Cutoffs { k_high })
    }

    pub fn k_high(&self) -> f64 {
        self.k_high
    }

    pub fn chi_low(&self, theta: f64) -> f64 {
        if theta <= 0.25 {
            0.25
        } else if theta >= 0.5 {
            theta
        } else {
            let x = 4.0 * (theta - 0.25);
            let s = smoothstep(x);
            (1.0 - s) * 0.25 + s * theta
        }
    }

    pub fn chi_low_d(&self, theta: f64) -> f64 {
        if theta <= 0.25 {
            0.0
        } else if theta >= 0.5 {
            1.0
        } else {
            let x = 4.0 * (theta - 0.25);
            smoothstep_d(x) * x + smoothstep(x)
        }
    }

    pub fn chi_high(&self, theta: f64) -> f64 {
        let k = self.k_high;
        let t = theta.abs();
        let v = if t <= k {
            t
        } else if t >= k + 1.0 {
            k + 1.0
        } else {
            t + smoothstep(t - k) * (k + 1.0 - t)
        };
        v.copysign(theta)
    }

    pub fn chi_high_d(&self, theta: f64) -> f64 {
        let k = self.k_high;
        let t = theta.abs();
        if t <= k {
            1.0
        } else if t >= k + 1.0 {
            0.0
        } else {
            let x = t - k;
            1.0 + smoothstep_d(x) * (k + 1.0 - t) - smoothstep(x)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fhn_parameter_validation() {
        assert!(fhn_model(0.0, 0.01, 5.0, 0.01, FhnNoise::LinearU).is_err());
        assert!(fhn_model(0.6, 0.01, 5.0, 0.01, FhnNoise::LinearU).is_err());
        assert!(fhn_model(0.1, -0.01, 5.0, 0.01, FhnNoise::LinearU).is_err());
        assert!(fhn_model(0.1, 0.01, 5.0, 0.0, FhnNoise::LinearU).is_err());
        assert!(fhn_model(0.1, 0.01, 5.0, 0.01, FhnNoise::LinearU).is_ok());
    }

    #[test]
    fn fhn_reaction_values() {
        let m = fhn_model(0.1, 0.01, 5.0, 0.01, FhnNoise::LinearU).unwrap();
        let mut out = vec![0.0; 2];
        // oracle: f(0.5, 0.2) = (0.5·0.5·0.4 - 0.2, 0.01·(0.5 - 1.0))
        m.reaction_at(&[0.5, 0.2], &mut out);
        assert!((out[0] - (0.5 * 0.5 * 0.4 - 0.2)).abs() < 1e-15);
        assert!((out[1] - 0.01 * (0.5 - 5.0 * 0.2)).abs() < 1e-15);
        // equilibrium
        m.reaction_at(&[0.0, 0.0], &mut out);
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn fhn_derivative_consistency() {
        for noise in [FhnNoise::LinearU, FhnNoise::CubicCutoff] {
            let m = fhn_model(0.1, 0.01, 5.0, 0.01, noise).unwrap();
            let worst = m.verify_derivatives(42, 25);
            assert!(worst < 1e-8, "noise {noise:?}: worst FD mismatch {worst}");
        }
    }

    #[test]
    fn nagumo_derivative_consistency() {
        let m = nagumo_model(0.25).unwrap();
        let worst = m.verify_derivatives(7, 25);
        assert!(worst < 1e-8, "worst FD mismatch {worst}");
    }

    #[test]
    fn nagumo_front_satisfies_ode_pointwise() {
        // oracle: Φ'' + cΦ' + Φ(1-Φ)(Φ-a) = 0 with the closed forms
        // Φ' = -Φ(1-Φ)/√2, Φ'' = Φ(1-Φ)(1-2Φ)/2
        let a = 0.1;
        let c = nagumo_speed(a);
        for &xi in &[-8.0, -2.5, -0.3, 0.0, 0.7, 3.1, 9.0] {
            let p = nagumo_front(xi);
            let dp = -p * (1.0 - p) / std::f64::consts::SQRT_2;
            let ddp = p * (1.0 - p) * (1.0 - 2.0 * p) / 2.0;
            let res = ddp + c * dp + p * (1.0 - p) * (p - a);
            assert!(res.abs() < 1e-15, "xi={xi}: residual {res}");
        }
    }

    #[test]
    fn fhn_cubic_cutoff_matches_plain_cubic_in_core_range() {
        let m = fhn_model(0.1, 0.01, 5.0, 0.01, FhnNoise::CubicCutoff).unwrap();
        let mut out = vec![0.0; 2];
        for u in [-1.9, -0.5, 0.0, 0.3, 1.0, 1.9] {
            m.noise_at(&[u, 0.4], &mut out);
            assert!((out[0] - u * (1.0 - u)).abs() < 1e-15, "u={u}");
            assert_eq!(out[1], 0.0);
        }
        // fully saturated region
        m.noise_at(&[3.5, 0.0], &mut out);
        assert_eq!(out[0], 0.0);
        m.noise_at(&[-3.5, 0.0], &mut out);
        assert_eq!(out[0], 0.0);
    }

    #[test]
    fn chi_low_identity_and_floor() {
        let cut = Cutoffs::new(100.0).unwrap();
        for t in [0.5, 0.75, 1.0, 5.0, 1e6] {
            assert_eq!(cut.chi_low(t), t);
        }
        for t in [-10.0, 0.0, 0.2, 0.25] {
            assert_eq!(cut.chi_low(t), 0.25);
        }
        // floor holds in the blend too
        for i in 0..=100 {
            let t = 0.25 + 0.25 * i as f64 / 100.0;
            let v = cut.chi_low(t);
            assert!(v >= 0.25 && v >= t.min(0.5) - 0.25, "t={t} v={v}");
            assert!(v >= 0.25 - 1e-15);
        }
    }

    #[test]
    fn chi_high_identity_band_and_saturation() {
        let k = 100.0;
        let cut = Cutoffs::new(k).unwrap();
        for t in [-100.0, -42.0, 0.0, 0.3, 99.9, 100.0] {
            assert_eq!(cut.chi_high(t), t);
        }
        for t in [101.0, 150.0, 1e9] {
            assert_eq!(cut.chi_high(t), k + 1.0);
            assert_eq!(cut.chi_high(-t), -(k + 1.0));
        }
        // odd symmetry through the blend
        for i in 0..=50 {
            let t = k + i as f64 / 50.0;
            assert!((cut.chi_high(-t) + cut.chi_high(t)).abs() < 1e-15);
            assert!(cut.chi_high(t) <= k + 1.0 + 1e-15);
        }
    }

    #[test]
    fn cutoffs_are_monotone_and_c1() {
        let cut = Cutoffs::new(3.0).unwrap();
        let fd = 1e-6;
        let mut prev_low = f64::NEG_INFINITY;
        let mut prev_high = f64::NEG_INFINITY;
        for i in 0..=4000 {
            let t = -5.0 + 10.0 * i as f64 / 4000.0;
            let lo = cut.chi_low(t);
            let hi = cut.chi_high(t);
            assert!(lo >= prev_low - 1e-12, "chi_low not monotone at {t}");
            assert!(hi >= prev_high - 1e-12, "chi_high not monotone at {t}");
            prev_low = lo;
            prev_high = hi;
            // analytic derivative vs central FD
            let dl = (cut.chi_low(t + fd) - cut.chi_low(t - fd)) / (2.0 * fd);
            let dh = (cut.chi_high(t + fd) - cut.chi_high(t - fd)) / (2.0 * fd);
            assert!((dl - cut.chi_low_d(t)).abs() < 1e-6, "chi_low' at {t}");
            assert!((dh - cut.chi_high_d(t)).abs() < 1e-6, "chi_high' at {t}");
        }
    }

    #[test]
    fn cutoff_validation() {
        assert!(Cutoffs::new(0.5).is_err());
        assert!(Cutoffs::new(f64::INFINITY).is_err());
        assert!(Cutoffs::new(1.0).is_ok());
    }
}
