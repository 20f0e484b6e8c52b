//! C ABI for the traveling-wave laboratory.
//!
//! Conventions:
//! - Every function returns a `wd_status` code; results come back through out
//!   pointers.  `WD_OK` is zero.
//! - Handles are opaque; free them with the matching `wd_*_free`.  Passing a
//!   handle after freeing it is undefined behavior, passing NULL is caught.
//! - The last failure message is kept per thread; fetch it with
//!   `wd_last_error_message`.
//!
//! The matching header lives at `include/wavedrift.h`.

use libc::{c_char, c_double, c_int, size_t};
use std::cell::RefCell;
use std::panic::{catch_unwind, AssertUnwindSafe};
use wavedrift::detwave::{
    adjoint_eigenfunction, fhn_find_wave, nagumo_seed, solve_wave, spectrum, AdjointEigenfunction,
    NewtonOpts, WaveSolution,
};
use wavedrift::ensemble::run_ensemble;
use wavedrift::grid::Grid;
use wavedrift::kinetics::{nagumo_model, Cutoffs, FhnNoise, Model};
use wavedrift::semigroup::{drift_coefficients, QuadratureConfig};
use wavedrift::spdesim::{run_path, PathRecord, SimConfig};
use wavedrift::stochwave::{solve_stochastic_wave, speed_expansion, StochasticWave};
use wavedrift::Error;

pub const WD_OK: c_int = 0;
pub const WD_ERR_VALIDATION: c_int = 1;
pub const WD_ERR_NUMERICAL: c_int = 2;
pub const WD_ERR_NULL: c_int = 3;
pub const WD_ERR_PANIC: c_int = 4;

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: &str) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.to_string());
}

fn status_of(err: &Error) -> c_int {
    match err.exit_code() {
        2 => WD_ERR_NUMERICAL,
        _ => WD_ERR_VALIDATION,
    }
}

/// Runs a fallible body under a panic guard, translating both error paths
/// into status codes.
fn guarded<F: FnOnce() -> Result<c_int, Error>>(f: F) -> c_int {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(code)) => code,
        Ok(Err(err)) => {
            set_error(&err.to_string());
            status_of(&err)
        }
        Err(_) => {
            set_error("internal panic");
            WD_ERR_PANIC
        }
    }
}

macro_rules! not_null {
    ($ptr:expr) => {
        match unsafe { $ptr.as_ref() } {
            Some(r) => r,
            None => {
                set_error(concat!("null pointer: ", stringify!($ptr)));
                return WD_ERR_NULL;
            }
        }
    };
}

macro_rules! out_ptr {
    ($ptr:expr) => {
        match unsafe { $ptr.as_mut() } {
            Some(r) => r,
            None => {
                set_error(concat!("null out pointer: ", stringify!($ptr)));
                return WD_ERR_NULL;
            }
        }
    };
}

/// Copies the last error message into `buf` (NUL-terminated, truncating) and
/// returns the full message length in bytes.
///
/// # Safety
/// `buf` must point to at least `cap` writable bytes, or be NULL (then only
/// the length is returned).
#[no_mangle]
pub unsafe extern "C" fn wd_last_error_message(buf: *mut c_char, cap: size_t) -> size_t {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            unsafe {
                std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
                *buf.add(n) = 0;
            }
        }
        bytes.len()
    })
}

// ---------------------------------------------------------------------------
// Deterministic wave
// ---------------------------------------------------------------------------

/// Opaque: a model with its traveling wave and adjoint frame function.
pub struct WdWave {
    model: Model,
    wave: WaveSolution,
    adjoint: AdjointEigenfunction,
}

fn build_wave(model: Model, wave: WaveSolution) -> Result<Box<WdWave>, Error> {
    let adjoint = adjoint_eigenfunction(&model, &wave)?;
    Ok(Box::new(WdWave { model, wave, adjoint }))
}

/// Solves the scalar bistable front on `[-half_length, half_length]`.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn wd_wave_solve_nagumo(
    a: c_double,
    half_length: c_double,
    points: size_t,
    out: *mut *mut WdWave,
) -> c_int {
    let out = out_ptr!(out);
    guarded(|| {
        let grid = Grid::new(half_length, points)?;
        let model = nagumo_model(a)?;
        let (seed, c_seed) = nagumo_seed(grid, a);
        let wave = solve_wave(&model, &seed, c_seed, NewtonOpts::default())?;
        *out = Box::into_raw(build_wave(model, wave)?);
        Ok(WD_OK)
    })
}

/// Solves the two-component excitable pulse with noise acting on the first
/// component.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn wd_wave_solve_fhn(
    a: c_double,
    epsilon: c_double,
    gamma: c_double,
    rho_w: c_double,
    half_length: c_double,
    points: size_t,
    out: *mut *mut WdWave,
) -> c_int {
    let out = out_ptr!(out);
    guarded(|| {
        let grid = Grid::new(half_length, points)?;
        let (model, wave) = fhn_find_wave(
            grid,
            a,
            epsilon,
            gamma,
            rho_w,
            FhnNoise::LinearU,
            NewtonOpts::default(),
        )?;
        *out = Box::into_raw(build_wave(model, wave)?);
        Ok(WD_OK)
    })
}

/// # Safety
/// `handle` must come from a `wd_wave_solve_*` call, or be NULL.
#[no_mangle]
pub unsafe extern "C" fn wd_wave_free(handle: *mut WdWave) {
    if !handle.is_null() {
        drop(unsafe { Box::from_raw(handle) });
    }
}

/// # Safety
/// `wave` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn wd_wave_speed(wave: *const WdWave, out: *mut c_double) -> c_int {
    let wave = not_null!(wave);
    let out = out_ptr!(out);
    *out = wave.wave.speed;
    WD_OK
}

/// # Safety
/// `wave` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn wd_wave_points(wave: *const WdWave, out: *mut size_t) -> c_int {
    let wave = not_null!(wave);
    let out = out_ptr!(out);
    *out = wave.wave.profile.grid().points();
    WD_OK
}

/// # Safety
/// `wave` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn wd_wave_n_comp(wave: *const WdWave, out: *mut size_t) -> c_int {
    let wave = not_null!(wave);
    let out = out_ptr!(out);
    *out = wave.model.n_comp();
    WD_OK
}

fn copy_component(
    field: &wavedrift::grid::Field,
    comp: size_t,
    buf: *mut c_double,
    len: size_t,
) -> c_int {
    if comp >= field.n_comp() {
        set_error("component index out of range");
        return WD_ERR_VALIDATION;
    }
    let values = field.component_slice(comp);
    if len < values.len() {
        set_error("buffer too small for profile");
        return WD_ERR_VALIDATION;
    }
    if buf.is_null() {
        set_error("null buffer");
        return WD_ERR_NULL;
    }
    unsafe { std::ptr::copy_nonoverlapping(values.as_ptr(), buf, values.len()) };
    WD_OK
}

/// Copies component `comp` of the wave profile into `buf`.
///
/// # Safety
/// `buf` must point to at least `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn wd_wave_profile(
    wave: *const WdWave,
    comp: size_t,
    buf: *mut c_double,
    len: size_t,
) -> c_int {
    let wave = not_null!(wave);
    copy_component(&wave.wave.profile, comp, buf, len)
}

/// Spectral gap certified by a dense eigensolve on a grid capped at
/// `points_cap` points (512 is a reasonable cap).
///
/// # Safety
/// `wave` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn wd_wave_spectral_gap(
    wave: *const WdWave,
    points_cap: size_t,
    out: *mut c_double,
) -> c_int {
    let wave = not_null!(wave);
    let out = out_ptr!(out);
    guarded(|| {
        let full = wave.wave.profile.grid();
        let report = if full.points() <= points_cap {
            spectrum(&wave.model, &wave.wave, None)?
        } else {
            let coarse = Grid::new(full.half_length(), points_cap)?;
            let fine = &wave.wave.profile;
            let fg = fine.grid().clone();
            let seed = wavedrift::grid::Field::from_fn(coarse, wave.model.n_comp(), |c, xi| {
                let x = (xi - fg.node(0)) / fg.spacing();
                let i = (x.floor() as isize).clamp(0, fg.points() as isize - 2) as usize;
                let t = (x - i as f64).clamp(0.0, 1.0);
                let v = fine.component_slice(c);
                v[i] * (1.0 - t) + v[i + 1] * t
            });
            let coarse_wave = solve_wave(&wave.model, &seed, wave.wave.speed, NewtonOpts::default())?;
            spectrum(&wave.model, &coarse_wave, None)?
        };
        *out = report.gap_beta;
        Ok(WD_OK)
    })
}

// ---------------------------------------------------------------------------
// Stochastic wave and drift predictions
// ---------------------------------------------------------------------------

/// Opaque: a noise-corrected wave at one amplitude.
pub struct WdSwave {
    swave: StochasticWave,
}

/// # Safety
/// `wave` must be a live handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn wd_swave_solve(
    wave: *const WdWave,
    sigma: c_double,
    out: *mut *mut WdSwave,
) -> c_int {
    let wave = not_null!(wave);
    let out = out_ptr!(out);
    guarded(|| {
        let swave = solve_stochastic_wave(
            &wave.model,
            &wave.wave,
            &wave.adjoint.psi,
            sigma,
            NewtonOpts::default(),
        )?;
        *out = Box::into_raw(Box::new(WdSwave { swave }));
        Ok(WD_OK)
    })
}

/// # Safety
/// `handle` must come from `wd_swave_solve`, or be NULL.
#[no_mangle]
pub unsafe extern "C" fn wd_swave_free(handle: *mut WdSwave) {
    if !handle.is_null() {
        drop(unsafe { Box::from_raw(handle) });
    }
}

/// # Safety
/// `swave` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn wd_swave_speed(swave: *const WdSwave, out: *mut c_double) -> c_int {
    let swave = not_null!(swave);
    let out = out_ptr!(out);
    *out = swave.swave.speed;
    WD_OK
}

/// # Safety
/// `buf` must point to at least `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn wd_swave_profile(
    swave: *const WdSwave,
    comp: size_t,
    buf: *mut c_double,
    len: size_t,
) -> c_int {
    let swave = not_null!(swave);
    copy_component(&swave.swave.profile, comp, buf, len)
}

/// Speed and drift predictions, filled into a plain struct.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct WdDrift {
    pub sigma: c_double,
    pub c0: c_double,
    pub c_sigma: c_double,
    /// Quadratic coefficient of the corrected-wave speed.
    pub c02: c_double,
    /// Leading-order drift coefficient; NaN when the model shape does not
    /// support it.
    pub c_od_leading: c_double,
    pub c_od_general: c_double,
    /// Quadratic coefficient of the limiting observed speed.
    pub c_lim_2: c_double,
}

/// Predicts the second-order speed shift and phase drift at the amplitude of
/// `swave`.  `gap_beta` must be a positive lower bound for the spectral gap
/// (see `wd_wave_spectral_gap`).
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn wd_drift_predict(
    wave: *const WdWave,
    swave: *const WdSwave,
    gap_beta: c_double,
    out: *mut WdDrift,
) -> c_int {
    let wave = not_null!(wave);
    let swave = not_null!(swave);
    let out = out_ptr!(out);
    guarded(|| {
        let quad = QuadratureConfig::for_gap(gap_beta)?;
        let cut = Cutoffs::new(100.0)?;
        let expansion = speed_expansion(&wave.model, &wave.wave, &wave.adjoint.psi)?;
        let coeffs = drift_coefficients(
            &wave.model,
            &wave.wave,
            &swave.swave,
            &wave.adjoint.psi,
            &cut,
            &quad,
            expansion.c2,
        )?;
        *out = WdDrift {
            sigma: coeffs.sigma,
            c0: coeffs.c0,
            c_sigma: coeffs.c_sigma,
            c02: coeffs.c02,
            c_od_leading: coeffs.c_od_leading.unwrap_or(f64::NAN),
            c_od_general: coeffs.c_od_general,
            c_lim_2: coeffs.c_lim_2,
        };
        Ok(WD_OK)
    })
}

// ---------------------------------------------------------------------------
// Sample paths and ensembles
// ---------------------------------------------------------------------------

/// Opaque: the recorded series of one sample path.
pub struct WdPath {
    record: PathRecord,
}

fn make_sim(
    wave: &WdWave,
    swave: &WdSwave,
    dt: c_double,
    t_end: c_double,
    eps: c_double,
) -> Result<SimConfig, Error> {
    let mut sim = SimConfig::new(
        wave.model.clone(),
        swave.swave.clone(),
        wave.adjoint.psi.clone(),
        wave.wave.speed,
        swave.swave.sigma,
        eps,
    )?;
    sim.dt = dt;
    sim.t_end = t_end;
    sim.validate()?;
    Ok(sim)
}

/// Integrates one path of the coupled field/phase system.
///
/// # Safety
/// All handles must be live; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn wd_path_run(
    wave: *const WdWave,
    swave: *const WdSwave,
    dt: c_double,
    t_end: c_double,
    eps: c_double,
    seed: u64,
    out: *mut *mut WdPath,
) -> c_int {
    let wave = not_null!(wave);
    let swave = not_null!(swave);
    let out = out_ptr!(out);
    guarded(|| {
        let sim = make_sim(wave, swave, dt, t_end, eps)?;
        let record = run_path(&sim, seed)?;
        *out = Box::into_raw(Box::new(WdPath { record }));
        Ok(WD_OK)
    })
}

/// # Safety
/// `handle` must come from `wd_path_run`, or be NULL.
#[no_mangle]
pub unsafe extern "C" fn wd_path_free(handle: *mut WdPath) {
    if !handle.is_null() {
        drop(unsafe { Box::from_raw(handle) });
    }
}

/// # Safety
/// `path` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn wd_path_len(path: *const WdPath, out: *mut size_t) -> c_int {
    let path = not_null!(path);
    let out = out_ptr!(out);
    *out = path.record.times.len();
    WD_OK
}

/// Recorded series, selected by column.
pub const WD_COL_TIME: c_int = 0;
pub const WD_COL_GAMMA: c_int = 1;
pub const WD_COL_DRIFT: c_int = 2;
pub const WD_COL_DRIFT_VR: c_int = 3;
pub const WD_COL_NEPS: c_int = 4;
pub const WD_COL_V_L2: c_int = 5;

/// Copies one recorded column into `buf`.
///
/// # Safety
/// `buf` must point to at least `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn wd_path_column(
    path: *const WdPath,
    column: c_int,
    buf: *mut c_double,
    len: size_t,
) -> c_int {
    let path = not_null!(path);
    let series = match column {
        WD_COL_TIME => &path.record.times,
        WD_COL_GAMMA => &path.record.gamma_series,
        WD_COL_DRIFT => &path.record.gamma_minus_cst,
        WD_COL_DRIFT_VR => &path.record.gamma_vr,
        WD_COL_NEPS => &path.record.neps_series,
        WD_COL_V_L2 => &path.record.v_l2_series,
        _ => {
            set_error("unknown path column");
            return WD_ERR_VALIDATION;
        }
    };
    if len < series.len() {
        set_error("buffer too small for series");
        return WD_ERR_VALIDATION;
    }
    if buf.is_null() {
        set_error("null buffer");
        return WD_ERR_NULL;
    }
    unsafe { std::ptr::copy_nonoverlapping(series.as_ptr(), buf, series.len()) };
    WD_OK
}

/// # Safety
/// `path` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn wd_path_sup_neps(path: *const WdPath, out: *mut c_double) -> c_int {
    let path = not_null!(path);
    let out = out_ptr!(out);
    *out = path.record.sup_neps;
    WD_OK
}

/// Ensemble summary, filled into a plain struct.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct WdEnsemble {
    pub n_paths: size_t,
    pub n_excluded: size_t,
    /// Observed drift rate of the tracked phase.
    pub c_od_obs: c_double,
    /// Fraction of paths whose stability functional exceeded `eta`, with the
    /// 95% confidence bounds.
    pub p_eps: c_double,
    pub p_eps_ci_low: c_double,
    pub p_eps_ci_high: c_double,
}

/// Runs `n_paths` independent paths and aggregates drift and stability.
///
/// # Safety
/// All handles must be live; `out` must be valid.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn wd_ensemble_run(
    wave: *const WdWave,
    swave: *const WdSwave,
    dt: c_double,
    t_end: c_double,
    eps: c_double,
    eta: c_double,
    n_paths: size_t,
    base_seed: u64,
    out: *mut WdEnsemble,
) -> c_int {
    let wave = not_null!(wave);
    let swave = not_null!(swave);
    let out = out_ptr!(out);
    guarded(|| {
        let sim = make_sim(wave, swave, dt, t_end, eps)?;
        let stats = run_ensemble(&sim, n_paths, base_seed, Some(eta))?;
        let p = stats.p_eps.as_ref();
        *out = WdEnsemble {
            n_paths: stats.n_paths,
            n_excluded: stats.n_excluded,
            c_od_obs: stats.c_od_obs,
            p_eps: p.map_or(f64::NAN, |p| p.fraction),
            p_eps_ci_low: p.map_or(f64::NAN, |p| p.ci_low),
            p_eps_ci_high: p.map_or(f64::NAN, |p| p.ci_high),
        };
        Ok(WD_OK)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ptr;

    unsafe fn solve_nagumo(a: f64) -> *mut WdWave {
        let mut handle: *mut WdWave = ptr::null_mut();
        let rc = unsafe { wd_wave_solve_nagumo(a, 40.0, 768, &mut handle) };
        assert_eq!(rc, WD_OK);
        assert!(!handle.is_null());
        handle
    }

    #[test]
    fn solve_and_query_through_the_c_abi() {
        unsafe {
            let wave = solve_nagumo(0.1);
            let mut speed = 0.0;
            assert_eq!(wd_wave_speed(wave, &mut speed), WD_OK);
            assert!((speed - 0.5657).abs() < 1e-3, "speed = {speed}");

            let mut n = 0usize;
            assert_eq!(wd_wave_points(wave, &mut n), WD_OK);
            assert_eq!(n, 768);
            let mut nc = 0usize;
            assert_eq!(wd_wave_n_comp(wave, &mut nc), WD_OK);
            assert_eq!(nc, 1);

            let mut buf = vec![0.0; n];
            assert_eq!(wd_wave_profile(wave, 0, buf.as_mut_ptr(), n), WD_OK);
            assert!(buf[0] > 0.99 && buf[n - 1] < 0.01, "front orientation");

            wd_wave_free(wave);
        }
    }

    #[test]
    fn error_paths_set_codes_and_messages() {
        unsafe {
            let mut handle: *mut WdWave = ptr::null_mut();
            // Threshold outside (0, 1/2): validation.
            assert_eq!(
                wd_wave_solve_nagumo(0.9, 40.0, 512, &mut handle),
                WD_ERR_VALIDATION
            );
            let mut buf = [0i8; 256];
            let len = wd_last_error_message(buf.as_mut_ptr(), buf.len());
            assert!(len > 0);
            let msg = std::ffi::CStr::from_ptr(buf.as_ptr()).to_string_lossy();
            assert!(msg.contains("threshold"), "message: {msg}");

            // Window too small to hold the front: numerical.
            assert_eq!(
                wd_wave_solve_nagumo(0.1, 6.0, 64, &mut handle),
                WD_ERR_NUMERICAL
            );

            // Null pointers are caught, not dereferenced.
            assert_eq!(wd_wave_speed(ptr::null(), &mut 0.0), WD_ERR_NULL);
            assert_eq!(
                wd_wave_solve_nagumo(0.1, 40.0, 512, ptr::null_mut()),
                WD_ERR_NULL
            );
        }
    }

    #[test]
    fn stochastic_branch_and_drift_through_the_c_abi() {
        unsafe {
            let wave = solve_nagumo(0.1);
            let mut swave: *mut WdSwave = ptr::null_mut();
            assert_eq!(wd_swave_solve(wave, 0.1, &mut swave), WD_OK);

            let mut c0 = 0.0;
            let mut cs = 0.0;
            wd_wave_speed(wave, &mut c0);
            assert_eq!(wd_swave_speed(swave, &mut cs), WD_OK);
            assert!(cs < c0, "noise slows this front: {cs} vs {c0}");

            let mut gap = 0.0;
            assert_eq!(wd_wave_spectral_gap(wave, 512, &mut gap), WD_OK);
            assert!(gap > 0.01, "gap = {gap}");

            let mut drift = WdDrift {
                sigma: 0.0,
                c0: 0.0,
                c_sigma: 0.0,
                c02: 0.0,
                c_od_leading: 0.0,
                c_od_general: 0.0,
                c_lim_2: 0.0,
            };
            assert_eq!(wd_drift_predict(wave, swave, gap, &mut drift), WD_OK);
            assert_eq!(drift.sigma, 0.1);
            assert!((drift.c_sigma - cs).abs() < 1e-12);
            assert!(drift.c02 < 0.0);
            assert!(drift.c_od_general.is_finite());

            wd_swave_free(swave);
            wd_wave_free(wave);
        }
    }

    #[test]
    fn paths_and_ensembles_through_the_c_abi() {
        unsafe {
            let wave = solve_nagumo(0.2);
            let mut swave: *mut WdSwave = ptr::null_mut();
            assert_eq!(wd_swave_solve(wave, 0.05, &mut swave), WD_OK);

            let mut path: *mut WdPath = ptr::null_mut();
            assert_eq!(
                wd_path_run(wave, swave, 1e-2, 1.0, 0.02, 7, &mut path),
                WD_OK
            );
            let mut len = 0usize;
            assert_eq!(wd_path_len(path, &mut len), WD_OK);
            assert!(len > 10);
            let mut times = vec![0.0; len];
            let mut drift = vec![0.0; len];
            assert_eq!(wd_path_column(path, WD_COL_TIME, times.as_mut_ptr(), len), WD_OK);
            assert_eq!(wd_path_column(path, WD_COL_DRIFT, drift.as_mut_ptr(), len), WD_OK);
            assert_eq!(times[0], 0.0);
            assert!((times[len - 1] - 1.0).abs() < 1e-9);
            assert!(drift.iter().all(|x| x.is_finite()));
            assert_eq!(wd_path_column(path, 99, times.as_mut_ptr(), len), WD_ERR_VALIDATION);
            let mut sup = -1.0;
            assert_eq!(wd_path_sup_neps(path, &mut sup), WD_OK);
            assert!(sup >= 0.0);
            wd_path_free(path);

            let mut stats = WdEnsemble {
                n_paths: 0,
                n_excluded: 0,
                c_od_obs: 0.0,
                p_eps: 0.0,
                p_eps_ci_low: 0.0,
                p_eps_ci_high: 0.0,
            };
            assert_eq!(
                wd_ensemble_run(wave, swave, 1e-2, 1.0, 0.02, 0.5, 4, 11, &mut stats),
                WD_OK
            );
            assert_eq!(stats.n_paths, 4);
            assert_eq!(stats.n_excluded, 0);
            assert!(stats.c_od_obs.is_finite());
            assert!((0.0..=1.0).contains(&stats.p_eps));

            wd_swave_free(swave);
            wd_wave_free(wave);
        }
    }

    #[test]
    fn reruns_with_equal_seeds_match_exactly() {
        unsafe {
            let wave = solve_nagumo(0.2);
            let mut swave: *mut WdSwave = ptr::null_mut();
            wd_swave_solve(wave, 0.05, &mut swave);
            let mut final_drifts = Vec::new();
            for _ in 0..2 {
                let mut path: *mut WdPath = ptr::null_mut();
                assert_eq!(wd_path_run(wave, swave, 1e-2, 0.5, 0.02, 42, &mut path), WD_OK);
                let mut len = 0usize;
                wd_path_len(path, &mut len);
                let mut drift = vec![0.0; len];
                wd_path_column(path, WD_COL_DRIFT, drift.as_mut_ptr(), len);
                final_drifts.push(drift[len - 1]);
                wd_path_free(path);
            }
            assert_eq!(final_drifts[0].to_bits(), final_drifts[1].to_bits());
            wd_swave_free(swave);
            wd_wave_free(wave);
        }
    }
}
