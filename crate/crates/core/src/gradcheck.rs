//! Central finite-difference verification of the analytic adapter gradients.
//!
//! The probe loss is `L = <x W, G>` for a fixed random upstream `G`, with `W`
//! taken from [`AdapterState::merge`]. The numeric side therefore never runs
//! through [`AdapterState::backward`].

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::Serialize;

use crate::adapters::{init_adapter, AdapterKind, AdapterState};
use crate::error::{Error, Result};
use crate::linalg::{matmul, Matrix, RowVector};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-6;
/// Derivatives smaller than this get the relaxed tolerance.
pub const TINY_DERIVATIVE: f64 = 1e-8;
/// Relaxed tolerance is this multiple of the requested one.
pub const TINY_RELAXATION: f64 = 100.0;

pub const PARAMS: [&str; 5] = ["b", "a", "mag", "alpha", "beta"];

#[derive(Debug, Clone, Serialize)]
pub struct ParamError {
    pub param: &'static str,
    pub entries: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub params: Vec<ParamError>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failing(&self) -> impl Iterator<Item = &ParamError> {
        self.params.iter().filter(|p| !p.passed)
    }

    /// Folds another report in, keeping the worst entry per parameter.
    pub fn absorb(&mut self, other: GradcheckReport) {
        for theirs in other.params {
            match self.params.iter_mut().find(|p| p.param == theirs.param) {
                Some(mine) => {
                    mine.entries += theirs.entries;
                    mine.passed &= theirs.passed;
                    if theirs.max_rel_error > mine.max_rel_error {
                        mine.max_rel_error = theirs.max_rel_error;
                        mine.worst_index = theirs.worst_index;
                        mine.analytic = theirs.analytic;
                        mine.numeric = theirs.numeric;
                    }
                }
                None => self.params.push(theirs),
            }
        }
        self.passed &= other.passed;
    }
}

/// `|a - n| / max(|a|, |n|)`, zero when both vanish.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn probe_loss(state: &AdapterState, x: &Matrix, upstream: &Matrix) -> Result<f64> {
    Ok(matmul(x, &state.merge()?)?.dot(upstream))
}

/// Mutable view of one trainable parameter as a flat slice.
fn param_slot<'s>(state: &'s mut AdapterState, name: &str) -> &'s mut [f64] {
    match name {
        "b" => state.b.data_mut(),
        "a" => state.a.data_mut(),
        "mag" => state.mag.data_mut(),
        "alpha" => std::slice::from_mut(&mut state.alpha),
        "beta" => std::slice::from_mut(&mut state.beta),
        _ => unreachable!("unknown parameter {name}"),
    }
}

fn trainable(kind: AdapterKind) -> &'static [&'static str] {
    match kind {
        AdapterKind::Lora => &PARAMS[..2],
        AdapterKind::Dora => &PARAMS[..3],
        AdapterKind::Wora => &PARAMS,
    }
}

/// Compares every trainable partial derivative against central differences
/// with step `h`.
pub fn check_gradients(
    state: &AdapterState,
    x: &Matrix,
    upstream: &Matrix,
    h: f64,
    tolerance: f64,
) -> Result<GradcheckReport> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {h}")));
    }
    let grads = state.backward(x, upstream)?;
    let analytic_of = |name: &str| -> Vec<f64> {
        match name {
            "b" => grads.d_b.data().to_vec(),
            "a" => grads.d_a.data().to_vec(),
            "mag" => grads.d_mag.data().to_vec(),
            "alpha" => vec![grads.d_alpha],
            "beta" => vec![grads.d_beta],
            _ => unreachable!(),
        }
    };

    let mut params = Vec::new();
    let mut probe = state.clone();
    for &name in trainable(state.kind) {
        let analytic = analytic_of(name);
        let mut worst = ParamError {
            param: name,
            entries: analytic.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            passed: true,
        };
        for (i, &a) in analytic.iter().enumerate() {
            let orig = param_slot(&mut probe, name)[i];
            param_slot(&mut probe, name)[i] = orig + h;
            let plus = probe_loss(&probe, x, upstream)?;
            param_slot(&mut probe, name)[i] = orig - h;
            let minus = probe_loss(&probe, x, upstream)?;
            param_slot(&mut probe, name)[i] = orig;
            let n = (plus - minus) / (2.0 * h);

            let err = relative_error(a, n);
            let allowed = if a.abs().max(n.abs()) < TINY_DERIVATIVE {
                tolerance * TINY_RELAXATION
            } else {
                tolerance
            };
            if !(err < allowed) {
                worst.passed = false;
            }
            if err > worst.max_rel_error || i == 0 {
                worst.max_rel_error = err;
                worst.worst_index = i;
                worst.analytic = a;
                worst.numeric = n;
            }
        }
        params.push(worst);
    }
    let passed = params.iter().all(|p| p.passed);
    Ok(GradcheckReport {
        params,
        tolerance,
        passed,
    })
}

/// A random adapter away from its initialization together with a batch of
/// inputs and an upstream gradient.
#[derive(Debug, Clone)]
pub struct GradcheckInstance {
    pub state: AdapterState,
    pub x: Matrix,
    pub upstream: Matrix,
}

pub fn random_instance(
    kind: AdapterKind,
    d_in: usize,
    d_out: usize,
    rank: usize,
    batch: usize,
    seed: u64,
) -> Result<GradcheckInstance> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut gauss = |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| rng.sample(StandardNormal));
    let w0 = gauss(d_in, d_out);
    let b = gauss(d_in, rank).scale(0.5);
    let x = gauss(batch, d_in);
    let upstream = gauss(batch, d_out);

    let mut state = init_adapter(w0, rank, kind, seed)?;
    state.b = b;
    if kind != AdapterKind::Lora {
        let mag = (0..d_out).map(|_| rng.random_range(0.5..2.0)).collect();
        state.mag = RowVector::new(mag)?;
    }
    if kind == AdapterKind::Wora {
        state.alpha = rng.random_range(0.5..8.0);
        state.beta = rng.random_range(0.25..1.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    }
    Ok(GradcheckInstance { state, x, upstream })
}

#[derive(Debug, Clone, Copy)]
pub struct SuiteConfig {
    pub kind: AdapterKind,
    pub instances: usize,
    /// Fixed dims, or `None` to draw `d_in, d_out` in `[rank + 1, max_dim]`.
    pub dims: Option<(usize, usize)>,
    pub max_dim: usize,
    pub rank: Option<usize>,
    pub max_rank: usize,
    pub batch: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            kind: AdapterKind::Wora,
            instances: 20,
            dims: None,
            max_dim: 16,
            rank: None,
            max_rank: 4,
            batch: 5,
            seed: 0,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
        }
    }
}

/// Runs `cfg.instances` gradient checks with shapes and ranks derived from
/// `cfg.seed`, returning the combined worst-case report.
pub fn run_suite(cfg: &SuiteConfig) -> Result<GradcheckReport> {
    if cfg.instances == 0 {
        return Err(Error::Config("gradcheck needs at least one instance".into()));
    }
    let mut shapes = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
    let mut combined: Option<GradcheckReport> = None;
    for i in 0..cfg.instances {
        let rank = cfg.rank.unwrap_or_else(|| shapes.random_range(1..=cfg.max_rank.max(1)));
        let (d_in, d_out) = cfg.dims.unwrap_or_else(|| {
            let lo = rank + 1;
            let hi = cfg.max_dim.max(lo);
            (shapes.random_range(lo..=hi), shapes.random_range(lo..=hi))
        });
        let inst_seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let inst = random_instance(cfg.kind, d_in, d_out, rank, cfg.batch, inst_seed)?;
        let report = check_gradients(&inst.state, &inst.x, &inst.upstream, cfg.step, cfg.tolerance)?;
        match combined.as_mut() {
            Some(c) => c.absorb(report),
            None => combined = Some(report),
        }
    }
    Ok(combined.expect("at least one instance"))
}
