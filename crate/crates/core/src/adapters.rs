//! LoRA, DoRA and WoRA weight parameterizations over a frozen base weight.
//!
//! All three share the factor shapes `B: d_in x r` and `A: r x d_out` and act
//! on row inputs, `y = x W`. DoRA and WoRA normalize the columns of
//!
//! ```text
//! V = beta * W0 + alpha * B A
//! ```
//!
//! and rescale them by a per-column magnitude vector; WoRA additionally trains
//! `alpha` and `beta`. LoRA is the plain additive update `W0 + alpha * B A`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, column_l2_norm, matmul, matmul_nt, matmul_tn, Matrix, RowVector};

pub const DEFAULT_ALPHA: f64 = 8.0;
pub const DEFAULT_BETA: f64 = 1.0;
pub const DEFAULT_RANK: usize = 8;
/// LoRA scales its update by `LORA_SCALE_NUMERATOR / rank`.
pub const LORA_SCALE_NUMERATOR: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    Lora,
    Dora,
    Wora,
}

impl AdapterKind {
    pub const ALL: [AdapterKind; 3] = [AdapterKind::Lora, AdapterKind::Dora, AdapterKind::Wora];

    pub fn as_str(self) -> &'static str {
        match self {
            AdapterKind::Lora => "lora",
            AdapterKind::Dora => "dora",
            AdapterKind::Wora => "wora",
        }
    }

    fn normalizes(self) -> bool {
        !matches!(self, AdapterKind::Lora)
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdapterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lora" => Ok(AdapterKind::Lora),
            "dora" => Ok(AdapterKind::Dora),
            "wora" => Ok(AdapterKind::Wora),
            other => Err(Error::Config(format!("unknown adapter kind `{other}`"))),
        }
    }
}

/// Frozen base weight plus adapter parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterState {
    pub w0: Matrix,
    pub b: Matrix,
    pub a: Matrix,
    pub mag: RowVector,
    pub alpha: f64,
    pub beta: f64,
    pub rank: usize,
    pub kind: AdapterKind,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGradients {
    pub d_b: Matrix,
    pub d_a: Matrix,
    pub d_mag: RowVector,
    pub d_alpha: f64,
    pub d_beta: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub trainable: usize,
    pub frozen: usize,
    pub total: usize,
    pub breakdown: BTreeMap<String, usize>,
}

/// Scalars used when building a fresh adapter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterInit {
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
}

impl Default for AdapterInit {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            epsilon: linalg::DEFAULT_EPSILON,
        }
    }
}

pub fn validate_rank(d_in: usize, d_out: usize, rank: usize) -> Result<()> {
    if rank == 0 || rank >= d_in.min(d_out) {
        return Err(Error::Config(format!(
            "rank {rank} invalid for a {d_in}x{d_out} weight (need 1 <= rank < {})",
            d_in.min(d_out)
        )));
    }
    Ok(())
}

/// Fresh adapter with the default scalars (alpha 8, beta 1).
pub fn init_adapter(w0: Matrix, rank: usize, kind: AdapterKind, seed: u64) -> Result<AdapterState> {
    init_adapter_with(w0, rank, kind, seed, AdapterInit::default())
}

/// Fresh adapter: `B = 0`, `A ~ N(0, 1/rank)`, and a magnitude vector chosen
/// so the merged weight starts out equal to `w0`.
///
/// For LoRA the stored `alpha` is the full update multiplier and is set to
/// `8 / rank`; `init.alpha` only applies to DoRA and WoRA.
pub fn init_adapter_with(
    w0: Matrix,
    rank: usize,
    kind: AdapterKind,
    seed: u64,
    init: AdapterInit,
) -> Result<AdapterState> {
    let (d_in, d_out) = w0.shape();
    validate_rank(d_in, d_out, rank)?;
    if !init.alpha.is_finite() || !init.beta.is_finite() || !(init.epsilon >= 0.0) {
        return Err(Error::Config(format!("invalid adapter scalars {init:?}")));
    }

    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0 / (rank as f64).sqrt()).expect("positive std");
    let a = Matrix::from_fn(rank, d_out, |_, _| normal.sample(&mut rng));
    let b = Matrix::zeros(d_in, rank);

    let (alpha, beta) = match kind {
        AdapterKind::Lora => (LORA_SCALE_NUMERATOR / rank as f64, 1.0),
        _ => (init.alpha, init.beta),
    };
    // B = 0, so V = beta * W0.
    let mag = if kind.normalizes() {
        column_l2_norm(&w0.scale(beta), init.epsilon)?
    } else {
        RowVector::zeros(d_out)
    };

    Ok(AdapterState {
        w0,
        b,
        a,
        mag,
        alpha,
        beta,
        rank,
        kind,
        epsilon: init.epsilon,
    })
}

/// Column-normalized pieces of `V = beta * W0 + alpha * B A`.
struct Direction {
    ba: Matrix,
    v: Matrix,
    norms: Vec<f64>,
    /// Per-column `max(||V_j||, eps)`.
    floored: Vec<f64>,
}

impl AdapterState {
    pub fn d_in(&self) -> usize {
        self.w0.rows()
    }

    pub fn d_out(&self) -> usize {
        self.w0.cols()
    }

    /// Checks factor shapes against `w0` and the stored rank.
    pub fn validate(&self) -> Result<()> {
        let (d_in, d_out) = self.w0.shape();
        if self.b.shape() != (d_in, self.rank) {
            return Err(Error::shape(
                "adapter factor B",
                linalg::shape_str(&self.b),
                format!("{d_in}x{}", self.rank),
            ));
        }
        if self.a.shape() != (self.rank, d_out) {
            return Err(Error::shape(
                "adapter factor A",
                linalg::shape_str(&self.a),
                format!("{}x{d_out}", self.rank),
            ));
        }
        if self.mag.len() != d_out {
            return Err(Error::shape("adapter magnitude", self.mag.len(), d_out));
        }
        validate_rank(d_in, d_out, self.rank)
    }

    fn direction(&self) -> Result<Direction> {
        self.validate()?;
        let ba = matmul(&self.b, &self.a)?;
        let v = self.w0.scale(self.beta).add_scaled(&ba, self.alpha)?;
        let norms = column_l2_norm(&v, 0.0)?.into_data();
        let floored = norms.iter().map(|n| n.max(self.epsilon)).collect();
        Ok(Direction {
            ba,
            v,
            norms,
            floored,
        })
    }

    /// The dense weight this adapter represents.
    pub fn merge(&self) -> Result<Matrix> {
        if !self.kind.normalizes() {
            self.validate()?;
            let ba = matmul(&self.b, &self.a)?;
            return self.w0.add_scaled(&ba, self.alpha);
        }
        let dir = self.direction()?;
        let col_scale: Vec<f64> = self
            .mag
            .data()
            .iter()
            .zip(&dir.floored)
            .map(|(m, c)| m / c)
            .collect();
        let mut out = dir.v;
        let cols = out.cols();
        for row in out.data_mut().chunks_mut(cols) {
            for (x, s) in row.iter_mut().zip(&col_scale) {
                *x *= s;
            }
        }
        Ok(out)
    }

    /// `x W` evaluated through the factors instead of the merged weight.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.validate()?;
        if x.cols() != self.d_in() {
            return Err(Error::shape(
                "adapter_forward",
                linalg::shape_str(x),
                linalg::shape_str(&self.w0),
            ));
        }
        let base = matmul(x, &self.w0)?;
        let low = matmul(&matmul(x, &self.b)?, &self.a)?;
        if !self.kind.normalizes() {
            return base.add_scaled(&low, self.alpha);
        }
        let dir = self.direction()?;
        let mut y = base.scale(self.beta).add_scaled(&low, self.alpha)?;
        let cols = y.cols();
        for row in y.data_mut().chunks_mut(cols) {
            for (j, v) in row.iter_mut().enumerate() {
                *v *= self.mag.get(j) / dir.floored[j];
            }
        }
        Ok(y)
    }

    /// Gradients of a scalar loss given `d_y = dL/dy` for `y = forward(x)`.
    ///
    /// Parameters that are not trainable for the adapter kind (LoRA's
    /// magnitude and scalars, DoRA's scalars) get zero gradients.
    pub fn backward(&self, x: &Matrix, d_y: &Matrix) -> Result<AdapterGradients> {
        self.validate()?;
        if x.cols() != self.d_in() {
            return Err(Error::shape(
                "adapter_backward input",
                linalg::shape_str(x),
                linalg::shape_str(&self.w0),
            ));
        }
        if d_y.shape() != (x.rows(), self.d_out()) {
            return Err(Error::shape(
                "adapter_backward upstream",
                linalg::shape_str(d_y),
                format!("{}x{}", x.rows(), self.d_out()),
            ));
        }
        // dL/dW
        let d_w = matmul_tn(x, d_y)?;

        let grads = if !self.kind.normalizes() {
            AdapterGradients {
                d_b: matmul_nt(&d_w, &self.a)?.scale(self.alpha),
                d_a: matmul_tn(&self.b, &d_w)?.scale(self.alpha),
                d_mag: RowVector::zeros(self.d_out()),
                d_alpha: 0.0,
                d_beta: 0.0,
            }
        } else {
            let dir = self.direction()?;
            let (d_in, d_out) = self.w0.shape();
            let mut d_mag = vec![0.0; d_out];
            let mut d_v = Matrix::zeros(d_in, d_out);
            for j in 0..d_out {
                let c = dir.floored[j];
                let v_hat: Vec<f64> = (0..d_in).map(|i| dir.v.get(i, j) / c).collect();
                let d_col = d_w.column(j);
                let proj = linalg::dot(&d_col, &v_hat);
                d_mag[j] = proj;
                let s = self.mag.get(j) / c;
                // Below the floor the denominator is the constant eps and the
                // radial component no longer cancels.
                let radial = if dir.norms[j] >= self.epsilon { proj } else { 0.0 };
                for i in 0..d_in {
                    d_v.set(i, j, s * (d_col[i] - radial * v_hat[i]));
                }
            }
            let (d_alpha, d_beta) = match self.kind {
                AdapterKind::Wora => (d_v.dot(&dir.ba), d_v.dot(&self.w0)),
                _ => (0.0, 0.0),
            };
            AdapterGradients {
                d_b: matmul_nt(&d_v, &self.a)?.scale(self.alpha),
                d_a: matmul_tn(&self.b, &d_v)?.scale(self.alpha),
                d_mag: RowVector::from_unchecked(d_mag),
                d_alpha,
                d_beta,
            }
        };
        grads.check_finite()?;
        Ok(grads)
    }

    /// Trainable and frozen parameter counts for this adapter's kind.
    pub fn count_params(&self) -> ParamCount {
        count_params_for(self.kind, self.d_in(), self.d_out(), self.rank)
    }

    /// Dense weight for inference; the adapter is folded into a single matrix.
    pub fn merge_and_freeze(&self) -> Result<Matrix> {
        self.merge()
    }

    /// Plain SGD step on the trainable parameters, returning the new state.
    pub fn sgd_step(&self, grads: &AdapterGradients, lr: f64, weight_decay: f64) -> Result<Self> {
        let decay = 1.0 - lr * weight_decay;
        let mut next = self.clone();
        next.b = self.b.scale(decay).add_scaled(&grads.d_b, -lr)?;
        next.a = self.a.scale(decay).add_scaled(&grads.d_a, -lr)?;
        if self.kind.normalizes() {
            let mag = self.mag.data().iter().zip(grads.d_mag.data());
            next.mag = RowVector::new(mag.map(|(m, g)| decay * m - lr * g).collect())?;
        }
        if self.kind == AdapterKind::Wora {
            next.alpha = decay * self.alpha - lr * grads.d_alpha;
            next.beta = decay * self.beta - lr * grads.d_beta;
        }
        Ok(next)
    }
}

impl AdapterGradients {
    fn check_finite(&self) -> Result<()> {
        let fields: [(&'static str, bool); 5] = [
            ("d_b", self.d_b.is_finite()),
            ("d_a", self.d_a.is_finite()),
            ("d_mag", self.d_mag.data().iter().all(|v| v.is_finite())),
            ("d_alpha", self.d_alpha.is_finite()),
            ("d_beta", self.d_beta.is_finite()),
        ];
        match fields.iter().find(|(_, ok)| !ok) {
            Some((field, _)) => Err(Error::Numeric { field }),
            None => Ok(()),
        }
    }
}

/// Parameter accounting from shapes alone.
pub fn count_params_for(kind: AdapterKind, d_in: usize, d_out: usize, rank: usize) -> ParamCount {
    let mut breakdown = BTreeMap::new();
    breakdown.insert("w0".to_string(), d_in * d_out);
    breakdown.insert("b".to_string(), d_in * rank);
    breakdown.insert("a".to_string(), rank * d_out);
    if kind.normalizes() {
        breakdown.insert("mag".to_string(), d_out);
    }
    if kind == AdapterKind::Wora {
        breakdown.insert("alpha".to_string(), 1);
        breakdown.insert("beta".to_string(), 1);
    }
    let frozen = d_in * d_out;
    let total: usize = breakdown.values().sum();
    ParamCount {
        trainable: total - frozen,
        frozen,
        total,
        breakdown,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_matrix(rng: &mut Xoshiro256PlusPlus, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Random state with nonzero factors, so the adapter is away from init.
    fn random_state(seed: u64, d_in: usize, d_out: usize, rank: usize, kind: AdapterKind) -> AdapterState {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let w0 = rand_matrix(&mut rng, d_in, d_out);
        let mut s = init_adapter(w0, rank, kind, seed).unwrap();
        s.b = rand_matrix(&mut rng, d_in, rank);
        s.a = rand_matrix(&mut rng, rank, d_out);
        s.mag = RowVector::new((0..d_out).map(|_| rng.random_range(0.5..2.0)).collect()).unwrap();
        if kind == AdapterKind::Wora {
            s.alpha = rng.random_range(0.5..4.0);
            s.beta = rng.random_range(-1.5..1.5);
        }
        s
    }

    #[test]
    fn init_merge_is_base_weight() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
        let w0 = rand_matrix(&mut rng, 8, 6);
        for kind in AdapterKind::ALL {
            for seed in 0..5 {
                let s = init_adapter(w0.clone(), 2, kind, seed).unwrap();
                assert!(s.merge().unwrap().max_abs_diff(&w0) < 1e-12, "{kind}");
            }
        }
    }

    #[test]
    fn init_rejects_full_rank() {
        let w0 = Matrix::zeros(4, 6);
        assert!(matches!(init_adapter(w0.clone(), 4, AdapterKind::Wora, 0), Err(Error::Config(_))));
        assert!(matches!(init_adapter(w0, 0, AdapterKind::Lora, 0), Err(Error::Config(_))));
    }

    #[test]
    fn init_is_deterministic() {
        let w0 = Matrix::identity(6);
        let a1 = init_adapter(w0.clone(), 3, AdapterKind::Wora, 99).unwrap().a;
        let a2 = init_adapter(w0.clone(), 3, AdapterKind::Wora, 99).unwrap().a;
        let a3 = init_adapter(w0, 3, AdapterKind::Wora, 100).unwrap().a;
        let bits = |m: &Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a1), bits(&a2));
        assert_ne!(bits(&a1), bits(&a3));
    }

    #[test]
    fn lora_uses_eight_over_rank() {
        let s = init_adapter(Matrix::identity(8), 4, AdapterKind::Lora, 0).unwrap();
        assert_eq!(s.alpha, 2.0);
        let mut s = s;
        s.b = Matrix::from_fn(8, 4, |i, j| (i + j) as f64 * 0.1);
        let expected = s.w0.add_scaled(&matmul(&s.b, &s.a).unwrap(), 2.0).unwrap();
        assert!(s.merge().unwrap().max_abs_diff(&expected) < 1e-14);
    }

    #[test]
    fn wora_with_zero_b_and_base_norms_is_base() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
        let w0 = rand_matrix(&mut rng, 8, 6);
        let mut s = init_adapter(w0.clone(), 2, AdapterKind::Wora, 3).unwrap();
        s.a = rand_matrix(&mut rng, 2, 6);
        s.mag = column_l2_norm(&w0, s.epsilon).unwrap();
        assert!(s.merge().unwrap().max_abs_diff(&w0) < 1e-12);
    }

    #[test]
    fn forward_identity_and_zero_inputs() {
        let s = random_state(9, 5, 4, 2, AdapterKind::Wora);
        let y = s.forward(&Matrix::identity(5)).unwrap();
        assert!(y.max_abs_diff(&s.merge().unwrap()) < 1e-12);
        let z = s.forward(&Matrix::zeros(3, 5)).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(s.forward(&Matrix::zeros(3, 4)).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        for kind in AdapterKind::ALL {
            let s = random_state(4, 6, 5, 2, kind);
            let g = s.backward(&Matrix::identity(6), &Matrix::zeros(6, 5)).unwrap();
            assert!(g.d_b.data().iter().chain(g.d_a.data()).chain(g.d_mag.data()).all(|&v| v == 0.0));
            assert_eq!((g.d_alpha, g.d_beta), (0.0, 0.0));
        }
    }

    #[test]
    fn backward_rejects_bad_upstream_shape() {
        let s = random_state(4, 6, 5, 2, AdapterKind::Wora);
        assert!(matches!(
            s.backward(&Matrix::zeros(3, 6), &Matrix::zeros(3, 4)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn magnitude_gradient_ignores_direction_scale() {
        // Scaling beta and alpha together scales every column of V by c but
        // leaves v_hat, and so dL/dmag, unchanged.
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(21);
        let s = random_state(21, 6, 5, 2, AdapterKind::Wora);
        let x = rand_matrix(&mut rng, 7, 6);
        let d_y = rand_matrix(&mut rng, 7, 5);
        let mut scaled = s.clone();
        scaled.alpha *= 3.5;
        scaled.beta *= 3.5;
        let g1 = s.backward(&x, &d_y).unwrap();
        let g2 = scaled.backward(&x, &d_y).unwrap();
        for (a, b) in g1.d_mag.data().iter().zip(g2.d_mag.data()) {
            assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn negative_beta_reverses_columns() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(8);
        let w0 = rand_matrix(&mut rng, 8, 6);
        let mut s = init_adapter(w0.clone(), 2, AdapterKind::Wora, 0).unwrap();
        s.beta = -1.0;
        let ba = matmul(&s.b, &s.a).unwrap();
        assert!(ba.frobenius_norm() <= w0.frobenius_norm());
        let merged = s.merge().unwrap();
        for j in 0..6 {
            let cos = linalg::cosine_similarity(&merged.column(j), &w0.column(j)).unwrap();
            assert!(cos < 0.0, "column {j}: cos {cos}");
        }
    }

    #[test]
    fn zero_column_is_guarded() {
        let mut w0 = Matrix::identity(4);
        w0.set(2, 2, 0.0);
        let s = init_adapter(w0.clone(), 1, AdapterKind::Wora, 0).unwrap();
        let merged = s.merge().unwrap();
        assert!(merged.is_finite());
        assert!(merged.max_abs_diff(&w0) < 1e-12);
        let g = s.backward(&Matrix::identity(4), &Matrix::identity(4)).unwrap();
        assert!(g.d_b.is_finite());
    }

    #[test]
    fn param_count_cases() {
        let c = |k| count_params_for(k, 1024, 1024, 8).trainable;
        assert_eq!(c(AdapterKind::Lora), 16384);
        assert_eq!(c(AdapterKind::Dora), 17408);
        assert_eq!(c(AdapterKind::Wora), 17410);
        let p = count_params_for(AdapterKind::Wora, 1024, 1024, 8);
        assert_eq!(p.frozen, 1024 * 1024);
        assert_eq!(p.breakdown.values().sum::<usize>(), p.total);
    }

    #[test]
    fn merge_and_freeze_is_idempotent() {
        let s = random_state(2, 6, 5, 2, AdapterKind::Dora);
        let m1 = s.merge_and_freeze().unwrap();
        let m2 = s.merge_and_freeze().unwrap();
        assert_eq!(
            m1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            m2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn sgd_respects_trainable_set() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
        let x = rand_matrix(&mut rng, 4, 6);
        let d_y = rand_matrix(&mut rng, 4, 5);
        for kind in AdapterKind::ALL {
            let s = random_state(3, 6, 5, 2, kind);
            let g = s.backward(&x, &d_y).unwrap();
            let next = s.sgd_step(&g, 0.1, 0.0).unwrap();
            assert_eq!(next.w0, s.w0);
            assert_ne!(next.b, s.b);
            let scalars_moved = next.alpha != s.alpha && next.beta != s.beta;
            assert_eq!(scalars_moved, kind == AdapterKind::Wora, "{kind}");
            assert_eq!(next.mag != s.mag, kind != AdapterKind::Lora, "{kind}");
        }
    }

    proptest! {
        #[test]
        fn wora_minus_dora_is_two(d_in in 2usize..200, d_out in 2usize..200, rank in 1usize..16) {
            let w = count_params_for(AdapterKind::Wora, d_in, d_out, rank);
            let d = count_params_for(AdapterKind::Dora, d_in, d_out, rank);
            let l = count_params_for(AdapterKind::Lora, d_in, d_out, rank);
            prop_assert_eq!(w.trainable - d.trainable, 2);
            prop_assert_eq!(d.trainable - l.trainable, d_out);
            prop_assert_eq!(l.trainable, rank * (d_in + d_out));
            prop_assert_eq!(w.trainable + w.frozen, w.total);
        }

        #[test]
        fn forward_matches_merged_path(seed in any::<u64>(), k in 0usize..3) {
            let kind = AdapterKind::ALL[k];
            let s = random_state(seed, 7, 5, 3, kind);
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed ^ 0xabcd);
            let x = rand_matrix(&mut rng, 4, 7);
            let merged = matmul(&x, &s.merge().unwrap()).unwrap();
            prop_assert!(s.forward(&x).unwrap().max_abs_diff(&merged) < 1e-10);
        }
    }
}
