//! Desk-scale end-to-end run: synthetic paired embeddings with planted
//! mismatches, similarity-rank filtering, adaptation of a single projection
//! layer under full fine-tuning / LoRA / DoRA / WoRA with a symmetric
//! contrastive loss, and retrieval evaluation.
//!
//! The synthetic world has one orthonormal generator shared by images and
//! texts, so clean pairs are aligned in the raw embedding space. A separate
//! "pretraining" split distorts the images by a low-rank latent map; the base
//! projection is fitted there, and adapting it back to the undistorted target
//! domain is the task the adapters are compared on.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::adapters::{self, AdapterInit, AdapterKind, AdapterState};
use crate::embio::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::filtering::{filter_dataset, DistractorPool, FilterConfig, FilterReport, PairedDataset};
use crate::linalg::{self, matmul, matmul_tn, Matrix};
use crate::metrics::{self, build_rankings, EvalSummary};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;
pub const DEFAULT_LR: f64 = 0.05;
pub const DEFAULT_ETA: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_pairs: usize,
    pub dim_latent: usize,
    pub dim_embed: usize,
    pub noise_std: f64,
    pub corrupt_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_pairs: 4000,
            dim_latent: 16,
            dim_embed: 72,
            noise_std: 0.3,
            corrupt_fraction: 0.3,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.corrupt_fraction) {
            return Err(Error::Config(format!(
                "corrupt_fraction must be in [0, 1], got {}",
                self.corrupt_fraction
            )));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::Config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        if self.dim_latent == 0 || self.dim_latent > self.dim_embed {
            return Err(Error::Config(format!(
                "need 1 <= dim_latent ({}) <= dim_embed ({})",
                self.dim_latent, self.dim_embed
            )));
        }
        if self.n_pairs == 0 {
            return Err(Error::Config("n_pairs must be >= 1".into()));
        }
        Ok(())
    }

    pub fn corrupt_count(&self) -> usize {
        (self.corrupt_fraction * self.n_pairs as f64).round() as usize
    }
}

/// Pairs, distractor pool, and the planted corruption labels.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub data: PairedDataset,
    pub pool: DistractorPool,
    pub corrupted: Vec<bool>,
}

/// Generators behind a synthetic dataset.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    spec: SyntheticSpec,
    /// `dim_latent x dim_embed`, orthonormal rows.
    basis: Matrix,
}

fn gaussian(rng: &mut Xoshiro256PlusPlus, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Gram-Schmidt on the rows of `m`.
fn orthonormal_rows(m: &Matrix) -> Matrix {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(m.rows());
    for r in 0..m.rows() {
        let mut v = m.row(r).to_vec();
        for _ in 0..2 {
            for q in &rows {
                let p = linalg::dot(&v, q);
                v.iter_mut().zip(q).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = linalg::norm(&v);
        v.iter_mut().for_each(|x| *x /= n);
        rows.push(v);
    }
    Matrix::from_rows(&rows).expect("consistent row lengths")
}

fn stream(seed: u64, tag: u64) -> Xoshiro256PlusPlus {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    for _ in 0..tag {
        rng.jump();
    }
    rng
}

impl SyntheticWorld {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = stream(spec.seed, 0);
        let basis = orthonormal_rows(&gaussian(&mut rng, spec.dim_latent, spec.dim_embed));
        Ok(Self { spec, basis })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    fn embed(&self, latent: &Matrix, rng: &mut Xoshiro256PlusPlus) -> Matrix {
        let clean = matmul(latent, &self.basis).expect("latent width matches basis");
        if self.spec.noise_std == 0.0 {
            return clean;
        }
        let noise = gaussian(rng, clean.rows(), clean.cols());
        clean.add_scaled(&noise, self.spec.noise_std).expect("same shape")
    }

    /// `n` pairs from stream `tag`; `corrupt` of them (chosen at random) get
    /// a text drawn from an unrelated latent. Images pass through
    /// `image_map` in latent space when given.
    pub fn pairs(&self, n: usize, corrupt: usize, tag: u64, image_map: Option<&Matrix>) -> (Matrix, Matrix, Vec<bool>) {
        let mut rng = stream(self.spec.seed, tag);
        let z = gaussian(&mut rng, n, self.spec.dim_latent);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut corrupted = vec![false; n];
        for &i in &order[..corrupt.min(n)] {
            corrupted[i] = true;
        }
        let unrelated = gaussian(&mut rng, n, self.spec.dim_latent);
        let z_text = Matrix::from_fn(n, self.spec.dim_latent, |i, j| {
            if corrupted[i] {
                unrelated.get(i, j)
            } else {
                z.get(i, j)
            }
        });
        let z_img = match image_map {
            Some(m) => matmul(&z, m).expect("latent map is square"),
            None => z,
        };
        let images = self.embed(&z_img, &mut rng);
        let texts = self.embed(&z_text, &mut rng);
        (images, texts, corrupted)
    }

    pub fn texts(&self, n: usize, tag: u64) -> Matrix {
        let mut rng = stream(self.spec.seed, tag);
        let z = gaussian(&mut rng, n, self.spec.dim_latent);
        self.embed(&z, &mut rng)
    }

    /// `I + strength * U V^T` with `U, V` random orthonormal `dim_latent x k`.
    pub fn latent_distortion(&self, k: usize, strength: f64, tag: u64) -> Matrix {
        let d = self.spec.dim_latent;
        let k = k.min(d);
        let mut rng = stream(self.spec.seed, tag);
        let u = orthonormal_rows(&gaussian(&mut rng, k, d));
        let v = orthonormal_rows(&gaussian(&mut rng, k, d));
        let low = matmul_tn(&v, &u).expect("k rows each");
        Matrix::identity(d).add_scaled(&low, strength).expect("square")
    }
}

const TAG_TRAIN: u64 = 1;
const TAG_POOL: u64 = 2;
const TAG_EVAL: u64 = 3;
const TAG_PRETRAIN: u64 = 4;
const TAG_DISTORTION: u64 = 5;

fn with_prefix(prefix: &str, m: Matrix) -> EmbeddingMatrix {
    let ids = (0..m.rows()).map(|i| format!("{prefix}{i:06}")).collect();
    EmbeddingMatrix::new(ids, m).expect("unique generated ids")
}

/// Paired dataset plus a distractor pool four times its size, deterministic
/// in `spec.seed`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    let world = SyntheticWorld::new(*spec)?;
    Ok(world_data(&world))
}

fn world_data(world: &SyntheticWorld) -> SyntheticData {
    let spec = world.spec;
    let (images, texts, corrupted) = world.pairs(spec.n_pairs, spec.corrupt_count(), TAG_TRAIN, None);
    let images = with_prefix("pair", images);
    let texts = with_prefix("pair", texts);
    let data = PairedDataset::new(images, texts).expect("generated shapes agree");
    let pool = DistractorPool::new(with_prefix("pool", world.texts(4 * spec.n_pairs, TAG_POOL)), "synthetic");
    SyntheticData { data, pool, corrupted }
}

/// Loss value and gradients with respect to both embedding batches.
#[derive(Debug, Clone)]
pub struct ItcOutput {
    pub loss: f64,
    pub d_img: Matrix,
    pub d_txt: Matrix,
}

fn log_softmax_terms(logits: &[f64]) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    (max + sum.ln(), exps.into_iter().map(|e| e / sum).collect())
}

/// Symmetric in-batch contrastive loss over cosine logits scaled by
/// `1 / temperature`: the mean of image-to-text and text-to-image
/// cross-entropy, with row `i` of each batch forming the positive pair.
pub fn itc_loss(img: &Matrix, txt: &Matrix, temperature: f64) -> Result<ItcOutput> {
    if img.shape() != txt.shape() {
        return Err(Error::shape("itc_loss", linalg::shape_str(img), linalg::shape_str(txt)));
    }
    let n = img.rows();
    if n < 2 {
        return Err(Error::Config(format!("contrastive batch needs >= 2 pairs, got {n}")));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
    }
    let norms = |m: &Matrix| (0..m.rows()).map(|r| linalg::norm(m.row(r))).collect::<Vec<_>>();
    let (img_norms, txt_norms) = (norms(img), norms(txt));
    let (p, t) = (img.normalize_rows(), txt.normalize_rows());
    let logits = linalg::matmul_nt(&p, &t)?.scale(1.0 / temperature);

    let mut loss = 0.0;
    let mut d_logits = Matrix::zeros(n, n);
    let w = 1.0 / (2.0 * n as f64);
    for i in 0..n {
        let (lse, probs) = log_softmax_terms(logits.row(i));
        loss += lse - logits.get(i, i);
        for (j, pr) in probs.into_iter().enumerate() {
            let target = if i == j { 1.0 } else { 0.0 };
            d_logits.set(i, j, d_logits.get(i, j) + w * (pr - target));
        }
    }
    for j in 0..n {
        let (lse, probs) = log_softmax_terms(&logits.column(j));
        loss += lse - logits.get(j, j);
        for (i, pr) in probs.into_iter().enumerate() {
            let target = if i == j { 1.0 } else { 0.0 };
            d_logits.set(i, j, d_logits.get(i, j) + w * (pr - target));
        }
    }
    loss *= w;

    let d_p = matmul(&d_logits, &t)?.scale(1.0 / temperature);
    let d_t = matmul_tn(&d_logits, &p)?.scale(1.0 / temperature);
    Ok(ItcOutput {
        loss,
        d_img: through_normalization(&d_p, &p, &img_norms),
        d_txt: through_normalization(&d_t, &t, &txt_norms),
    })
}

/// Pulls a gradient on unit rows `unit` back to the unnormalized rows.
fn through_normalization(d_unit: &Matrix, unit: &Matrix, norms: &[f64]) -> Matrix {
    let mut out = Matrix::zeros(d_unit.rows(), d_unit.cols());
    for r in 0..d_unit.rows() {
        if norms[r] == 0.0 {
            continue;
        }
        let radial = linalg::dot(d_unit.row(r), unit.row(r));
        for c in 0..d_unit.cols() {
            out.set(r, c, (d_unit.get(r, c) - radial * unit.get(r, c)) / norms[r]);
        }
    }
    out
}

/// The six named loss scalars and the attribute-loss weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub itc: f64,
    pub itm: f64,
    pub mlm: f64,
    pub iac: f64,
    pub iam: f64,
    pub mam: f64,
    pub eta: f64,
}

impl LossTerms {
    /// Only the contrastive term set; the others are zero.
    pub fn itc_only(itc: f64) -> Self {
        Self {
            itc,
            itm: 0.0,
            mlm: 0.0,
            iac: 0.0,
            iam: 0.0,
            mam: 0.0,
            eta: DEFAULT_ETA,
        }
    }
}

/// `itc + itm + mlm + eta * (iac + iam + mam) / 3`.
pub fn total_loss(terms: &LossTerms) -> f64 {
    let attribute = (terms.iac + terms.iam + terms.mam) / 3.0;
    terms.itc + terms.itm + terms.mlm + terms.eta * attribute
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Base projection, no adaptation.
    Frozen,
    Full,
    Lora,
    Dora,
    Wora,
}

impl Method {
    pub fn adapter_kind(self) -> Option<AdapterKind> {
        match self {
            Method::Lora => Some(AdapterKind::Lora),
            Method::Dora => Some(AdapterKind::Dora),
            Method::Wora => Some(AdapterKind::Wora),
            Method::Frozen | Method::Full => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Frozen => "frozen",
            Method::Full => "full",
            Method::Lora => "lora",
            Method::Dora => "dora",
            Method::Wora => "wora",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "frozen" | "none" => Ok(Method::Frozen),
            "full" | "fullft" => Ok(Method::Full),
            "lora" => Ok(Method::Lora),
            "dora" => Ok(Method::Dora),
            "wora" => Ok(Method::Wora),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

/// Training, filtering and evaluation settings for the harness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HarnessConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    pub filter: FilterConfig,
    /// Train on the filtered split rather than on every generated pair.
    pub use_filter: bool,
    pub eval_pairs: usize,
    pub k_candidates: usize,
    pub pretrain_pairs: usize,
    pub pretrain_epochs: usize,
    /// Rank and strength of the latent image distortion in the pretraining split.
    pub shift_rank: usize,
    pub shift_strength: f64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: DEFAULT_LR,
            weight_decay: 0.0,
            temperature: DEFAULT_TEMPERATURE,
            alpha: adapters::DEFAULT_ALPHA,
            beta: adapters::DEFAULT_BETA,
            eta: DEFAULT_ETA,
            filter: FilterConfig::default(),
            use_filter: true,
            eval_pairs: 500,
            k_candidates: metrics::DEFAULT_CANDIDATES,
            pretrain_pairs: 4000,
            pretrain_epochs: 30,
            shift_rank: 4,
            shift_strength: 3.0,
        }
    }
}

impl HarnessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2".into()));
        }
        if !(self.lr > 0.0) || !(self.temperature > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr and temperature must be > 0, weight_decay >= 0".into()));
        }
        if self.eval_pairs < 2 {
            return Err(Error::Config("eval_pairs must be >= 2".into()));
        }
        let max_k = *metrics::EVAL_KS.iter().max().expect("nonempty");
        if self.k_candidates < max_k {
            return Err(Error::Config(format!("k_candidates must be >= {max_k}")));
        }
        Ok(())
    }
}

/// Everything an experiment needs that does not depend on the method.
#[derive(Debug, Clone)]
pub struct Workbench {
    pub spec: SyntheticSpec,
    pub synthetic: SyntheticData,
    pub filter_report: FilterReport,
    pub filtered: PairedDataset,
    pub eval_texts: EmbeddingMatrix,
    pub eval_images: Matrix,
    pub base_weight: Matrix,
}

impl Workbench {
    pub fn training_set(&self, use_filter: bool) -> &PairedDataset {
        if use_filter {
            &self.filtered
        } else {
            &self.synthetic.data
        }
    }

    /// Retrieval quality of an arbitrary projection on the held-out split.
    pub fn evaluate(&self, weight: &Matrix, k_candidates: usize) -> Result<EvalSummary> {
        let gallery = EmbeddingMatrix::with_row_ids(matmul(&self.eval_images, weight)?);
        let queries = EmbeddingMatrix::with_row_ids(self.eval_texts.matrix().clone());
        let relevance = metrics::relevance_by_id(&queries, &gallery);
        let rankings = build_rankings(&queries, &gallery, &relevance, k_candidates)?;
        metrics::evaluate(&rankings, &metrics::EVAL_KS)
    }
}

/// Generates the target-domain data, filters it, and fits the base
/// projection on a distorted pretraining split.
pub fn prepare(spec: &SyntheticSpec, cfg: &HarnessConfig) -> Result<Workbench> {
    cfg.validate()?;
    let world = SyntheticWorld::new(*spec)?;
    let synthetic = world_data(&world);

    let mut filter_cfg = cfg.filter;
    filter_cfg.distractor_count = filter_cfg.distractor_count.min(synthetic.pool.len());
    let filter_report = filter_dataset(&synthetic.data, &synthetic.pool, &filter_cfg)?;
    let filtered = synthetic.data.select(&filter_report.kept_indices());

    let (eval_images, eval_texts, _) = world.pairs(cfg.eval_pairs, 0, TAG_EVAL, None);
    let eval_texts = with_prefix("eval", eval_texts);

    let distortion = world.latent_distortion(cfg.shift_rank, cfg.shift_strength, TAG_DISTORTION);
    let (pre_images, pre_texts, _) = world.pairs(cfg.pretrain_pairs, 0, TAG_PRETRAIN, Some(&distortion));
    let pretrain = PairedDataset::new(with_prefix("pre", pre_images), with_prefix("pre", pre_texts))?;
    let steps = cfg.pretrain_epochs * pretrain.len().div_ceil(cfg.batch_size);
    let mut base = Model::Full(Matrix::identity(spec.dim_embed));
    train(&mut base, &pretrain, steps, spec.seed ^ 0x5052_4554, cfg)?;
    let base_weight = base.weight()?;

    Ok(Workbench {
        spec: *spec,
        synthetic,
        filter_report,
        filtered,
        eval_texts,
        eval_images,
        base_weight,
    })
}

enum Model {
    Full(Matrix),
    Adapter(AdapterState),
}

impl Model {
    fn is_finite(&self) -> bool {
        match self {
            Model::Full(w) => w.is_finite(),
            Model::Adapter(s) => {
                s.b.is_finite()
                    && s.a.is_finite()
                    && s.mag.data().iter().all(|v| v.is_finite())
                    && s.alpha.is_finite()
                    && s.beta.is_finite()
            }
        }
    }

    fn weight(&self) -> Result<Matrix> {
        match self {
            Model::Full(w) => Ok(w.clone()),
            Model::Adapter(s) => s.merge(),
        }
    }

    fn step(&mut self, x: &Matrix, txt: &Matrix, cfg: &HarnessConfig) -> Result<f64> {
        let y = match self {
            Model::Full(w) => matmul(x, w)?,
            Model::Adapter(s) => s.forward(x)?,
        };
        let out = itc_loss(&y, txt, cfg.temperature)?;
        match self {
            Model::Full(w) => {
                let g = matmul_tn(x, &out.d_img)?;
                *w = w.scale(1.0 - cfg.lr * cfg.weight_decay).add_scaled(&g, -cfg.lr)?;
            }
            Model::Adapter(s) => {
                let g = s.backward(x, &out.d_img)?;
                *s = s.sgd_step(&g, cfg.lr, cfg.weight_decay)?;
            }
        }
        let terms = LossTerms {
            eta: cfg.eta,
            ..LossTerms::itc_only(out.loss)
        };
        Ok(total_loss(&terms))
    }
}

struct TrainTrace {
    initial_loss: f64,
    final_loss: f64,
}

/// Seeded minibatch SGD for a fixed number of steps, reshuffling the
/// training set each time it is exhausted.
fn train(model: &mut Model, data: &PairedDataset, steps: usize, seed: u64, cfg: &HarnessConfig) -> Result<TrainTrace> {
    if data.len() < 2 {
        return Err(Error::Config(format!("training set has {} pairs, need >= 2", data.len())));
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let batch = cfg.batch_size.min(data.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let images = data.image_embeddings.matrix();
    let texts = data.text_embeddings.matrix();

    let mut trace = TrainTrace {
        initial_loss: f64::NAN,
        final_loss: f64::NAN,
    };
    for step in 0..steps {
        if cursor + batch > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        let loss = match model.step(&images.select_rows(idx), &texts.select_rows(idx), cfg) {
            Ok(l) if l.is_finite() && model.is_finite() => l,
            Ok(l) => return Err(Error::Diverged { step, loss: l }),
            Err(Error::Numeric { .. }) | Err(Error::Data(_)) => {
                return Err(Error::Diverged { step, loss: f64::NAN })
            }
            Err(e) => return Err(e),
        };
        if step == 0 {
            trace.initial_loss = loss;
        }
        trace.final_loss = loss;
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessResult {
    pub method: Method,
    pub rank: usize,
    pub seed: u64,
    pub filtered: bool,
    pub trainable_params: usize,
    pub recall: BTreeMap<usize, f64>,
    pub map_score: f64,
    /// Seconds.
    pub wall_time: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Frobenius distance between the adapted and the base projection.
    pub weight_shift: f64,
}

impl HarnessResult {
    pub fn r1(&self) -> f64 {
        self.recall.get(&1).copied().unwrap_or(f64::NAN)
    }

    /// Same result with the timing zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_time: 0.0,
            ..self.clone()
        }
    }
}

/// Adapts the base projection with `method` on the chosen training split and
/// evaluates it. The step budget is `epochs` passes over the full generated
/// set, so filtered and unfiltered runs take the same number of steps.
pub fn run_experiment(method: Method, rank: usize, bench: &Workbench, cfg: &HarnessConfig) -> Result<HarnessResult> {
    cfg.validate()?;
    let start = Instant::now();
    let d = bench.base_weight.rows();
    let seed = bench.spec.seed;
    let mut model = match method.adapter_kind() {
        Some(kind) => {
            let init = AdapterInit {
                alpha: cfg.alpha,
                beta: cfg.beta,
                ..AdapterInit::default()
            };
            Model::Adapter(adapters::init_adapter_with(
                bench.base_weight.clone(),
                rank,
                kind,
                seed.wrapping_add(rank as u64),
                init,
            )?)
        }
        None => Model::Full(bench.base_weight.clone()),
    };
    let trainable_params = match (&model, method) {
        (_, Method::Frozen) => 0,
        (Model::Adapter(s), _) => s.count_params().trainable,
        (Model::Full(w), _) => w.rows() * w.cols(),
    };

    let train_set = bench.training_set(cfg.use_filter);
    let steps = if method == Method::Frozen {
        0
    } else {
        cfg.epochs * bench.synthetic.data.len().div_ceil(cfg.batch_size)
    };
    let trace = if steps > 0 {
        train(&mut model, train_set, steps, seed ^ 0x5452_4149, cfg)?
    } else {
        TrainTrace {
            initial_loss: f64::NAN,
            final_loss: f64::NAN,
        }
    };

    let weight = model.weight()?;
    let summary = bench.evaluate(&weight, cfg.k_candidates)?;
    debug_assert_eq!(weight.shape(), (d, d));
    Ok(HarnessResult {
        method,
        rank: if method.adapter_kind().is_some() { rank } else { 0 },
        seed,
        filtered: cfg.use_filter,
        trainable_params,
        recall: summary.recall,
        map_score: summary.map,
        wall_time: start.elapsed().as_secs_f64(),
        initial_loss: trace.initial_loss,
        final_loss: trace.final_loss,
        weight_shift: weight.add_scaled(&bench.base_weight, -1.0)?.frobenius_norm(),
    })
}

/// WoRA at each rank on the same workbench.
pub fn rank_sweep(ranks: &[usize], bench: &Workbench, cfg: &HarnessConfig, method: Method) -> Result<Vec<HarnessResult>> {
    ranks.iter().map(|&r| run_experiment(method, r, bench, cfg)).collect()
}

/// CSV with one row per result: method, rank, seed, R@1, R@5, R@10, mAP.
pub fn results_csv(results: &[HarnessResult]) -> String {
    let mut out = String::from("method,rank,seed,filtered,trainable_params,r1,r5,r10,map,final_loss\n");
    for r in results {
        let rk = |k| r.recall.get(&k).copied().unwrap_or(f64::NAN);
        out.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.method,
            r.rank,
            r.seed,
            r.filtered,
            r.trainable_params,
            rk(1),
            rk(5),
            rk(10),
            r.map_score,
            r.final_loss
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(f: impl Fn(&Matrix) -> f64, m: &Matrix, h: f64) -> Matrix {
        let mut g = Matrix::zeros(m.rows(), m.cols());
        for r in 0..m.rows() {
            for c in 0..m.cols() {
                let mut p = m.clone();
                p.set(r, c, m.get(r, c) + h);
                let up = f(&p);
                p.set(r, c, m.get(r, c) - h);
                g.set(r, c, (up - f(&p)) / (2.0 * h));
            }
        }
        g
    }

    #[test]
    fn itc_two_orthonormal_pairs() {
        let e = Matrix::identity(2);
        let out = itc_loss(&e, &e, 1.0).unwrap();
        let expected = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
        assert!((out.loss - expected).abs() < 1e-15);
        assert!((out.loss - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn itc_is_permutation_invariant() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
        let img = gaussian(&mut rng, 6, 4);
        let txt = gaussian(&mut rng, 6, 4);
        let perm = [3, 0, 5, 1, 4, 2];
        let a = itc_loss(&img, &txt, 0.07).unwrap().loss;
        let b = itc_loss(&img.select_rows(&perm), &txt.select_rows(&perm), 0.07).unwrap().loss;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn itc_gradients_match_finite_differences() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(2);
        let img = gaussian(&mut rng, 5, 4);
        let txt = gaussian(&mut rng, 5, 4);
        let out = itc_loss(&img, &txt, 0.5).unwrap();
        let ni = numeric_grad(|m| itc_loss(m, &txt, 0.5).unwrap().loss, &img, 1e-5);
        let nt = numeric_grad(|m| itc_loss(&img, m, 0.5).unwrap().loss, &txt, 1e-5);
        for (a, n) in out.d_img.data().iter().zip(ni.data()).chain(out.d_txt.data().iter().zip(nt.data())) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-300);
            assert!(rel < 1e-6, "analytic {a} numeric {n}");
        }
    }

    #[test]
    fn itc_rejects_tiny_batch() {
        let e = Matrix::identity(2);
        assert!(matches!(itc_loss(&e.select_rows(&[0]), &e.select_rows(&[0]), 1.0), Err(Error::Config(_))));
        assert!(itc_loss(&e, &e, 0.0).is_err());
    }

    #[test]
    fn total_loss_cases() {
        let ones = LossTerms { itc: 1.0, itm: 1.0, mlm: 1.0, iac: 1.0, iam: 1.0, mam: 1.0, eta: 0.8 };
        assert!((total_loss(&ones) - 3.8).abs() < 1e-12);
        let no_attr = LossTerms { iac: 0.0, iam: 0.0, mam: 0.0, ..ones };
        assert_eq!(total_loss(&no_attr), 3.0);
        let no_eta = LossTerms { eta: 0.0, iac: 5.0, ..ones };
        assert_eq!(total_loss(&no_eta), 3.0);
        // d total / d iac = eta / 3
        let bumped = LossTerms { iac: 2.0, ..ones };
        assert!((total_loss(&bumped) - total_loss(&ones) - 0.8 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn synthetic_is_deterministic_and_validated() {
        let spec = SyntheticSpec { n_pairs: 50, ..SyntheticSpec::default() };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a.data.image_embeddings, b.data.image_embeddings);
        assert_eq!(a.data.text_embeddings, b.data.text_embeddings);
        assert_eq!(a.pool.embeddings, b.pool.embeddings);
        assert_eq!(a.corrupted.iter().filter(|&&c| c).count(), 15);

        for bad in [-0.1, 1.5] {
            let spec = SyntheticSpec { corrupt_fraction: bad, ..spec };
            assert!(matches!(generate_synthetic(&spec), Err(Error::Config(_))));
        }
    }

    #[test]
    fn noiseless_clean_pairs_rank_first() {
        let spec = SyntheticSpec {
            n_pairs: 200,
            noise_std: 0.0,
            corrupt_fraction: 0.0,
            ..SyntheticSpec::default()
        };
        let s = generate_synthetic(&spec).unwrap();
        let cfg = FilterConfig { rank_threshold: 1, distractor_count: 800, seed: 1, shared_sample: true };
        let report = filter_dataset(&s.data, &s.pool, &cfg).unwrap();
        assert!(report.records.iter().all(|r| r.rank == 1));
        assert_eq!(report.retention_rate, 1.0);
    }

    fn tiny() -> (SyntheticSpec, HarnessConfig) {
        let spec = SyntheticSpec {
            n_pairs: 120,
            dim_latent: 6,
            dim_embed: 24,
            seed: 4,
            ..SyntheticSpec::default()
        };
        let cfg = HarnessConfig {
            epochs: 3,
            batch_size: 16,
            eval_pairs: 40,
            pretrain_pairs: 100,
            pretrain_epochs: 2,
            ..HarnessConfig::default()
        };
        (spec, cfg)
    }

    #[test]
    fn experiment_counts_and_determinism() {
        let (spec, cfg) = tiny();
        let bench = prepare(&spec, &cfg).unwrap();
        let wora = run_experiment(Method::Wora, 4, &bench, &cfg).unwrap();
        assert_eq!(wora.trainable_params, 4 * (24 + 24) + 24 + 2);
        assert!(wora.weight_shift > 0.0);
        assert!(wora.final_loss.is_finite() && wora.initial_loss.is_finite());
        assert_eq!(run_experiment(Method::Full, 4, &bench, &cfg).unwrap().trainable_params, 24 * 24);

        let frozen = run_experiment(Method::Frozen, 4, &bench, &cfg).unwrap();
        assert_eq!((frozen.trainable_params, frozen.rank), (0, 0));
        assert_eq!(frozen.weight_shift, 0.0);

        let again = run_experiment(Method::Wora, 4, &prepare(&spec, &cfg).unwrap(), &cfg).unwrap();
        assert_eq!(wora.without_timing(), again.without_timing());
    }

    #[test]
    fn csv_has_one_row_per_result() {
        let (spec, cfg) = tiny();
        let bench = prepare(&spec, &cfg).unwrap();
        let results = rank_sweep(&[2, 4], &bench, &cfg, Method::Lora).unwrap();
        let csv = results_csv(&results);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(2).unwrap().starts_with("lora,4,4,true,"));
    }

    #[test]
    fn methods_parse() {
        assert_eq!("wora".parse::<Method>().unwrap(), Method::Wora);
        assert_eq!("full".parse::<Method>().unwrap(), Method::Full);
        assert!("nope".parse::<Method>().is_err());
    }
}
