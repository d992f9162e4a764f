//! Identifiability metrics over paired (true latent, learned latent) data.
//!
//! The theory promises recovery up to injective reparameterization, which
//! has no direct numeric form. The operational surrogate here is
//! out-of-sample predictability: ĉ = γ(c) for an injective γ means content
//! is predictable from codes and codes from content, so alignment is scored
//! as R² in both directions under a held-out split, with a kernel-ridge
//! regressor available for nonlinearly aligned blocks. Leakage reuses the
//! same machinery across blocks (predicting true content from learned
//! style, and conversely); low leakage is what separates disentanglement
//! from mere reconstruction.
//!
//! The remaining statistics probe the proofs' mechanics directly: an
//! effective style dimension for the sparsity argument, a finite-difference
//! Jacobian ratio for content invariance to style, per-domain HSIC with a
//! permutation quantile for code independence, and a style-diversity score
//! for generators (mean pairwise Euclidean distance among generations
//! sharing a content code; a perceptual distance has no vector-scale
//! analog, and the substitution is a recorded fidelity gap).

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{self, KernelSpec};
use crate::mat::{self, Mat};
use crate::models::GanBundle;
use crate::rng::{self, Stream};
use crate::world::World;

/// Paired codes for one evaluation pass. True blocks carry the world's
/// dimensions, learned blocks the model's guesses; rows are aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeBatch {
    pub true_c: Mat,
    pub true_s: Mat,
    pub learned_c: Mat,
    pub learned_s: Mat,
    /// Source domain per row.
    pub domain: Vec<usize>,
}

impl CodeBatch {
    pub fn rows(&self) -> usize {
        self.true_c.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.true_c.rows();
        let ok = self.true_s.rows() == n
            && self.learned_c.rows() == n
            && self.learned_s.rows() == n
            && self.domain.len() == n;
        if !ok {
            return Err(Error::InvalidSpec(alloc::format!(
                "code batch rows disagree: true {}x{}, learned {}x{}, {} domain labels",
                self.true_c.rows(),
                self.true_s.rows(),
                self.learned_c.rows(),
                self.learned_s.rows(),
                self.domain.len()
            )));
        }
        Ok(())
    }

    fn domains(&self) -> Vec<usize> {
        self.domain.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    fn rows_of_domain(&self, n: usize) -> Vec<usize> {
        (0..self.domain.len()).filter(|&i| self.domain[i] == n).collect()
    }
}

/// Alignment regressor. Linear is exact under affine reparameterization;
/// kernel ridge covers nonlinear alignment maps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regressor {
    Linear,
    KernelRidge { sigma: KernelSpec, ridge: f64 },
}

impl Regressor {
    fn validate(&self) -> Result<()> {
        if let Regressor::KernelRidge { ridge, .. } = self {
            if !(*ridge > 0.0 && ridge.is_finite()) {
                return Err(Error::InvalidSpec(alloc::format!(
                    "kernel ridge needs ridge > 0, got {ridge}"
                )));
            }
        }
        Ok(())
    }
}

/// Share of rows held out by [`alignment_r2`].
const TEST_FRACTION: usize = 5;

/// Below this sum of squares a target column counts as constant and the
/// degenerate convention applies: 1 when predictions reproduce the
/// constant, 0 otherwise.
const SST_FLOOR: f64 = 1e-12;

fn solve_normal_equations(x: &Mat, b: &Mat) -> Result<Mat> {
    let xtx = x.matmul_at_b(x)?;
    let xtb = x.matmul_at_b(b)?;
    let scale = (0..xtx.rows()).map(|i| xtx.get(i, i)).fold(1.0f64, f64::max);
    // Plain least squares first; jitter only rescues collinear predictors,
    // so the affine-invariance guarantee is untouched on full-rank input.
    let mut jitter = 0.0;
    for _ in 0..6 {
        let mut g = xtx.clone();
        for i in 0..g.rows() {
            g.set(i, i, g.get(i, i) + jitter);
        }
        if let Ok(l) = mat::cholesky(&g) {
            return mat::cholesky_solve(&l, &xtb);
        }
        jitter = if jitter == 0.0 { scale * 1e-12 } else { jitter * 100.0 };
    }
    Err(Error::Degenerate("normal equations unsolvable".into()))
}

fn with_intercept(a: &Mat) -> Result<Mat> {
    Mat::from_fn(a.rows(), 1, |_, _| 1.0).hcat(a)
}

/// Out-of-sample predictions for the held-out block.
fn fit_predict(
    a_train: &Mat,
    b_train: &Mat,
    a_test: &Mat,
    reg: &Regressor,
) -> Result<Mat> {
    match reg {
        Regressor::Linear => {
            let w = solve_normal_equations(&with_intercept(a_train)?, b_train)?;
            with_intercept(a_test)?.matmul(&w)
        }
        Regressor::KernelRidge { sigma, ridge } => {
            let s = sigma.resolve(&[a_train])?;
            let mut k = kernel::gram(a_train, a_train, s);
            for i in 0..k.rows() {
                k.set(i, i, k.get(i, i) + ridge);
            }
            let l = mat::cholesky(&k)?;
            let alpha = mat::cholesky_solve(&l, b_train)?;
            kernel::gram(a_test, a_train, s).matmul(&alpha)
        }
    }
}

fn r2_columns(pred: &Mat, truth: &Mat) -> f64 {
    let n = truth.rows() as f64;
    let mut acc = 0.0;
    for j in 0..truth.cols() {
        let mean = (0..truth.rows()).map(|i| truth.get(i, j)).sum::<f64>() / n;
        let mut sse = 0.0;
        let mut sst = 0.0;
        for i in 0..truth.rows() {
            sse += (pred.get(i, j) - truth.get(i, j)) * (pred.get(i, j) - truth.get(i, j));
            sst += (truth.get(i, j) - mean) * (truth.get(i, j) - mean);
        }
        acc += if sst <= SST_FLOOR {
            if sse <= SST_FLOOR {
                1.0
            } else {
                0.0
            }
        } else {
            1.0 - sse / sst
        };
    }
    acc / truth.cols() as f64
}

/// Out-of-sample R² of predicting `b` from `a`, averaged over `b`'s
/// columns, on an internal 80/20 split drawn from stream (seed, 0). For the
/// linear regressor the score is invariant under invertible affine
/// reparameterization of `a` because predictions depend only on the
/// predictor column space.
pub fn alignment_r2(a: &Mat, b: &Mat, reg: &Regressor, seed: u64) -> Result<f64> {
    reg.validate()?;
    if a.rows() != b.rows() {
        return Err(Error::shape("alignment_r2", a.shape(), b.shape()));
    }
    if a.rows() < 10 {
        return Err(Error::Degenerate(alloc::format!(
            "alignment needs at least 10 rows, got {}",
            a.rows()
        )));
    }
    if a.cols() == 0 || b.cols() == 0 {
        return Err(Error::Degenerate("alignment needs at least one column".into()));
    }
    let n = a.rows();
    let perm = rng::permutation(&mut rng::stream(seed, 0), n);
    let n_test = (n / TEST_FRACTION).max(1);
    let (test_idx, train_idx) = perm.split_at(n_test);
    let pred = fit_predict(
        &a.take_rows(train_idx),
        &b.take_rows(train_idx),
        &a.take_rows(test_idx),
        reg,
    )?;
    Ok(r2_columns(&pred, &b.take_rows(test_idx)))
}

/// Cross-block predictability: (true content from learned style, true style
/// from learned content). Both regressions use the same split seed.
pub fn leakage_scores(codes: &CodeBatch, reg: &Regressor, seed: u64) -> Result<(f64, f64)> {
    codes.validate()?;
    let c_from_s = alignment_r2(&codes.learned_s, &codes.true_c, reg, seed)?;
    let s_from_c = alignment_r2(&codes.learned_c, &codes.true_s, reg, seed)?;
    Ok((c_from_s, s_from_c))
}

/// Number of style columns carrying signal: columns whose mean absolute
/// value exceeds `tau_rel` times the largest column's. Mean absolute value
/// rather than variance so a constant-offset dead coordinate still counts
/// as dead only when it is actually near zero.
pub fn effective_dim(style_codes: &Mat, tau_rel: f64) -> Result<usize> {
    if !(tau_rel > 0.0 && tau_rel < 1.0) {
        return Err(Error::InvalidSpec(alloc::format!(
            "tau_rel must lie in (0, 1), got {tau_rel}"
        )));
    }
    if style_codes.rows() == 0 || style_codes.cols() == 0 {
        return Ok(0);
    }
    let means = style_codes.col_mean_abs();
    let top = means.iter().copied().fold(0.0f64, f64::max);
    if top <= 0.0 {
        return Ok(0);
    }
    Ok(means.iter().filter(|&&m| m > tau_rel * top).count())
}

/// Encoder under probe: rows of observations in, rows of content codes out.
pub type EncodeFn<'a> = &'a dyn Fn(&Mat) -> Result<Mat>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Median over sample points of ‖∂ĉ/∂s‖_F / (‖∂ĉ/∂c‖_F + 1e-12).
    pub ratio: f64,
    /// Points dropped for non-finite encoder output.
    pub skipped: usize,
    /// Points whose content Jacobian norm sat below the 1e-12 floor.
    pub degenerate_denominators: usize,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Content invariance to style, measured at the data: finite-difference
/// Jacobians of encode ∘ g at latents sampled from the world (domains in
/// round robin). An invariant content head has ∂ĉ/∂s = 0 exactly; the
/// reported ratio normalizes by the content Jacobian so rescaling ĉ cancels.
/// Fails when more than half the points get skipped.
pub fn content_invariance_probe(
    encode: EncodeFn,
    world: &World,
    n_points: usize,
    h: f64,
    rng: &mut Stream,
) -> Result<ProbeResult> {
    if n_points == 0 || !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidSpec(alloc::format!(
            "probe needs n_points >= 1 and h > 0, got {n_points} and {h}"
        )));
    }
    let d_c = world.spec().d_c;
    let d_s = world.spec().d_s;
    let n_domains = world.spec().n_domains;
    let mut ratios = Vec::with_capacity(n_points);
    let mut skipped = 0usize;
    let mut degenerate = 0usize;
    for i in 0..n_points {
        let batch = world.sample_domain(i % n_domains, 1, rng)?;
        let z0: Vec<f64> = batch.c.row(0).iter().chain(batch.s.row(0)).copied().collect();
        let mut zp = Mat::from_fn(2 * (d_c + d_s), d_c + d_s, |_, j| z0[j]);
        for j in 0..d_c + d_s {
            zp.set(2 * j, j, z0[j] + h);
            zp.set(2 * j + 1, j, z0[j] - h);
        }
        let x = world.mixing().mix(&zp)?;
        let chat = encode(&x)?;
        if chat.rows() != zp.rows() {
            return Err(Error::shape("probe encoder output", (zp.rows(), 0), chat.shape()));
        }
        if !chat.all_finite() {
            skipped += 1;
            continue;
        }
        let mut fc2 = 0.0;
        let mut fs2 = 0.0;
        for j in 0..d_c + d_s {
            let plus = chat.row(2 * j);
            let minus = chat.row(2 * j + 1);
            let col2: f64 = plus
                .iter()
                .zip(minus)
                .map(|(p, m)| {
                    let d = (p - m) / (2.0 * h);
                    d * d
                })
                .sum();
            if j < d_c {
                fc2 += col2;
            } else {
                fs2 += col2;
            }
        }
        let denom = crate::fmath::sqrt(fc2);
        if denom < 1e-12 {
            degenerate += 1;
        }
        ratios.push(crate::fmath::sqrt(fs2) / (denom + 1e-12));
    }
    if 2 * skipped > n_points {
        return Err(Error::Degenerate(alloc::format!(
            "invariance probe skipped {skipped} of {n_points} points"
        )));
    }
    Ok(ProbeResult {
        ratio: median(&mut ratios),
        skipped,
        degenerate_denominators: degenerate,
    })
}

/// Per-domain independence check on the learned blocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainIndependence {
    pub domain: usize,
    /// Biased HSIC between learned content and learned style.
    pub hsic: f64,
    /// Permutation quantile of the same statistic under the null.
    pub quantile: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Regressor for every alignment and leakage score. Linear keeps the
    /// perfect-codes readings exact; kernel ridge is the right choice for
    /// encoder outputs, which align nonlinearly.
    pub regressor: Regressor,
    pub tau_rel: f64,
    /// Rows per domain entering the independence check; the permutation
    /// calibration costs O(rows² · permutations).
    pub hsic_rows: usize,
    pub hsic_permutations: usize,
    pub hsic_quantile: f64,
    pub kernel_c: KernelSpec,
    pub kernel_s: KernelSpec,
    pub probe_points: usize,
    pub probe_h: f64,
    /// Stream layout: (seed, 0) alignment splits, (seed, 1) probe sampling,
    /// (seed, 2 + 2n) subsampling and (seed, 3 + 2n) permutations for
    /// domain n.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            regressor: Regressor::Linear,
            tau_rel: 0.1,
            hsic_rows: 512,
            hsic_permutations: 200,
            hsic_quantile: 0.95,
            kernel_c: KernelSpec::median(),
            kernel_s: KernelSpec::median(),
            probe_points: 48,
            probe_h: 1e-3,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.regressor.validate()?;
        let ok = self.tau_rel > 0.0
            && self.tau_rel < 1.0
            && self.hsic_rows >= 4
            && self.hsic_permutations >= 1
            && (0.0..=1.0).contains(&self.hsic_quantile)
            && self.probe_points >= 1
            && self.probe_h > 0.0
            && self.probe_h.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidSpec(alloc::format!("bad eval config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentReport {
    /// R² predicting learned content from true content.
    pub content_r2_fwd: f64,
    /// R² predicting true content from learned content.
    pub content_r2_bwd: f64,
    pub style_r2_fwd: f64,
    pub style_r2_bwd: f64,
    pub leakage_c_from_s: f64,
    pub leakage_s_from_c: f64,
    pub effective_style_dim: usize,
    /// Present only when an encoder and world were supplied.
    pub invariance: Option<ProbeResult>,
    pub independence: Vec<DomainIndependence>,
}

impl IdentReport {
    /// Bidirectional content predictability. Injectivity needs both
    /// directions, so the pathological constant head scores 0 here through
    /// the backward direction even though the forward one is trivially 1.
    pub fn content_score(&self) -> f64 {
        self.content_r2_fwd.min(self.content_r2_bwd)
    }

    pub fn style_score(&self) -> f64 {
        self.style_r2_fwd.min(self.style_r2_bwd)
    }

    /// True when every domain's HSIC sits at or below its permutation
    /// quantile.
    pub fn independent(&self) -> bool {
        self.independence.iter().all(|d| d.hsic <= d.quantile)
    }
}

/// Assembles every statistic above over one code batch. The probe runs only
/// when `probe` supplies an encoder and its world; everything else is
/// always filled. Deterministic given `cfg.seed`.
pub fn make_ident_report(
    codes: &CodeBatch,
    probe: Option<(EncodeFn, &World)>,
    cfg: &EvalConfig,
) -> Result<IdentReport> {
    cfg.validate()?;
    codes.validate()?;
    let reg = &cfg.regressor;
    let content_r2_fwd = alignment_r2(&codes.true_c, &codes.learned_c, reg, cfg.seed)?;
    let content_r2_bwd = alignment_r2(&codes.learned_c, &codes.true_c, reg, cfg.seed)?;
    let style_r2_fwd = alignment_r2(&codes.true_s, &codes.learned_s, reg, cfg.seed)?;
    let style_r2_bwd = alignment_r2(&codes.learned_s, &codes.true_s, reg, cfg.seed)?;
    let (leakage_c_from_s, leakage_s_from_c) = leakage_scores(codes, reg, cfg.seed)?;
    let effective_style_dim = effective_dim(&codes.learned_s, cfg.tau_rel)?;
    let invariance = match probe {
        Some((encode, world)) => Some(content_invariance_probe(
            encode,
            world,
            cfg.probe_points,
            cfg.probe_h,
            &mut rng::stream(cfg.seed, 1),
        )?),
        None => None,
    };
    let mut independence = Vec::new();
    for n in codes.domains() {
        let mut idx = codes.rows_of_domain(n);
        if idx.len() > cfg.hsic_rows {
            let perm = rng::permutation(&mut rng::stream(cfg.seed, 2 + 2 * n as u64), idx.len());
            idx = perm[..cfg.hsic_rows].iter().map(|&p| idx[p]).collect();
        }
        let lc = codes.learned_c.take_rows(&idx);
        let ls = codes.learned_s.take_rows(&idx);
        let hsic = kernel::hsic_biased(&lc, &ls, &cfg.kernel_c, &cfg.kernel_s)?;
        let quantile = kernel::hsic_permutation_quantile(
            &lc,
            &ls,
            &cfg.kernel_c,
            &cfg.kernel_s,
            cfg.hsic_permutations,
            cfg.hsic_quantile,
            &mut rng::stream(cfg.seed, 3 + 2 * n as u64),
        )?;
        independence.push(DomainIndependence { domain: n, hsic, quantile });
    }
    Ok(IdentReport {
        content_r2_fwd,
        content_r2_bwd,
        style_r2_fwd,
        style_r2_bwd,
        leakage_c_from_s,
        leakage_s_from_c,
        effective_style_dim,
        invariance,
        independence,
    })
}

/// Style diversity of a generator: mean pairwise Euclidean distance among
/// `n_styles_per_content` generations sharing one content code, averaged
/// over `n_contents` contents. Content draws come from stream (seed, 0),
/// style draws from (seed, 1).
pub fn diversity_score(
    bundle: &GanBundle,
    n_contents: usize,
    n_styles_per_content: usize,
    domain: usize,
    seed: u64,
) -> Result<f64> {
    if n_contents < 2 || n_styles_per_content < 2 {
        return Err(Error::InvalidSpec(alloc::format!(
            "diversity needs both counts >= 2, got {n_contents} and {n_styles_per_content}"
        )));
    }
    bundle.validate()?;
    bundle.check_domain(domain)?;
    let contents = bundle
        .e_c
        .forward_only(&rng::normal_mat(&mut rng::stream(seed, 0), n_contents, bundle.dc_hat))?;
    let styles = bundle.e_s[domain].forward_only(&rng::normal_mat(
        &mut rng::stream(seed, 1),
        n_contents * n_styles_per_content,
        bundle.ds_hat,
    ))?;
    let z = Mat::from_fn(
        n_contents * n_styles_per_content,
        bundle.dc_hat + bundle.ds_hat,
        |r, col| {
            if col < bundle.dc_hat {
                contents.get(r / n_styles_per_content, col)
            } else {
                styles.get(r, col - bundle.dc_hat)
            }
        },
    );
    let x = bundle.q.forward_only(&z)?;
    let mut total = 0.0;
    for g in 0..n_contents {
        let base = g * n_styles_per_content;
        let mut acc = 0.0;
        let mut pairs = 0usize;
        for i in 0..n_styles_per_content {
            for j in (i + 1)..n_styles_per_content {
                acc += crate::fmath::sqrt(mat::sq_dist(x.row(base + i), x.row(base + j)));
                pairs += 1;
            }
        }
        total += acc / pairs as f64;
    }
    Ok(total / n_contents as f64)
}
