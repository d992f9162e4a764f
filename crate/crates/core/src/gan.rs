//! Adversarial trainer: per-domain non-saturating logistic game with an
//! ℓ0-surrogate sparsity penalty on style codes.
//!
//! The discriminator phase minimizes the logistic loss on (real, generated)
//! batches per domain; the generator phase takes one Adam step on the
//! non-saturating loss summed over domains plus the sparsity penalty. The
//! full trace is a pure function of (sampler seed, config seed).

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::adam::{AdamHyper, AdamState};
use crate::error::{Error, Result};
use crate::fmath;
use crate::kernel::{mmd2_unbiased, KernelSpec};
use crate::mat::Mat;
use crate::mlp::MlpGrads;
use crate::models::{
    generate_backward_styled, generate_traced, DomainSampler, GanBundle, NoiseDraw,
};
use crate::rng::{self, Stream};

/// Discriminator probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]`
/// inside every log so that saturation cannot produce an infinite loss.
pub const PROB_CLAMP: f64 = 1e-7;

/// Any loss beyond this aborts training with the trace collected so far.
pub const DIVERGE_AT: f64 = 1e6;

/// Smoothing constant inside the ℓ_{1/2} surrogate.
pub const SPARSE_EPS: f64 = 1e-8;

/// Exponent of the ℓ0 surrogate: φ_1(t) = t, φ_{1/2}(t) = √(t + ε).
/// Serialized as the number it names (1 or 0.5).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SparsityExponent {
    L1,
    LHalf,
}

impl SparsityExponent {
    /// φ_p applied to a magnitude `t ≥ 0`.
    #[inline]
    pub fn phi(self, t: f64) -> f64 {
        match self {
            SparsityExponent::L1 => t,
            SparsityExponent::LHalf => fmath::sqrt(t + SPARSE_EPS),
        }
    }

    /// d φ_p(|s|) / d s, with the subgradient 0 at s = 0.
    #[inline]
    fn dphi(self, s: f64) -> f64 {
        let sign = if s > 0.0 {
            1.0
        } else if s < 0.0 {
            -1.0
        } else {
            0.0
        };
        match self {
            SparsityExponent::L1 => sign,
            SparsityExponent::LHalf => sign / (2.0 * fmath::sqrt(s.abs() + SPARSE_EPS)),
        }
    }
}

impl Serialize for SparsityExponent {
    fn serialize<S: Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        match self {
            SparsityExponent::L1 => s.serialize_f64(1.0),
            SparsityExponent::LHalf => s.serialize_f64(0.5),
        }
    }
}

impl<'de> Deserialize<'de> for SparsityExponent {
    fn deserialize<D: Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        match f64::deserialize(d)? {
            v if v == 1.0 => Ok(SparsityExponent::L1),
            v if v == 0.5 => Ok(SparsityExponent::LHalf),
            v => Err(D::Error::custom(alloc::format!(
                "sparsity exponent must be 1 or 0.5, got {v}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanTrainConfig {
    /// Generator steps. Zero is a no-op run returning the initial bundle.
    pub steps: usize,
    pub batch: usize,
    pub lr_gen: f64,
    pub lr_disc: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Sparsity weight λ ≥ 0.
    pub lambda: f64,
    /// Sparsity exponent p.
    pub p: SparsityExponent,
    pub disc_steps_per_gen_step: usize,
    pub seed: u64,
    /// Trace cadence in generator steps.
    pub eval_every: usize,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        GanTrainConfig {
            steps: 6000,
            batch: 128,
            lr_gen: 1e-3,
            lr_disc: 1e-3,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            lambda: 0.3,
            p: SparsityExponent::L1,
            disc_steps_per_gen_step: 1,
            seed: 0,
            eval_every: 200,
        }
    }
}

impl GanTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch >= 1
            && self.lr_gen > 0.0
            && self.lr_disc > 0.0
            && self.lr_gen.is_finite()
            && self.lr_disc.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.lambda >= 0.0
            && self.lambda.is_finite()
            && self.disc_steps_per_gen_step >= 1
            && self.eval_every >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidSpec(alloc::format!("bad train config {self:?}")))
        }
    }
}

/// One evaluation snapshot. All entries are finite: rows are emitted only
/// while the divergence guard holds. Wall-clock time is deliberately absent
/// so that traces are byte-stable across machines; run metadata carries it.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    /// Generator steps completed when the row was taken (1-based).
    pub step: usize,
    pub disc_loss: Vec<f64>,
    pub gen_loss: Vec<f64>,
    pub sparsity: f64,
    pub mmd_to_data: Vec<f64>,
}

/// Where and why a run tripped the divergence guard.
#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub step: usize,
    pub term: String,
    /// The offending loss, or NaN when the trigger was a non-finite
    /// value inside a network rather than a loss.
    pub value: f64,
}

#[derive(Debug)]
pub struct GanTrainOutcome {
    pub bundle: GanBundle,
    pub trace: Vec<TraceRow>,
    /// Set when the guard aborted the run; the bundle and trace hold the
    /// state reached up to that point.
    pub diverged: Option<Divergence>,
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.max(PROB_CLAMP).min(1.0 - PROB_CLAMP)
}

/// Mean over batches of −[log d(real) + log(1 − d(fake))], the minimization
/// form of the discriminator's objective.
pub fn disc_loss(bundle: &GanBundle, real: &Mat, fake: &Mat, n: usize) -> Result<f64> {
    bundle.check_domain(n)?;
    check_nonempty(real, fake)?;
    let yr = bundle.disc[n].forward_only(real)?;
    let yf = bundle.disc[n].forward_only(fake)?;
    let mut loss = 0.0;
    for &y in yr.data() {
        loss -= fmath::ln(clamp_prob(y)) / yr.rows() as f64;
    }
    for &y in yf.data() {
        loss -= fmath::ln(1.0 - clamp_prob(y)) / yf.rows() as f64;
    }
    Ok(loss)
}

/// [`disc_loss`] together with the gradient for the domain's discriminator.
/// Rejects non-finite inputs so that a diverged generator surfaces here, as
/// a `NonFinite` the training loop maps to its guard, not inside Adam.
pub fn disc_loss_traced(
    bundle: &GanBundle,
    real: &Mat,
    fake: &Mat,
    n: usize,
) -> Result<(f64, MlpGrads)> {
    bundle.check_domain(n)?;
    check_nonempty(real, fake)?;
    if !fake.all_finite() || !real.all_finite() {
        return Err(Error::NonFinite { context: "adversarial batch", layer: n });
    }
    let (yr, tape_r) = bundle.disc[n].forward(real)?;
    let (yf, tape_f) = bundle.disc[n].forward(fake)?;
    let br = yr.rows() as f64;
    let bf = yf.rows() as f64;
    let mut loss = 0.0;
    for &y in yr.data() {
        loss -= fmath::ln(clamp_prob(y)) / br;
    }
    for &y in yf.data() {
        loss -= fmath::ln(1.0 - clamp_prob(y)) / bf;
    }
    // d/dy of −log y is −1/y; of −log(1−y) is 1/(1−y). The clamp applies
    // inside the log and its derivative; the activation derivative comes
    // from the tape.
    let up_r = yr.map(|y| -1.0 / (br * clamp_prob(y)));
    let up_f = yf.map(|y| 1.0 / (bf * (1.0 - clamp_prob(y))));
    let (mut g, _) = bundle.disc[n].backward(&tape_r, &up_r)?;
    let (gf, _) = bundle.disc[n].backward(&tape_f, &up_f)?;
    g.add_assign(&gf)?;
    Ok((loss, g))
}

fn check_nonempty(real: &Mat, fake: &Mat) -> Result<()> {
    if real.rows() == 0 || fake.rows() == 0 {
        return Err(Error::Degenerate("empty batch in adversarial loss".into()));
    }
    Ok(())
}

/// λ · batch-mean of Σ_j φ_p(|code|_j). Empty input counts as zero.
pub fn sparsity_penalty(codes: &Mat, p: SparsityExponent, lambda: f64) -> f64 {
    if codes.rows() == 0 {
        return 0.0;
    }
    let sum: f64 = codes.data().iter().map(|&s| p.phi(s.abs())).sum();
    lambda * sum / codes.rows() as f64
}

/// d [`sparsity_penalty`] / d codes.
pub(crate) fn sparsity_grad(codes: &Mat, p: SparsityExponent, lambda: f64) -> Mat {
    let b = codes.rows().max(1) as f64;
    codes.map(|s| lambda * p.dphi(s) / b)
}

/// Non-saturating generator loss for one domain: mean −log d⁽ⁿ⁾(x̂) plus the
/// sparsity penalty on the style codes.
pub fn gen_loss(
    bundle: &GanBundle,
    noise: &NoiseDraw,
    n: usize,
    lambda: f64,
    p: SparsityExponent,
) -> Result<f64> {
    if lambda < 0.0 {
        return Err(Error::InvalidSpec("negative sparsity weight".into()));
    }
    if noise.batch() == 0 {
        return Err(Error::Degenerate("empty batch in adversarial loss".into()));
    }
    let fwd = generate_traced(bundle, noise, n)?;
    let y = bundle.disc[n].forward_only(&fwd.x)?;
    let adv: f64 = y
        .data()
        .iter()
        .map(|&v| -fmath::ln(clamp_prob(v)) / y.rows() as f64)
        .sum();
    Ok(adv + sparsity_penalty(fwd.style_codes(), p, lambda))
}

/// Per-domain pieces of one generator update: loss values plus gradients for
/// the shared networks and this domain's style encoder.
struct GenStep {
    adv: f64,
    sparsity: f64,
    q: MlpGrads,
    e_c: MlpGrads,
    e_s: MlpGrads,
}

fn gen_step(
    bundle: &GanBundle,
    noise: &NoiseDraw,
    n: usize,
    lambda: f64,
    p: SparsityExponent,
) -> Result<GenStep> {
    let fwd = generate_traced(bundle, noise, n)?;
    if !fwd.x.all_finite() {
        return Err(Error::NonFinite { context: "generator output", layer: n });
    }
    let (y, tape_d) = bundle.disc[n].forward(&fwd.x)?;
    let b = y.rows() as f64;
    let adv: f64 = y.data().iter().map(|&v| -fmath::ln(clamp_prob(v)) / b).sum();
    let up_y = y.map(|v| -1.0 / (b * clamp_prob(v)));
    // Discriminator parameters are frozen in this phase; only the gradient
    // reaching its input is kept.
    let (_, up_x) = bundle.disc[n].backward(&tape_d, &up_y)?;
    let s_codes = fwd.style_codes();
    let sparsity = sparsity_penalty(s_codes, p, lambda);
    let up_s = sparsity_grad(s_codes, p, lambda);
    let g = generate_backward_styled(bundle, n, &fwd, &up_x, &up_s)?;
    Ok(GenStep { adv, sparsity, q: g.q, e_c: g.e_c, e_s: g.e_s })
}

struct GanOptimizers {
    q: AdamState,
    e_c: AdamState,
    e_s: Vec<AdamState>,
    disc: Vec<AdamState>,
}

impl GanOptimizers {
    fn new(bundle: &GanBundle, cfg: &GanTrainConfig) -> Result<GanOptimizers> {
        let gen_h = AdamHyper { lr: cfg.lr_gen, beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps };
        let disc_h = AdamHyper { lr: cfg.lr_disc, ..gen_h };
        Ok(GanOptimizers {
            q: AdamState::for_mlp(&bundle.q, gen_h)?,
            e_c: AdamState::for_mlp(&bundle.e_c, gen_h)?,
            e_s: bundle
                .e_s
                .iter()
                .map(|m| AdamState::for_mlp(m, gen_h))
                .collect::<Result<_>>()?,
            disc: bundle
                .disc
                .iter()
                .map(|m| AdamState::for_mlp(m, disc_h))
                .collect::<Result<_>>()?,
        })
    }
}

/// Paired content/style noise streams.
struct NoiseStreams {
    c: Stream,
    s: Stream,
}

impl NoiseStreams {
    fn new(seed: u64, base: u64) -> NoiseStreams {
        NoiseStreams { c: rng::stream(seed, base), s: rng::stream(seed, base + 1) }
    }

    fn draw(&mut self, batch: usize, bundle: &GanBundle) -> NoiseDraw {
        NoiseDraw::sample(batch, bundle.dc_hat, bundle.ds_hat, &mut self.c, &mut self.s)
    }
}

/// Losses measured during one full alternating step.
struct StepLosses {
    disc: Vec<f64>,
    gen: Vec<f64>,
    sparsity: f64,
}

/// Alternating adversarial training. Per generator step:
/// `disc_steps_per_gen_step` discriminator updates on every domain (fresh
/// real and fake batches each), then one shared generator/encoder update on
/// the loss summed over domains.
///
/// The divergence guard aborts instead of erroring, so callers keep the
/// partial trace: it fires on any loss beyond [`DIVERGE_AT`] and on any
/// non-finite value inside the step (generator blow-ups included). Hard
/// errors are reserved for contract violations.
pub fn train_gan(
    bundle: GanBundle,
    data: &mut dyn DomainSampler,
    cfg: &GanTrainConfig,
) -> Result<GanTrainOutcome> {
    cfg.validate()?;
    bundle.validate()?;
    let n_dom = bundle.n_domains();
    if data.n_domains() != n_dom || data.dim() != bundle.ambient_dim() {
        return Err(Error::shape(
            "train_gan sampler",
            (n_dom, bundle.ambient_dim()),
            (data.n_domains(), data.dim()),
        ));
    }

    let mut bundle = bundle;
    let mut opt = GanOptimizers::new(&bundle, cfg)?;
    // Independent noise streams: discriminator-phase fakes, generator-phase
    // draws, and evaluation draws never perturb one another.
    let mut noise_disc = NoiseStreams::new(cfg.seed, 0);
    let mut noise_gen = NoiseStreams::new(cfg.seed, 2);
    let mut noise_eval = NoiseStreams::new(cfg.seed, 4);

    let mut trace = Vec::new();
    let mut diverged = None;

    for step in 1..=cfg.steps {
        let losses = match one_step(&mut bundle, &mut opt, data, cfg, &mut noise_disc, &mut noise_gen) {
            Ok(l) => l,
            Err(Error::NonFinite { context, layer }) => {
                diverged = Some(Divergence {
                    step,
                    term: alloc::format!("{context}[{layer}]"),
                    value: f64::NAN,
                });
                break;
            }
            Err(e) => return Err(e),
        };
        if let Some(d) = value_guard(step, &losses) {
            diverged = Some(d);
            break;
        }
        if step % cfg.eval_every == 0 {
            let mmd = eval_mmd(&bundle, data, cfg.batch, &mut noise_eval)?;
            trace.push(TraceRow {
                step,
                disc_loss: losses.disc,
                gen_loss: losses.gen,
                sparsity: losses.sparsity,
                mmd_to_data: mmd,
            });
        }
    }

    Ok(GanTrainOutcome { bundle, trace, diverged })
}

fn one_step(
    bundle: &mut GanBundle,
    opt: &mut GanOptimizers,
    data: &mut dyn DomainSampler,
    cfg: &GanTrainConfig,
    noise_disc: &mut NoiseStreams,
    noise_gen: &mut NoiseStreams,
) -> Result<StepLosses> {
    let n_dom = bundle.n_domains();
    let mut disc_losses = vec![0.0; n_dom];
    for _ in 0..cfg.disc_steps_per_gen_step {
        for n in 0..n_dom {
            let real = data.sample(n, cfg.batch)?;
            let noise = noise_disc.draw(cfg.batch, bundle);
            let fake = crate::models::generate(bundle, &noise, n)?;
            let (loss, grads) = disc_loss_traced(bundle, &real, &fake, n)?;
            disc_losses[n] = loss;
            opt.disc[n].step_mlp(&mut bundle.disc[n], &grads)?;
        }
    }

    let mut gq = MlpGrads::zeros_like(&bundle.q);
    let mut gec = MlpGrads::zeros_like(&bundle.e_c);
    let mut ges: Vec<MlpGrads> = Vec::with_capacity(n_dom);
    let mut gen_losses = vec![0.0; n_dom];
    let mut sparsity_total = 0.0;
    for n in 0..n_dom {
        let noise = noise_gen.draw(cfg.batch, bundle);
        let gs = gen_step(bundle, &noise, n, cfg.lambda, cfg.p)?;
        gen_losses[n] = gs.adv + gs.sparsity;
        sparsity_total += gs.sparsity;
        gq.add_assign(&gs.q)?;
        gec.add_assign(&gs.e_c)?;
        ges.push(gs.e_s);
    }
    opt.q.step_mlp(&mut bundle.q, &gq)?;
    opt.e_c.step_mlp(&mut bundle.e_c, &gec)?;
    for (n, g) in ges.iter().enumerate() {
        opt.e_s[n].step_mlp(&mut bundle.e_s[n], g)?;
    }
    Ok(StepLosses { disc: disc_losses, gen: gen_losses, sparsity: sparsity_total })
}

fn value_guard(step: usize, losses: &StepLosses) -> Option<Divergence> {
    let check = |term: &str, vals: &[f64]| -> Option<Divergence> {
        for (n, &v) in vals.iter().enumerate() {
            if !v.is_finite() || v.abs() > DIVERGE_AT {
                return Some(Divergence {
                    step,
                    term: alloc::format!("{term}[{n}]"),
                    value: v,
                });
            }
        }
        None
    };
    check("disc_loss", &losses.disc).or_else(|| check("gen_loss", &losses.gen))
}

/// Unbiased MMD² between fresh generated and data batches per domain, median
/// kernel width. Informational: lets callers judge convergence in the
/// absence of a stopping criterion.
fn eval_mmd(
    bundle: &GanBundle,
    data: &mut dyn DomainSampler,
    batch: usize,
    noise: &mut NoiseStreams,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(bundle.n_domains());
    for n in 0..bundle.n_domains() {
        let nd = noise.draw(batch, bundle);
        let fake = crate::models::generate(bundle, &nd, n)?;
        let real = data.sample(n, batch)?;
        if !fake.all_finite() {
            out.push(f64::NAN);
            continue;
        }
        out.push(mmd2_unbiased(&fake, &real, &KernelSpec::median())?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::{Activation, Layer, MlpParams};
    use crate::models::init_gan_bundle;
    use alloc::vec;

    /// Single-domain sampler: x ~ N(mean, 1) in 1-D.
    struct Gauss1d {
        mean: f64,
        rng: Stream,
    }

    impl DomainSampler for Gauss1d {
        fn n_domains(&self) -> usize {
            1
        }
        fn dim(&self) -> usize {
            1
        }
        fn sample(&mut self, _domain: usize, batch: usize) -> Result<Mat> {
            let mut m = rng::normal_mat(&mut self.rng, batch, 1);
            for v in m.data_mut() {
                *v += self.mean;
            }
            Ok(m)
        }
    }

    fn toy_config() -> GanTrainConfig {
        GanTrainConfig {
            steps: 5000,
            batch: 128,
            lambda: 0.0,
            eval_every: 500,
            seed: 11,
            ..GanTrainConfig::default()
        }
    }

    /// Discriminator that ignores its input: sigmoid(bias) everywhere.
    fn const_disc(d: usize, logit: f64) -> MlpParams {
        MlpParams::new(vec![Layer {
            w: Mat::zeros(d, 1),
            b: vec![logit],
            act: Activation::Sigmoid,
        }])
        .unwrap()
    }

    fn tiny_bundle(seed: u64) -> GanBundle {
        init_gan_bundle(1, 1, 1, 1, &[16, 16], seed).unwrap()
    }

    #[test]
    fn half_probability_gives_two_log_two() {
        let mut b = tiny_bundle(0);
        b.disc[0] = const_disc(1, 0.0);
        let real = rng::normal_mat(&mut rng::stream(1, 0), 64, 1);
        let fake = rng::normal_mat(&mut rng::stream(1, 1), 64, 1);
        let loss = disc_loss(&b, &real, &fake, 0).unwrap();
        assert!((loss - 2.0 * fmath::ln(2.0)).abs() < 1e-12, "{loss}");
    }

    /// Perfect classifier limit: d(real) = 1, d(fake) = 0 in f64, so the
    /// clamp supplies the whole loss, 2·(−log(1 − 1e-7)).
    #[test]
    fn saturated_perfect_classifier_hits_clamp() {
        let mut b = tiny_bundle(0);
        b.disc[0] = MlpParams::new(vec![Layer {
            w: Mat::from_vec(1, 1, vec![1e4]).unwrap(),
            b: vec![0.0],
            act: Activation::Sigmoid,
        }])
        .unwrap();
        let real = Mat::from_vec(2, 1, vec![50.0, 60.0]).unwrap();
        let fake = Mat::from_vec(2, 1, vec![-50.0, -60.0]).unwrap();
        let loss = disc_loss(&b, &real, &fake, 0).unwrap();
        let expect = 2.0 * -fmath::ln(1.0 - PROB_CLAMP);
        assert!((loss - expect).abs() < 1e-9, "{loss} vs {expect}");
    }

    /// Unbatched per-sample reference for the discriminator loss.
    #[test]
    fn disc_loss_matches_unbatched_oracle() {
        let b = init_gan_bundle(3, 2, 2, 2, &[8, 8], 5).unwrap();
        let real = rng::normal_mat(&mut rng::stream(3, 0), 9, 3);
        let fake = rng::normal_mat(&mut rng::stream(3, 1), 7, 3);
        let loss = disc_loss(&b, &real, &fake, 1).unwrap();

        let mut oracle = 0.0;
        for i in 0..real.rows() {
            let xi = Mat::from_vec(1, 3, real.row(i).to_vec()).unwrap();
            let y = b.disc[1].forward_only(&xi).unwrap().get(0, 0);
            oracle += -fmath::ln(clamp_prob(y)) / real.rows() as f64;
        }
        for i in 0..fake.rows() {
            let xi = Mat::from_vec(1, 3, fake.row(i).to_vec()).unwrap();
            let y = b.disc[1].forward_only(&xi).unwrap().get(0, 0);
            oracle += -fmath::ln(1.0 - clamp_prob(y)) / fake.rows() as f64;
        }
        assert!((loss - oracle).abs() < 1e-12, "{loss} vs {oracle}");
    }

    #[test]
    fn sparsity_penalty_examples() {
        assert_eq!(sparsity_penalty(&Mat::zeros(4, 3), SparsityExponent::L1, 0.3), 0.0);
        let one = Mat::from_vec(1, 1, vec![1.0]).unwrap();
        let v = sparsity_penalty(&one, SparsityExponent::LHalf, 1.0);
        assert!((v - fmath::sqrt(1.0 + 1e-8)).abs() < 1e-15);
        // codes [3, −4] per row, p = 1, λ = 0.3 → 0.3 · 7.
        let codes = Mat::from_rows(&[&[3.0, -4.0], &[3.0, -4.0]]).unwrap();
        let v = sparsity_penalty(&codes, SparsityExponent::L1, 0.3);
        assert!((v - 2.1).abs() < 1e-12, "{v}");

        // p = 1 equals λ · mean row ℓ1 norm on random input.
        let m = rng::normal_mat(&mut rng::stream(4, 0), 13, 5);
        let v = sparsity_penalty(&m, SparsityExponent::L1, 0.7);
        let mut oracle = 0.0;
        for i in 0..m.rows() {
            oracle += m.row(i).iter().map(|a| a.abs()).sum::<f64>();
        }
        oracle *= 0.7 / m.rows() as f64;
        assert!((v - oracle).abs() < 1e-12);
    }

    #[test]
    fn gen_loss_reduces_to_adversarial_at_zero_lambda() {
        let b = init_gan_bundle(3, 2, 2, 1, &[8], 6).unwrap();
        let mut sc = rng::stream(5, 0);
        let mut ss = rng::stream(5, 1);
        let noise = NoiseDraw::sample(32, 2, 2, &mut sc, &mut ss);
        let l0 = gen_loss(&b, &noise, 0, 0.0, SparsityExponent::L1).unwrap();
        let fwd = generate_traced(&b, &noise, 0).unwrap();
        let y = b.disc[0].forward_only(&fwd.x).unwrap();
        let adv: f64 = y.data().iter().map(|&v| -fmath::ln(clamp_prob(v)) / 32.0).sum();
        assert!((l0 - adv).abs() < 1e-15);
    }

    #[test]
    fn gen_loss_monotone_in_lambda() {
        let b = init_gan_bundle(4, 2, 3, 2, &[8, 8], 7).unwrap();
        let mut sc = rng::stream(6, 0);
        let mut ss = rng::stream(6, 1);
        let noise = NoiseDraw::sample(16, 2, 3, &mut sc, &mut ss);
        for p in [SparsityExponent::L1, SparsityExponent::LHalf] {
            let mut prev = f64::NEG_INFINITY;
            for lambda in [0.0, 0.05, 0.1, 0.3, 1.0, 10.0] {
                let l = gen_loss(&b, &noise, 1, lambda, p).unwrap();
                assert!(l >= prev, "λ={lambda}: {l} < {prev}");
                prev = l;
            }
        }
    }

    #[test]
    fn gen_gradient_matches_finite_differences() {
        // Smooth activations so finite differences are trustworthy.
        let mut b = init_gan_bundle(2, 1, 2, 1, &[4], 8).unwrap();
        for m in [&mut b.q, &mut b.e_c, &mut b.e_s[0], &mut b.disc[0]] {
            for l in m.layers_mut() {
                if l.act == Activation::LeakyRelu {
                    l.act = Activation::Tanh;
                }
            }
        }
        let mut sc = rng::stream(7, 0);
        let mut ss = rng::stream(7, 1);
        let noise = NoiseDraw::sample(3, 1, 2, &mut sc, &mut ss);
        let (lambda, p) = (0.3, SparsityExponent::LHalf);

        let gs = gen_step(&b, &noise, 0, lambda, p).unwrap();
        let blocks: [(&MlpParams, &MlpGrads); 3] =
            [(&b.q, &gs.q), (&b.e_c, &gs.e_c), (&b.e_s[0], &gs.e_s)];
        for (bi, (params, grads)) in blocks.into_iter().enumerate() {
            let fd = crate::gradcheck::finite_diff_jacobian(
                |pv| {
                    let mut bp = b.clone();
                    match bi {
                        0 => bp.q.set_from_flat(pv).unwrap(),
                        1 => bp.e_c.set_from_flat(pv).unwrap(),
                        _ => bp.e_s[0].set_from_flat(pv).unwrap(),
                    }
                    vec![gen_loss(&bp, &noise, 0, lambda, p).unwrap()]
                },
                &params.flatten(),
                1e-6,
            )
            .unwrap();
            for (k, (&a, &nfd)) in grads.flatten().iter().zip(fd.data()).enumerate() {
                assert!(
                    crate::gradcheck::rel_err(a, nfd, 1e-5) < 1e-3,
                    "block {bi} param {k}: {a} vs {nfd}"
                );
            }
        }
    }

    #[test]
    fn disc_gradient_matches_finite_differences() {
        let mut b = init_gan_bundle(2, 1, 1, 1, &[5], 9).unwrap();
        for l in b.disc[0].layers_mut() {
            if l.act == Activation::LeakyRelu {
                l.act = Activation::Softplus;
            }
        }
        let real = rng::normal_mat(&mut rng::stream(8, 0), 4, 2);
        let fake = rng::normal_mat(&mut rng::stream(8, 1), 4, 2);
        let (_, grads) = disc_loss_traced(&b, &real, &fake, 0).unwrap();
        let fd = crate::gradcheck::finite_diff_jacobian(
            |pv| {
                let mut bp = b.clone();
                bp.disc[0].set_from_flat(pv).unwrap();
                vec![disc_loss(&bp, &real, &fake, 0).unwrap()]
            },
            &b.disc[0].flatten(),
            1e-6,
        )
        .unwrap();
        for (k, (&a, &nfd)) in grads.flatten().iter().zip(fd.data()).enumerate() {
            assert!(
                crate::gradcheck::rel_err(a, nfd, 1e-6) < 1e-4,
                "param {k}: {a} vs {nfd}"
            );
        }
    }

    #[test]
    fn zero_steps_returns_initial_bundle() {
        let b = tiny_bundle(3);
        let mut data = Gauss1d { mean: 3.0, rng: rng::stream(100, 0) };
        let cfg = GanTrainConfig { steps: 0, ..toy_config() };
        let out = train_gan(b.clone(), &mut data, &cfg).unwrap();
        assert_eq!(out.bundle, b);
        assert!(out.trace.is_empty());
        assert!(out.diverged.is_none());
    }

    #[test]
    fn fixed_seed_runs_are_identical() {
        let cfg = GanTrainConfig { steps: 40, eval_every: 10, ..toy_config() };
        let run = || {
            let mut data = Gauss1d { mean: 3.0, rng: rng::stream(100, 0) };
            train_gan(tiny_bundle(3), &mut data, &cfg).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.bundle, b.bundle);
        assert_eq!(a.trace, b.trace);
    }

    /// Frozen generator emitting the data distribution itself: the trained
    /// discriminator approaches the symmetric optimum 2·log 2.
    #[test]
    fn symmetric_game_converges_to_two_log_two() {
        let mut b = tiny_bundle(4);
        // Rig generate to output r_C exactly: identity encoders, q picks
        // the content coordinate. Fakes are then N(0, 1).
        let ident = MlpParams::new(vec![Layer {
            w: Mat::identity(1),
            b: vec![0.0],
            act: Activation::Identity,
        }])
        .unwrap();
        b.e_c = ident.clone();
        b.e_s[0] = ident;
        b.q = MlpParams::new(vec![Layer {
            w: Mat::from_vec(2, 1, vec![1.0, 0.0]).unwrap(),
            b: vec![0.0],
            act: Activation::Identity,
        }])
        .unwrap();
        let mut data = Gauss1d { mean: 0.0, rng: rng::stream(200, 0) };
        let hyper = AdamHyper::with_betas(1e-3, 0.5, 0.999);
        let mut opt = AdamState::for_mlp(&b.disc[0], hyper).unwrap();
        let mut noise = NoiseStreams::new(17, 0);
        let mut last = f64::NAN;
        for _ in 0..2000 {
            let real = data.sample(0, 128).unwrap();
            let nd = noise.draw(128, &b);
            let fake = crate::models::generate(&b, &nd, 0).unwrap();
            let (loss, grads) = disc_loss_traced(&b, &real, &fake, 0).unwrap();
            opt.step_mlp(&mut b.disc[0], &grads).unwrap();
            last = loss;
        }
        let target = 2.0 * fmath::ln(2.0);
        assert!((last - target).abs() < 0.05, "final disc loss {last} vs {target}");
    }

    /// 1-D sanity run: a single-domain trainer matches N(3, 1) within
    /// MMD² < 0.05 at kernel width 1 on held-out data.
    #[test]
    fn one_dimensional_toy_fits_shifted_gaussian() {
        let cfg = toy_config();
        let mut data = Gauss1d { mean: 3.0, rng: rng::stream(300, 0) };
        let out = train_gan(tiny_bundle(12), &mut data, &cfg).unwrap();
        assert!(out.diverged.is_none(), "diverged: {:?}", out.diverged);
        assert_eq!(out.trace.len(), 10);
        for row in &out.trace {
            assert!(row.disc_loss.iter().all(|v| v.is_finite()));
            assert!(row.gen_loss.iter().all(|v| v.is_finite()));
            assert!(row.mmd_to_data.iter().all(|v| v.is_finite()));
        }

        let mut held_out = Gauss1d { mean: 3.0, rng: rng::stream(301, 0) };
        let real = held_out.sample(0, 1000).unwrap();
        let mut sc = rng::stream(302, 0);
        let mut ss = rng::stream(302, 1);
        let noise = NoiseDraw::sample(1000, 1, 1, &mut sc, &mut ss);
        let fake = crate::models::generate(&out.bundle, &noise, 0).unwrap();
        let mmd = mmd2_unbiased(&fake, &real, &KernelSpec::fixed(1.0)).unwrap();
        assert!(mmd < 0.05, "MMD² to data after training: {mmd}");
    }

    /// A huge sparsity weight pushes the generator loss past [`DIVERGE_AT`]
    /// immediately; the guard must report it rather than erroring.
    #[test]
    fn loss_magnitude_trips_divergence_guard() {
        let cfg = GanTrainConfig {
            steps: 100,
            lambda: 1e12,
            eval_every: 1,
            ..toy_config()
        };
        let mut data = Gauss1d { mean: 3.0, rng: rng::stream(400, 0) };
        let out = train_gan(tiny_bundle(5), &mut data, &cfg).unwrap();
        let d = out.diverged.expect("guard should have tripped");
        assert!(d.term.starts_with("gen_loss"), "{d:?}");
        assert!(d.value > DIVERGE_AT, "{d:?}");
        assert!(out.trace.iter().all(|r| r.step <= d.step));
    }

    /// A learning rate near the f64 overflow boundary produces non-finite
    /// activations within a step or two; the guard must catch the NaN
    /// instead of surfacing a hard error, keeping the partial trace.
    #[test]
    fn non_finite_values_trip_divergence_guard() {
        let cfg = GanTrainConfig {
            steps: 100,
            lr_gen: 1e160,
            lr_disc: 1e160,
            eval_every: 1,
            ..toy_config()
        };
        let mut data = Gauss1d { mean: 3.0, rng: rng::stream(401, 0) };
        let out = train_gan(tiny_bundle(5), &mut data, &cfg).unwrap();
        let d = out.diverged.expect("guard should have tripped");
        assert!(d.step <= 3, "{d:?}");
        assert!(d.value.is_nan(), "{d:?}");
    }
}
