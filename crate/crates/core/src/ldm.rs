//! Direct latent-distribution-matching trainer.
//!
//! One encoder `f` is fit so that content codes match across domains
//! (pairwise DM), content and style codes are independent within each
//! domain (HSIC penalty), the code is sufficient to reconstruct the input
//! (decoder regularizer enforcing injectivity), and style codes are sparse.
//! The default DM term is MMD², which keeps the outer loop a plain descent;
//! the adversarial-critic DM is kept behind a switch because its inner loop
//! sees both inputs move between iterations and exists here to measure that
//! cost.
//!
//! The independence penalty is the unbiased HSIC U-statistic hinged at
//! zero. The biased estimate sits O(1/batch) above zero at independence,
//! which is far above the dependence level the held-out permutation test
//! can detect; an optimizer fed the biased estimate ends up descending
//! that bias through the code marginals instead. Reports and calibration
//! still use the biased estimator, which is the nonnegative one.
//!
//! Component values in traces and in [`LdmComponents`] are the raw sums
//! over domains or pairs; the weights enter only in `total`.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::adam::{AdamHyper, AdamState};
use crate::error::{Error, Result};
use crate::fmath;
use crate::gan::{
    sparsity_grad, sparsity_penalty, Divergence, SparsityExponent, DIVERGE_AT, PROB_CLAMP,
};
use crate::kernel::{hsic_unbiased_with_grad, mmd2_unbiased_with_grad, KernelSpec};
use crate::mat::Mat;
use crate::mlp::{MlpGrads, MlpParams, Tape};
use crate::models::{pair_index, DomainSampler, LdmBundle};

/// Distribution-matching mechanism for the pairwise content terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DmKind {
    /// Unbiased MMD² between content code batches. Default.
    Mmd,
    /// One logistic critic per domain pair, trained in an inner loop; the
    /// encoder minimizes the label-flipped confusion loss. Values are
    /// cross-entropies, not distances: 2·log 2 at full confusion, not 0.
    Adversarial { critic_steps: usize, lr_critic: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdmTrainConfig {
    /// Encoder steps. Zero is a no-op run returning the initial bundle.
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_dm: f64,
    pub lambda_indep: f64,
    pub weight_recon: f64,
    pub lambda_sparse: f64,
    /// Exponent of the shared sparsity surrogate.
    pub p: SparsityExponent,
    pub dm: DmKind,
    /// Kernel on content codes (DM and the HSIC content side).
    pub kernel_c: KernelSpec,
    /// Kernel on style codes (HSIC style side).
    pub kernel_s: KernelSpec,
    /// Reserved for stochastic DM variants; the loop itself draws no
    /// randomness, so determinism rests on the sampler's seed.
    pub seed: u64,
    /// Trace cadence in encoder steps.
    pub eval_every: usize,
}

/// Defaults tuned on the stock two-domain world. The batch is larger than
/// the adversarial trainer's because the independence penalty's null noise
/// shrinks like 1/batch (degenerate U-statistic), and that noise floor is
/// what limits how much residual content-style dependence training can
/// remove. The weight ratio has no canonical value; these pass the held-out
/// matching and independence checks with margin.
impl Default for LdmTrainConfig {
    fn default() -> Self {
        LdmTrainConfig {
            steps: 5000,
            batch: 256,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_dm: 1.0,
            lambda_indep: 8.0,
            weight_recon: 1.0,
            lambda_sparse: 0.02,
            p: SparsityExponent::L1,
            dm: DmKind::Mmd,
            kernel_c: KernelSpec::median(),
            kernel_s: KernelSpec::median(),
            seed: 0,
            eval_every: 250,
        }
    }
}

impl LdmTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let weights_ok = [self.weight_dm, self.lambda_indep, self.weight_recon, self.lambda_sparse]
            .iter()
            .all(|w| *w >= 0.0 && w.is_finite());
        let dm_ok = match self.dm {
            DmKind::Mmd => true,
            DmKind::Adversarial { critic_steps, lr_critic } => {
                critic_steps >= 1 && lr_critic > 0.0 && lr_critic.is_finite()
            }
        };
        // The unbiased HSIC needs four rows; keeping the floor unconditional
        // keeps every trace column well defined.
        let ok = weights_ok
            && dm_ok
            && self.batch >= 4
            && self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.eval_every >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidSpec(alloc::format!("bad train config {self:?}")))
        }
    }

    fn hyper(&self) -> AdamHyper {
        AdamHyper { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

/// Raw objective components: sums over domain pairs (dm) or domains
/// (indep, recon, sparse), before weighting. The unbiased MMD² DM term may
/// be slightly negative at the null; everything else is nonnegative
/// (indep hinges its U-statistic at zero per domain).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LdmComponents {
    pub dm: f64,
    pub indep: f64,
    pub recon: f64,
    pub sparse: f64,
}

impl LdmComponents {
    pub fn total(&self, cfg: &LdmTrainConfig) -> f64 {
        cfg.weight_dm * self.dm
            + cfg.lambda_indep * self.indep
            + cfg.weight_recon * self.recon
            + cfg.lambda_sparse * self.sparse
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LdmTraceRow {
    /// Encoder steps completed when the row was taken (1-based).
    pub step: usize,
    pub dm: f64,
    pub indep: f64,
    pub recon: f64,
    pub sparse: f64,
    pub total: f64,
}

#[derive(Debug)]
pub struct LdmTrainOutcome {
    pub bundle: LdmBundle,
    pub trace: Vec<LdmTraceRow>,
    pub diverged: Option<Divergence>,
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.max(PROB_CLAMP).min(1.0 - PROB_CLAMP)
}

fn check_component(value: f64, context: &'static str, index: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { context, layer: index })
    }
}

/// Per-domain encoded state for one step.
struct Encoded {
    x: Mat,
    z: Mat,
    c: Mat,
    s: Mat,
    tape: Tape,
}

fn encode_all(bundle: &LdmBundle, batches: &[Mat]) -> Result<Vec<Encoded>> {
    if batches.len() != bundle.n_domains {
        return Err(Error::shape(
            "ldm batches",
            (bundle.n_domains, bundle.ambient_dim()),
            (batches.len(), batches.first().map_or(0, Mat::cols)),
        ));
    }
    let mut out = Vec::with_capacity(batches.len());
    for (n, x) in batches.iter().enumerate() {
        let (z, tape) = bundle.f.forward(x)?;
        if !z.all_finite() {
            return Err(Error::NonFinite { context: "encoder output", layer: n });
        }
        let (c, s) = z.split_cols(bundle.dc_hat)?;
        out.push(Encoded { x: x.clone(), z, c, s, tape });
    }
    Ok(out)
}

/// Eq.-style objective value with per-term breakdown. Pure: adversarial
/// critics are read, never trained here. Non-finite terms are hard errors
/// naming the term and the domain (or pair) index.
pub fn ldm_objective(
    bundle: &LdmBundle,
    batches: &[Mat],
    cfg: &LdmTrainConfig,
) -> Result<(f64, LdmComponents)> {
    cfg.validate()?;
    bundle.validate()?;
    let enc = encode_all(bundle, batches)?;
    let (comp, _, _) = objective_grads(bundle, &enc, cfg)?;
    Ok((comp.total(cfg), comp))
}

/// Mean over rows of the squared Euclidean residual ‖y_i − x_i‖².
fn mean_sq_residual(y: &Mat, x: &Mat) -> Result<f64> {
    let d = y.sub(x)?;
    Ok(d.data().iter().map(|v| v * v).sum::<f64>() / d.rows().max(1) as f64)
}

/// Label-flipped confusion loss the encoder minimizes under adversarial DM,
/// with gradients for both code batches. The critic's own convention is
/// d(c_i) → 1, d(c_j) → 0 for pair (i, j).
fn confusion_loss(critic: &MlpParams, ci: &Mat, cj: &Mat) -> Result<(f64, Mat, Mat)> {
    let (yi, tape_i) = critic.forward(ci)?;
    let (yj, tape_j) = critic.forward(cj)?;
    let bi = yi.rows() as f64;
    let bj = yj.rows() as f64;
    let mut loss = 0.0;
    for &y in yi.data() {
        loss -= fmath::ln(1.0 - clamp_prob(y)) / bi;
    }
    for &y in yj.data() {
        loss -= fmath::ln(clamp_prob(y)) / bj;
    }
    let up_i = yi.map(|y| 1.0 / (bi * (1.0 - clamp_prob(y))));
    let up_j = yj.map(|y| -1.0 / (bj * clamp_prob(y)));
    let (_, gi) = critic.backward(&tape_i, &up_i)?;
    let (_, gj) = critic.backward(&tape_j, &up_j)?;
    Ok((loss, gi, gj))
}

/// Logistic critic loss (d(c_i) → 1, d(c_j) → 0) with critic gradients.
fn critic_loss(critic: &MlpParams, ci: &Mat, cj: &Mat) -> Result<(f64, MlpGrads)> {
    let (yi, tape_i) = critic.forward(ci)?;
    let (yj, tape_j) = critic.forward(cj)?;
    let bi = yi.rows() as f64;
    let bj = yj.rows() as f64;
    let mut loss = 0.0;
    for &y in yi.data() {
        loss -= fmath::ln(clamp_prob(y)) / bi;
    }
    for &y in yj.data() {
        loss -= fmath::ln(1.0 - clamp_prob(y)) / bj;
    }
    let up_i = yi.map(|y| -1.0 / (bi * clamp_prob(y)));
    let up_j = yj.map(|y| 1.0 / (bj * (1.0 - clamp_prob(y))));
    let (mut g, _) = critic.backward(&tape_i, &up_i)?;
    let (gj, _) = critic.backward(&tape_j, &up_j)?;
    g.add_assign(&gj)?;
    Ok((loss, g))
}

/// Component values and raw parameter gradients of the weighted objective
/// at the encoded batches. Critics are read-only; their training lives in
/// [`ldm_step`].
fn objective_grads(
    bundle: &LdmBundle,
    enc: &[Encoded],
    cfg: &LdmTrainConfig,
) -> Result<(LdmComponents, MlpGrads, MlpGrads)> {
    let n_dom = enc.len();

    // Gradient accumulators on the code blocks, one per domain. The DM and
    // HSIC grads land here weighted; the recon path flows separately through
    // the decoder's input gradient.
    let mut dc: Vec<Mat> = enc.iter().map(|e| Mat::zeros(e.c.rows(), e.c.cols())).collect();
    let mut ds: Vec<Mat> = enc.iter().map(|e| Mat::zeros(e.s.rows(), e.s.cols())).collect();

    let mut dm = 0.0;
    for i in 0..n_dom {
        for j in (i + 1)..n_dom {
            let pair = pair_index(i, j, n_dom)?;
            let (v, gi, gj) = match cfg.dm {
                DmKind::Mmd => {
                    let sigma = cfg.kernel_c.resolve(&[&enc[i].c, &enc[j].c])?;
                    mmd2_unbiased_with_grad(&enc[i].c, &enc[j].c, sigma)?
                }
                DmKind::Adversarial { .. } => {
                    confusion_loss(&bundle.critics[pair], &enc[i].c, &enc[j].c)?
                }
            };
            dm += check_component(v, "dm term", pair)?;
            dc[i].add_assign_scaled(&gi, cfg.weight_dm)?;
            dc[j].add_assign_scaled(&gj, cfg.weight_dm)?;
        }
    }

    let mut indep = 0.0;
    let mut recon = 0.0;
    let mut sparse = 0.0;
    let mut g_f = MlpGrads::zeros_like(&bundle.f);
    let mut g_dec = MlpGrads::zeros_like(&bundle.decoder);
    for (n, e) in enc.iter().enumerate() {
        let sc = cfg.kernel_c.resolve(&[&e.c])?;
        let ss = cfg.kernel_s.resolve(&[&e.s])?;
        // Hinged unbiased HSIC: the U-statistic's minibatch gradient points
        // at true dependence with no O(1/batch) bias to descend, and the
        // hinge stops the optimizer from chasing its negative null
        // fluctuations (also keeping the reported component nonnegative).
        let (h, hc, hs) = hsic_unbiased_with_grad(&e.c, &e.s, sc, ss)?;
        let h = check_component(h, "independence term", n)?;
        if h > 0.0 {
            indep += h;
            dc[n].add_assign_scaled(&hc, cfg.lambda_indep)?;
            ds[n].add_assign_scaled(&hs, cfg.lambda_indep)?;
        }

        let (y, tape_r) = bundle.decoder.forward(&e.z)?;
        recon += check_component(mean_sq_residual(&y, &e.x)?, "reconstruction term", n)?;
        // d/dy of mean‖y − x‖² is 2(y − x)/B; fold the weight in here so the
        // decoder grads come out weighted.
        let mut dy = y.sub(&e.x)?;
        dy.scale(2.0 * cfg.weight_recon / y.rows().max(1) as f64);
        let (gd, dz_rec) = bundle.decoder.backward(&tape_r, &dy)?;
        g_dec.add_assign(&gd)?;

        sparse += check_component(sparsity_penalty(&e.s, cfg.p, 1.0), "sparsity term", n)?;
        ds[n].add_assign_scaled(&sparsity_grad(&e.s, cfg.p, 1.0), cfg.lambda_sparse)?;

        let mut dz = dc[n].hcat(&ds[n])?;
        dz.add_assign_scaled(&dz_rec, 1.0)?;
        let (gf, _) = bundle.f.backward(&e.tape, &dz)?;
        g_f.add_assign(&gf)?;
    }

    Ok((LdmComponents { dm, indep, recon, sparse }, g_f, g_dec))
}

/// One encoder/decoder update on fresh per-domain batches, returning the
/// component values observed. Critic inner steps run first under
/// adversarial DM, on codes from the not-yet-updated encoder.
fn ldm_step(
    bundle: &mut LdmBundle,
    opt: &mut LdmOptimizers,
    batches: &[Mat],
    cfg: &LdmTrainConfig,
) -> Result<LdmComponents> {
    let enc = encode_all(bundle, batches)?;
    let n_dom = enc.len();

    if let DmKind::Adversarial { critic_steps, .. } = cfg.dm {
        for i in 0..n_dom {
            for j in (i + 1)..n_dom {
                let pair = pair_index(i, j, n_dom)?;
                for _ in 0..critic_steps {
                    let (_, g) = critic_loss(&bundle.critics[pair], &enc[i].c, &enc[j].c)?;
                    opt.critics[pair].step_mlp(&mut bundle.critics[pair], &g)?;
                }
            }
        }
    }

    let (comp, g_f, g_dec) = objective_grads(bundle, &enc, cfg)?;
    opt.f.step_mlp(&mut bundle.f, &g_f)?;
    opt.decoder.step_mlp(&mut bundle.decoder, &g_dec)?;
    Ok(comp)
}

struct LdmOptimizers {
    f: AdamState,
    decoder: AdamState,
    critics: Vec<AdamState>,
}

impl LdmOptimizers {
    fn new(bundle: &LdmBundle, cfg: &LdmTrainConfig) -> Result<LdmOptimizers> {
        let critic_hyper = match cfg.dm {
            DmKind::Adversarial { lr_critic, .. } => AdamHyper { lr: lr_critic, ..cfg.hyper() },
            DmKind::Mmd => cfg.hyper(),
        };
        Ok(LdmOptimizers {
            f: AdamState::for_mlp(&bundle.f, cfg.hyper())?,
            decoder: AdamState::for_mlp(&bundle.decoder, cfg.hyper())?,
            critics: bundle
                .critics
                .iter()
                .map(|c| AdamState::for_mlp(c, critic_hyper))
                .collect::<Result<_>>()?,
        })
    }
}

/// Mirror of the adversarial trainer's loop for the direct objective: per
/// step, draw one batch per domain, run critic inner steps when configured,
/// then one Adam step on encoder and decoder. The divergence guard aborts
/// with the partial trace on any non-finite value or any total beyond
/// [`DIVERGE_AT`].
pub fn train_ldm(
    bundle: LdmBundle,
    data: &mut dyn DomainSampler,
    cfg: &LdmTrainConfig,
) -> Result<LdmTrainOutcome> {
    cfg.validate()?;
    bundle.validate()?;
    if data.n_domains() != bundle.n_domains || data.dim() != bundle.ambient_dim() {
        return Err(Error::shape(
            "train_ldm sampler",
            (bundle.n_domains, bundle.ambient_dim()),
            (data.n_domains(), data.dim()),
        ));
    }

    let mut bundle = bundle;
    let mut opt = LdmOptimizers::new(&bundle, cfg)?;
    let mut trace = Vec::new();
    let mut diverged = None;

    for step in 1..=cfg.steps {
        let mut batches = Vec::with_capacity(bundle.n_domains);
        for n in 0..bundle.n_domains {
            batches.push(data.sample(n, cfg.batch)?);
        }
        let comp = match ldm_step(&mut bundle, &mut opt, &batches, cfg) {
            Ok(c) => c,
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
        let total = comp.total(cfg);
        if !total.is_finite() || total.abs() > DIVERGE_AT {
            diverged = Some(Divergence { step, term: "total".into(), value: total });
            break;
        }
        if step % cfg.eval_every == 0 {
            trace.push(LdmTraceRow {
                step,
                dm: comp.dm,
                indep: comp.indep,
                recon: comp.recon,
                sparse: comp.sparse,
                total,
            });
        }
    }

    Ok(LdmTrainOutcome { bundle, trace, diverged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{hsic_biased, hsic_permutation_quantile, hsic_unbiased, mmd2_unbiased};
    use crate::models::init_ldm_bundle;
    use crate::rng;
    use crate::world::{build_world, tests::small_spec};
    use alloc::vec;

    fn test_cfg() -> LdmTrainConfig {
        LdmTrainConfig { batch: 64, ..LdmTrainConfig::default() }
    }

    fn batches_from_world(seed_idx: u64, batch: usize) -> (Vec<Mat>, usize) {
        let world = build_world(&small_spec(2)).unwrap();
        let mut s = world.sampler(seed_idx);
        let b = (0..2)
            .map(|n| DomainSampler::sample(&mut s, n, batch).unwrap())
            .collect();
        (b, world.spec().ambient_dim)
    }

    #[test]
    fn zero_weights_zero_total() {
        let (batches, d) = batches_from_world(0, 16);
        let bundle = init_ldm_bundle(d, 3, 3, 2, &[8], 1).unwrap();
        let cfg = LdmTrainConfig {
            weight_dm: 0.0,
            lambda_indep: 0.0,
            weight_recon: 0.0,
            lambda_sparse: 0.0,
            ..test_cfg()
        };
        let (total, comp) = ldm_objective(&bundle, &batches, &cfg).unwrap();
        assert_eq!(total, 0.0);
        // Components are still reported raw.
        assert!(comp.recon > 0.0);
    }

    #[test]
    fn single_domain_has_no_pairwise_term() {
        let x = rng::normal_mat(&mut rng::stream(40, 0), 32, 6);
        let bundle = init_ldm_bundle(6, 3, 3, 1, &[8], 2).unwrap();
        let (total, comp) = ldm_objective(&bundle, &[x], &test_cfg()).unwrap();
        assert_eq!(comp.dm, 0.0);
        assert!(total.is_finite());
    }

    /// Each component recomputed standalone through the public statistics.
    #[test]
    fn objective_matches_componentwise_oracle() {
        let (batches, d) = batches_from_world(1, 48);
        let bundle = init_ldm_bundle(d, 4, 4, 2, &[16], 3).unwrap();
        let cfg = LdmTrainConfig {
            weight_dm: 0.7,
            lambda_indep: 1.3,
            weight_recon: 0.9,
            lambda_sparse: 0.25,
            ..test_cfg()
        };
        let (total, comp) = ldm_objective(&bundle, &batches, &cfg).unwrap();

        let codes: Vec<(Mat, Mat, Mat)> = batches
            .iter()
            .map(|x| {
                let z = bundle.f.forward_only(x).unwrap();
                let (c, s) = z.split_cols(4).unwrap();
                (z, c, s)
            })
            .collect();
        let dm = mmd2_unbiased(&codes[0].1, &codes[1].1, &cfg.kernel_c).unwrap();
        let mut indep = 0.0;
        let mut recon = 0.0;
        let mut sparse = 0.0;
        for ((z, c, s), x) in codes.iter().zip(&batches) {
            indep += hsic_unbiased(c, s, &cfg.kernel_c, &cfg.kernel_s)
                .unwrap()
                .max(0.0);
            let y = bundle.decoder.forward_only(z).unwrap();
            let d = y.sub(x).unwrap();
            recon += d.data().iter().map(|v| v * v).sum::<f64>() / x.rows() as f64;
            sparse += sparsity_penalty(s, cfg.p, 1.0);
        }
        assert!((comp.dm - dm).abs() < 1e-12);
        assert!((comp.indep - indep).abs() < 1e-12);
        assert!((comp.recon - recon).abs() < 1e-12);
        assert!((comp.sparse - sparse).abs() < 1e-12);
        let want = 0.7 * dm + 1.3 * indep + 0.9 * recon + 0.25 * sparse;
        assert!((total - want).abs() < 1e-10, "{total} vs {want}");
    }

    #[test]
    fn non_finite_component_names_the_term() {
        let (mut batches, d) = batches_from_world(2, 16);
        let bundle = init_ldm_bundle(d, 3, 3, 2, &[8], 4).unwrap();
        // A value near the f64 ceiling keeps the encoder finite on this
        // shallow net but overflows the squared reconstruction residual.
        batches[1].set(0, 0, 1e200);
        let err = ldm_objective(&bundle, &batches, &test_cfg()).unwrap_err();
        match err {
            Error::NonFinite { context, layer } => {
                assert_eq!(context, "reconstruction term");
                assert_eq!(layer, 1);
            }
            e => panic!("unexpected error {e:?}"),
        }
    }

    /// Inputs on a curved 1-D manifold so every code coordinate is a
    /// function of the curve parameter, placing the test point deep inside
    /// the indep hinge's active region.
    fn curve_batches(rows: usize) -> Vec<Mat> {
        let mut r = rng::stream(41, 0);
        let mut batches = Vec::new();
        for _ in 0..2 {
            let v = rng::normal_mat(&mut r, 1, 6);
            let mut x = Mat::zeros(rows, 6);
            for i in 0..rows {
                let t = -2.0 + 4.0 * i as f64 / (rows - 1) as f64;
                for j in 0..6 {
                    let bend = if j % 2 == 0 { 1.0 } else { -0.5 };
                    x.set(i, j, v.get(0, j) * t + 0.3 * bend * t * t);
                }
            }
            batches.push(x);
        }
        batches
    }

    #[test]
    fn objective_gradients_match_finite_differences() {
        // Smooth activations and fixed kernel widths: the analytic path
        // treats σ as a constant, so the median heuristic would make finite
        // differences measure a different function.
        let batches = curve_batches(8);
        let d = 6;
        let mut bundle = init_ldm_bundle(d, 2, 2, 2, &[4], 5).unwrap();
        for m in [&mut bundle.f, &mut bundle.decoder] {
            for l in m.layers_mut() {
                if l.act == crate::mlp::Activation::LeakyRelu {
                    l.act = crate::mlp::Activation::Tanh;
                }
            }
        }
        let cfg = LdmTrainConfig {
            weight_dm: 0.8,
            lambda_indep: 1.1,
            weight_recon: 0.6,
            lambda_sparse: 0.2,
            kernel_c: KernelSpec::fixed(1.0),
            kernel_s: KernelSpec::fixed(1.3),
            batch: 8,
            ..LdmTrainConfig::default()
        };

        let frozen = bundle.clone();
        let enc = encode_all(&frozen, &batches).unwrap();
        // The indep hinge must be strictly active in every domain, or the
        // finite differences would step across its kink.
        for e in &enc {
            let u = hsic_unbiased(&e.c, &e.s, &cfg.kernel_c, &cfg.kernel_s).unwrap();
            assert!(u > 1e-4, "test point too close to the indep hinge: {u}");
        }
        let (_, g_f, g_dec) = objective_grads(&frozen, &enc, &cfg).unwrap();

        for (which, params, grads) in [
            ("f", &frozen.f, &g_f),
            ("decoder", &frozen.decoder, &g_dec),
        ] {
            let fd = crate::gradcheck::finite_diff_jacobian(
                |pv| {
                    let mut bp = frozen.clone();
                    match which {
                        "f" => bp.f.set_from_flat(pv).unwrap(),
                        _ => bp.decoder.set_from_flat(pv).unwrap(),
                    }
                    let (total, _) = ldm_objective(&bp, &batches, &cfg).unwrap();
                    vec![total]
                },
                &params.flatten(),
                1e-6,
            )
            .unwrap();
            for (k, (&a, &n)) in grads.flatten().iter().zip(fd.data()).enumerate() {
                assert!(
                    crate::gradcheck::rel_err(a, n, 1e-5) < 1e-3,
                    "{which} param {k}: analytic {a} vs fd {n}"
                );
            }
        }
    }

    #[test]
    fn zero_steps_returns_initial_bundle() {
        let world = build_world(&small_spec(2)).unwrap();
        let mut s = world.sampler(0);
        let bundle = init_ldm_bundle(6, 4, 4, 2, &[16], 6).unwrap();
        let cfg = LdmTrainConfig { steps: 0, ..test_cfg() };
        let out = train_ldm(bundle.clone(), &mut s, &cfg).unwrap();
        assert_eq!(out.bundle, bundle);
        assert!(out.trace.is_empty());
        assert!(out.diverged.is_none());
    }

    #[test]
    fn fixed_seed_runs_are_identical() {
        let world = build_world(&small_spec(2)).unwrap();
        let cfg = LdmTrainConfig { steps: 30, eval_every: 10, ..test_cfg() };
        let run = |dm: DmKind| {
            let mut s = world.sampler(5);
            let cfg = LdmTrainConfig { dm, ..cfg.clone() };
            let bundle = init_ldm_bundle(6, 4, 4, 2, &[16], 6).unwrap();
            train_ldm(bundle, &mut s, &cfg).unwrap()
        };
        for dm in [DmKind::Mmd, DmKind::Adversarial { critic_steps: 1, lr_critic: 1e-3 }] {
            let a = run(dm);
            let b = run(dm);
            assert_eq!(a.bundle, b.bundle);
            assert_eq!(a.trace, b.trace);
            assert!(a.diverged.is_none());
        }
    }

    #[test]
    fn non_finite_values_trip_divergence_guard() {
        let world = build_world(&small_spec(2)).unwrap();
        let mut s = world.sampler(7);
        let bundle = init_ldm_bundle(6, 4, 4, 2, &[16], 8).unwrap();
        let cfg = LdmTrainConfig { steps: 50, lr: 1e160, eval_every: 1, ..test_cfg() };
        let out = train_ldm(bundle, &mut s, &cfg).unwrap();
        let d = out.diverged.expect("guard should have tripped");
        assert!(d.step <= 3, "{d:?}");
    }

    /// Short two-domain run: content codes match across domains and decouple
    /// from style codes on held-out data.
    #[test]
    fn two_domain_run_matches_content_and_decouples_style() {
        let world = build_world(&small_spec(2)).unwrap();
        let mut s = world.sampler(9);
        let bundle = init_ldm_bundle(6, 2, 2, 2, &[32, 32], 10).unwrap();
        let cfg = LdmTrainConfig { eval_every: 1250, ..LdmTrainConfig::default() };
        let out = train_ldm(bundle, &mut s, &cfg).unwrap();
        assert!(out.diverged.is_none(), "diverged: {:?}", out.diverged);
        assert_eq!(out.trace.len(), 4);
        let last = out.trace.last().unwrap();
        assert!(last.recon < 0.05, "reconstruction stalled: {last:?}");

        let mut held = world.sampler(10);
        let xs: Vec<Mat> = (0..2)
            .map(|n| DomainSampler::sample(&mut held, n, 400).unwrap())
            .collect();
        let codes: Vec<(Mat, Mat)> = xs
            .iter()
            .map(|x| crate::models::encode_ldm(&out.bundle, x).unwrap())
            .collect();

        let dm = mmd2_unbiased(&codes[0].0, &codes[1].0, &KernelSpec::median()).unwrap();
        assert!(dm < 0.05, "held-out content MMD² {dm}");

        for (n, (c, s)) in codes.iter().enumerate() {
            let h = hsic_biased(c, s, &KernelSpec::median(), &KernelSpec::median()).unwrap();
            let q = hsic_permutation_quantile(
                c,
                s,
                &KernelSpec::median(),
                &KernelSpec::median(),
                200,
                0.95,
                &mut rng::stream(500 + n as u64, 0),
            )
            .unwrap();
            assert!(h < q, "domain {n}: held-out HSIC {h} above quantile {q}");
        }
    }
}
