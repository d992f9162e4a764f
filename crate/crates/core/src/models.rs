//! Parameter bundles for the two learner formulations.
//!
//! The adversarial path learns the generative direction: a shared generator
//! `q`, a shared content encoder `e_C`, one style encoder `e_S` per domain,
//! and one discriminator per domain. The direct path learns the encoding
//! direction: a shared encoder `f` whose output splits positionally into a
//! content head and a style head, a decoder `r`, and one latent critic per
//! unordered domain pair for matching content codes across domains.
//!
//! Both bundles are value types; training never mutates a bundle in place
//! through a shared reference. Latent codes are concatenated at the
//! generator input. A synthesis network with an early/late injection split
//! would feed content and style at different depths; a plain MLP has no
//! such depth distinction, so concatenation is the whole story here.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::mlp::{Activation, MlpGrads, MlpParams, Tape};
use crate::rng::{self, Stream};

/// Generator-side bundle: `x̂ = q(e_C(r_C) ‖ e_S⁽ⁿ⁾(r_S))`, judged by one
/// discriminator per domain.
#[derive(Debug, Clone, PartialEq)]
pub struct GanBundle {
    /// Mixer `(d̂_C + d̂_S) → d`.
    pub q: MlpParams,
    /// Content encoder `d̂_C → d̂_C`, shared across domains.
    pub e_c: MlpParams,
    /// Style encoders `d̂_S → d̂_S`, one per domain, no shared parameters.
    pub e_s: Vec<MlpParams>,
    /// Discriminators `d → 1` with sigmoid heads, one per domain.
    pub disc: Vec<MlpParams>,
    pub dc_hat: usize,
    pub ds_hat: usize,
}

/// Encoder-side bundle: `f` maps data to `d̂_C + d̂_S` coordinates, the first
/// `d̂_C` of which are the content head. `critics` holds one binary
/// classifier per unordered domain pair, operating on content codes.
#[derive(Debug, Clone, PartialEq)]
pub struct LdmBundle {
    /// Encoder `d → (d̂_C + d̂_S)`.
    pub f: MlpParams,
    /// Decoder `(d̂_C + d̂_S) → d`.
    pub decoder: MlpParams,
    /// Pairwise content critics `d̂_C → 1`, indexed by [`pair_index`].
    pub critics: Vec<MlpParams>,
    pub dc_hat: usize,
    pub ds_hat: usize,
    pub n_domains: usize,
}

/// One batch of generator input noise. The two blocks come from independent
/// streams so that content draws never perturb style draws.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    /// `batch × d̂_C`, standard normal.
    pub r_c: Mat,
    /// `batch × d̂_S`, standard normal.
    pub r_s: Mat,
}

impl NoiseDraw {
    pub fn sample(
        batch: usize,
        dc_hat: usize,
        ds_hat: usize,
        stream_c: &mut Stream,
        stream_s: &mut Stream,
    ) -> NoiseDraw {
        NoiseDraw {
            r_c: rng::normal_mat(stream_c, batch, dc_hat),
            r_s: rng::normal_mat(stream_s, batch, ds_hat),
        }
    }

    pub fn batch(&self) -> usize {
        self.r_c.rows()
    }

    fn check(&self, dc_hat: usize, ds_hat: usize) -> Result<()> {
        if self.r_c.cols() != dc_hat || self.r_s.cols() != ds_hat
            || self.r_c.rows() != self.r_s.rows()
        {
            return Err(Error::shape(
                "NoiseDraw",
                (self.r_c.rows(), dc_hat + ds_hat),
                (self.r_s.rows(), self.r_c.cols() + self.r_s.cols()),
            ));
        }
        Ok(())
    }
}

/// Training-data interface: per-domain batches of observations only.
/// Implementations own their randomness so that a trainer run is a pure
/// function of (sampler seed, trainer seed). Latent ground truth never
/// crosses this boundary.
pub trait DomainSampler {
    fn n_domains(&self) -> usize;
    /// Ambient dimension of returned batches.
    fn dim(&self) -> usize;
    fn sample(&mut self, domain: usize, batch: usize) -> Result<Mat>;
}

/// Number of unordered domain pairs.
pub fn pair_count(n_domains: usize) -> usize {
    n_domains * (n_domains.saturating_sub(1)) / 2
}

/// Index of the unordered pair `(i, j)`, `i < j`, in lexicographic order.
pub fn pair_index(i: usize, j: usize, n_domains: usize) -> Result<usize> {
    if i >= j || j >= n_domains {
        return Err(Error::InvalidSpec(alloc::format!(
            "domain pair ({i}, {j}) invalid for {n_domains} domains"
        )));
    }
    // Pairs with first element < i come first: i*(n-1) - i*(i-1)/2 of them.
    Ok(i * (2 * n_domains - i - 1) / 2 + (j - i - 1))
}

fn chain(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(input);
    dims.extend_from_slice(hidden);
    dims.push(output);
    dims
}

/// Deterministic in `seed`; all weights fan-in-scaled uniform, biases zero.
/// Sub-networks draw from one stream in a fixed order (q, e_C, e_S[0..N],
/// disc[0..N]), so the layout is part of the determinism contract.
pub fn init_gan_bundle(
    d: usize,
    dc_hat: usize,
    ds_hat: usize,
    n_domains: usize,
    arch: &[usize],
    seed: u64,
) -> Result<GanBundle> {
    if dc_hat == 0 || ds_hat == 0 {
        return Err(Error::InvalidSpec("dimension guesses must be at least 1".into()));
    }
    if d == 0 || n_domains == 0 {
        return Err(Error::InvalidSpec("need d >= 1 and at least one domain".into()));
    }
    let mut r = rng::stream(seed, 0);
    let q = MlpParams::init(
        &chain(dc_hat + ds_hat, arch, d),
        Activation::LeakyRelu,
        Activation::Identity,
        &mut r,
    )?;
    let e_c = MlpParams::init(
        &chain(dc_hat, arch, dc_hat),
        Activation::LeakyRelu,
        Activation::Identity,
        &mut r,
    )?;
    let mut e_s = Vec::with_capacity(n_domains);
    for _ in 0..n_domains {
        e_s.push(MlpParams::init(
            &chain(ds_hat, arch, ds_hat),
            Activation::LeakyRelu,
            Activation::Identity,
            &mut r,
        )?);
    }
    let mut disc = Vec::with_capacity(n_domains);
    for _ in 0..n_domains {
        disc.push(MlpParams::init(
            &chain(d, arch, 1),
            Activation::LeakyRelu,
            Activation::Sigmoid,
            &mut r,
        )?);
    }
    Ok(GanBundle { q, e_c, e_s, disc, dc_hat, ds_hat })
}

/// Deterministic in `seed`; draw order is (f, decoder, critics in
/// [`pair_index`] order).
pub fn init_ldm_bundle(
    d: usize,
    dc_hat: usize,
    ds_hat: usize,
    n_domains: usize,
    arch: &[usize],
    seed: u64,
) -> Result<LdmBundle> {
    if dc_hat == 0 || ds_hat == 0 {
        return Err(Error::InvalidSpec("dimension guesses must be at least 1".into()));
    }
    if d == 0 || n_domains == 0 {
        return Err(Error::InvalidSpec("need d >= 1 and at least one domain".into()));
    }
    let mut r = rng::stream(seed, 0);
    let f = MlpParams::init(
        &chain(d, arch, dc_hat + ds_hat),
        Activation::LeakyRelu,
        Activation::Identity,
        &mut r,
    )?;
    let decoder = MlpParams::init(
        &chain(dc_hat + ds_hat, arch, d),
        Activation::LeakyRelu,
        Activation::Identity,
        &mut r,
    )?;
    let mut critics = Vec::with_capacity(pair_count(n_domains));
    for _ in 0..pair_count(n_domains) {
        critics.push(MlpParams::init(
            &chain(dc_hat, arch, 1),
            Activation::LeakyRelu,
            Activation::Sigmoid,
            &mut r,
        )?);
    }
    Ok(LdmBundle { f, decoder, critics, dc_hat, ds_hat, n_domains })
}

impl GanBundle {
    pub fn n_domains(&self) -> usize {
        self.e_s.len()
    }

    pub fn ambient_dim(&self) -> usize {
        self.q.output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.q.param_count()
            + self.e_c.param_count()
            + self.e_s.iter().map(MlpParams::param_count).sum::<usize>()
            + self.disc.iter().map(MlpParams::param_count).sum::<usize>()
    }

    pub fn check_domain(&self, n: usize) -> Result<()> {
        if n >= self.n_domains() {
            return Err(Error::DomainOutOfRange { domain: n, n_domains: self.n_domains() });
        }
        Ok(())
    }

    /// Dimension chain consistency across all sub-networks.
    pub fn validate(&self) -> Result<()> {
        let d = self.ambient_dim();
        let ok = self.q.input_dim() == self.dc_hat + self.ds_hat
            && self.e_c.input_dim() == self.dc_hat
            && self.e_c.output_dim() == self.dc_hat
            && self.e_s.len() == self.disc.len()
            && !self.e_s.is_empty()
            && self.e_s.iter().all(|m| m.input_dim() == self.ds_hat && m.output_dim() == self.ds_hat)
            && self.disc.iter().all(|m| m.input_dim() == d && m.output_dim() == 1);
        if !ok {
            return Err(Error::InvalidSpec("inconsistent GAN bundle dimensions".into()));
        }
        Ok(())
    }

    /// Binary layout: magic `CSG1`, dimension header, then each sub-network
    /// through the MLP codec in init order. Round-trips bit-exactly.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"CSG1");
        for v in [self.dc_hat, self.ds_hat, self.n_domains()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        self.q.encode(&mut out);
        self.e_c.encode(&mut out);
        for m in &self.e_s {
            m.encode(&mut out);
        }
        for m in &self.disc {
            m.encode(&mut out);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<GanBundle> {
        let (dc_hat, ds_hat, n_domains, mut off) = decode_header(bytes, b"CSG1")?;
        let q = take_mlp(bytes, &mut off)?;
        let e_c = take_mlp(bytes, &mut off)?;
        let mut e_s = Vec::with_capacity(n_domains);
        for _ in 0..n_domains {
            e_s.push(take_mlp(bytes, &mut off)?);
        }
        let mut disc = Vec::with_capacity(n_domains);
        for _ in 0..n_domains {
            disc.push(take_mlp(bytes, &mut off)?);
        }
        check_consumed(bytes, off)?;
        let b = GanBundle { q, e_c, e_s, disc, dc_hat, ds_hat };
        b.validate()?;
        Ok(b)
    }
}

impl LdmBundle {
    pub fn ambient_dim(&self) -> usize {
        self.f.input_dim()
    }

    pub fn param_count(&self) -> usize {
        self.f.param_count()
            + self.decoder.param_count()
            + self.critics.iter().map(MlpParams::param_count).sum::<usize>()
    }

    pub fn check_domain(&self, n: usize) -> Result<()> {
        if n >= self.n_domains {
            return Err(Error::DomainOutOfRange { domain: n, n_domains: self.n_domains });
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.ambient_dim();
        let ok = self.f.output_dim() == self.dc_hat + self.ds_hat
            && self.decoder.input_dim() == self.dc_hat + self.ds_hat
            && self.decoder.output_dim() == d
            && self.n_domains >= 1
            && self.critics.len() == pair_count(self.n_domains)
            && self.critics.iter().all(|m| m.input_dim() == self.dc_hat && m.output_dim() == 1);
        if !ok {
            return Err(Error::InvalidSpec("inconsistent LDM bundle dimensions".into()));
        }
        Ok(())
    }

    /// Binary layout mirrors [`GanBundle::encode`] with magic `CSL1`.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"CSL1");
        for v in [self.dc_hat, self.ds_hat, self.n_domains] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        self.f.encode(&mut out);
        self.decoder.encode(&mut out);
        for m in &self.critics {
            m.encode(&mut out);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<LdmBundle> {
        let (dc_hat, ds_hat, n_domains, mut off) = decode_header(bytes, b"CSL1")?;
        let f = take_mlp(bytes, &mut off)?;
        let decoder = take_mlp(bytes, &mut off)?;
        let mut critics = Vec::with_capacity(pair_count(n_domains));
        for _ in 0..pair_count(n_domains) {
            critics.push(take_mlp(bytes, &mut off)?);
        }
        check_consumed(bytes, off)?;
        let b = LdmBundle { f, decoder, critics, dc_hat, ds_hat, n_domains };
        b.validate()?;
        Ok(b)
    }
}

fn decode_header(bytes: &[u8], magic: &[u8; 4]) -> Result<(usize, usize, usize, usize)> {
    if bytes.len() < 16 || &bytes[..4] != magic {
        return Err(Error::Decode("bad bundle magic".into()));
    }
    let mut vals = [0usize; 3];
    for (k, v) in vals.iter_mut().enumerate() {
        let s = 4 + 4 * k;
        *v = u32::from_le_bytes(bytes[s..s + 4].try_into().unwrap()) as usize;
    }
    Ok((vals[0], vals[1], vals[2], 16))
}

fn take_mlp(bytes: &[u8], off: &mut usize) -> Result<MlpParams> {
    let (m, used) = MlpParams::decode(&bytes[*off..])?;
    *off += used;
    Ok(m)
}

fn check_consumed(bytes: &[u8], off: usize) -> Result<()> {
    if off != bytes.len() {
        return Err(Error::Decode(alloc::format!(
            "trailing bytes: consumed {off} of {}",
            bytes.len()
        )));
    }
    Ok(())
}

/// `x̂ = q(e_C(r_C) ‖ e_S⁽ⁿ⁾(r_S))`. Pure in (bundle, noise, n).
pub fn generate(bundle: &GanBundle, noise: &NoiseDraw, n: usize) -> Result<Mat> {
    bundle.check_domain(n)?;
    noise.check(bundle.dc_hat, bundle.ds_hat)?;
    let c = bundle.e_c.forward_only(&noise.r_c)?;
    let s = bundle.e_s[n].forward_only(&noise.r_s)?;
    bundle.q.forward_only(&c.hcat(&s)?)
}

/// Forward pass of [`generate`] with tapes kept for the backward pass.
#[derive(Debug)]
pub struct GenForward {
    /// Generator output, `batch × d`.
    pub x: Mat,
    tape_ec: Tape,
    tape_es: Tape,
    tape_q: Tape,
    dc_hat: usize,
}

/// Gradients of a scalar loss through [`generate`], one block per
/// sub-network, plus the gradients reaching the noise inputs.
#[derive(Debug)]
pub struct GenGrads {
    pub q: MlpGrads,
    pub e_c: MlpGrads,
    pub e_s: MlpGrads,
    /// `d loss / d r_C`, `batch × d̂_C`.
    pub d_r_c: Mat,
    /// `d loss / d r_S`, `batch × d̂_S`.
    pub d_r_s: Mat,
}

impl GenForward {
    /// Content codes `e_C(r_C)`, `batch × d̂_C`.
    pub fn content_codes(&self) -> &Mat {
        self.tape_ec.output()
    }

    /// Style codes `e_S⁽ⁿ⁾(r_S)`, `batch × d̂_S`.
    pub fn style_codes(&self) -> &Mat {
        self.tape_es.output()
    }
}

pub fn generate_traced(bundle: &GanBundle, noise: &NoiseDraw, n: usize) -> Result<GenForward> {
    bundle.check_domain(n)?;
    noise.check(bundle.dc_hat, bundle.ds_hat)?;
    let (c, tape_ec) = bundle.e_c.forward(&noise.r_c)?;
    let (s, tape_es) = bundle.e_s[n].forward(&noise.r_s)?;
    let (x, tape_q) = bundle.q.forward(&c.hcat(&s)?)?;
    Ok(GenForward { x, tape_ec, tape_es, tape_q, dc_hat: bundle.dc_hat })
}

/// Backward pass matching a [`generate_traced`] call on the same bundle and
/// domain. `upstream` holds `d loss / d x̂` for the scalar loss in question.
pub fn generate_backward(
    bundle: &GanBundle,
    n: usize,
    fwd: &GenForward,
    upstream: &Mat,
) -> Result<GenGrads> {
    backward_impl(bundle, n, fwd, upstream, None)
}

/// As [`generate_backward`], for losses with an extra term on the style
/// codes: `style_upstream` holds `d loss / d e_S(r_S)` from that term and is
/// added to the gradient arriving through `q`.
pub fn generate_backward_styled(
    bundle: &GanBundle,
    n: usize,
    fwd: &GenForward,
    upstream: &Mat,
    style_upstream: &Mat,
) -> Result<GenGrads> {
    backward_impl(bundle, n, fwd, upstream, Some(style_upstream))
}

fn backward_impl(
    bundle: &GanBundle,
    n: usize,
    fwd: &GenForward,
    upstream: &Mat,
    style_upstream: Option<&Mat>,
) -> Result<GenGrads> {
    bundle.check_domain(n)?;
    let (gq, dz) = bundle.q.backward(&fwd.tape_q, upstream)?;
    let (dc, mut ds) = dz.split_cols(fwd.dc_hat)?;
    if let Some(extra) = style_upstream {
        ds.add_assign_scaled(extra, 1.0)?;
    }
    let (gec, d_r_c) = bundle.e_c.backward(&fwd.tape_ec, &dc)?;
    let (ges, d_r_s) = bundle.e_s[n].backward(&fwd.tape_es, &ds)?;
    Ok(GenGrads { q: gq, e_c: gec, e_s: ges, d_r_c, d_r_s })
}

/// Split the encoder output into (content head, style head). The
/// concatenation of the two heads is exactly the raw `f` output; the split
/// is positional, first `d̂_C` coordinates are content.
pub fn encode_ldm(bundle: &LdmBundle, x: &Mat) -> Result<(Mat, Mat)> {
    let z = bundle.f.forward_only(x)?;
    z.split_cols(bundle.dc_hat)
}

/// Hidden layer widths of a network (the dimension chain minus its
/// endpoints). Used by manifest writers.
pub fn hidden_sizes(m: &MlpParams) -> Vec<usize> {
    let layers = m.layers();
    layers[..layers.len() - 1].iter().map(|l| l.w.cols()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::mlp::Layer;
    use alloc::vec;

    fn identity_mlp(dim: usize) -> MlpParams {
        MlpParams::new(vec![Layer {
            w: Mat::identity(dim),
            b: vec![0.0; dim],
            act: Activation::Identity,
        }])
        .unwrap()
    }

    #[test]
    fn same_seed_bit_identical() {
        let a = init_gan_bundle(5, 3, 2, 3, &[8, 8], 42).unwrap();
        let b = init_gan_bundle(5, 3, 2, 3, &[8, 8], 42).unwrap();
        assert_eq!(a, b);
        let c = init_gan_bundle(5, 3, 2, 3, &[8, 8], 43).unwrap();
        assert_ne!(a, c);
        let l = init_ldm_bundle(5, 3, 2, 3, &[8, 8], 42).unwrap();
        let m = init_ldm_bundle(5, 3, 2, 3, &[8, 8], 42).unwrap();
        assert_eq!(l, m);
    }

    #[test]
    fn domain_count_matches() {
        let b = init_gan_bundle(4, 2, 2, 2, &[8], 0).unwrap();
        assert_eq!(b.e_s.len(), 2);
        assert_eq!(b.disc.len(), 2);
        b.validate().unwrap();
        let l = init_ldm_bundle(4, 2, 2, 4, &[8], 0).unwrap();
        assert_eq!(l.critics.len(), 6);
        l.validate().unwrap();
    }

    #[test]
    fn param_count_hand_oracle() {
        // d = 5, d̂_C = 3, d̂_S = 2, N = 3, hidden [16, 16].
        // q   5→16→16→5:  (5·16+16) + (16·16+16) + (16·5+5) = 453
        // e_C 3→16→16→3:  (3·16+16) + 272 + (16·3+3)        = 387
        // e_S 2→16→16→2:  (2·16+16) + 272 + (16·2+2)        = 354 each
        // d   5→16→16→1:  96 + 272 + (16·1+1)               = 385 each
        let b = init_gan_bundle(5, 3, 2, 3, &[16, 16], 7).unwrap();
        assert_eq!(b.q.param_count(), 453);
        assert_eq!(b.e_c.param_count(), 387);
        assert_eq!(b.e_s[0].param_count(), 354);
        assert_eq!(b.disc[0].param_count(), 385);
        assert_eq!(b.param_count(), 453 + 387 + 3 * 354 + 3 * 385);
    }

    #[test]
    fn identity_networks_concatenate_noise() {
        let b = GanBundle {
            q: identity_mlp(4),
            e_c: identity_mlp(2),
            e_s: vec![identity_mlp(2), identity_mlp(2)],
            disc: vec![
                MlpParams::init(&[4, 1], Activation::LeakyRelu, Activation::Sigmoid,
                    &mut rng::stream(0, 0)).unwrap();
                2
            ],
            dc_hat: 2,
            ds_hat: 2,
        };
        b.validate().unwrap();
        let noise = NoiseDraw {
            r_c: Mat::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap(),
            r_s: Mat::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]).unwrap(),
        };
        let x = generate(&b, &noise, 1).unwrap();
        let want = Mat::from_rows(&[&[1.0, 2.0, 5.0, 6.0], &[3.0, 4.0, 7.0, 8.0]]).unwrap();
        assert_eq!(x, want);
        // Fixed noise, two calls: identical output.
        assert_eq!(generate(&b, &noise, 1).unwrap(), x);
        assert!(matches!(
            generate(&b, &noise, 2),
            Err(Error::DomainOutOfRange { domain: 2, n_domains: 2 })
        ));
    }

    #[test]
    fn zero_weight_generator_is_constant() {
        let mut b = init_gan_bundle(3, 2, 2, 1, &[], 9).unwrap();
        let bias = [0.25, -1.5, 4.0];
        for l in b.q.layers_mut() {
            l.w.scale(0.0);
            l.b.copy_from_slice(&bias);
        }
        let mut sc = rng::stream(1, 0);
        let mut ss = rng::stream(1, 1);
        let noise = NoiseDraw::sample(5, 2, 2, &mut sc, &mut ss);
        let x = generate(&b, &noise, 0).unwrap();
        for i in 0..5 {
            assert_eq!(x.row(i), &bias);
        }
    }

    #[test]
    fn encode_ldm_matches_direct_forward() {
        let l = init_ldm_bundle(6, 3, 2, 2, &[10], 11).unwrap();
        let x = rng::normal_mat(&mut rng::stream(2, 0), 7, 6);
        let (c, s) = encode_ldm(&l, &x).unwrap();
        assert_eq!(c.shape(), (7, 3));
        assert_eq!(s.shape(), (7, 2));
        let direct = l.f.forward_only(&x).unwrap();
        assert_eq!(c.hcat(&s).unwrap(), direct);

        // Identity f with matching dims splits x itself.
        let lid = LdmBundle {
            f: identity_mlp(5),
            decoder: identity_mlp(5),
            critics: vec![MlpParams::init(&[3, 1], Activation::LeakyRelu,
                Activation::Sigmoid, &mut rng::stream(0, 0)).unwrap()],
            dc_hat: 3,
            ds_hat: 2,
            n_domains: 2,
        };
        let xi = rng::normal_mat(&mut rng::stream(3, 0), 4, 5);
        let (c, s) = encode_ldm(&lid, &xi).unwrap();
        assert_eq!(c.hcat(&s).unwrap(), xi);

        // Empty batch passes through as two empty matrices.
        let (c0, s0) = encode_ldm(&l, &Mat::zeros(0, 6)).unwrap();
        assert_eq!(c0.shape(), (0, 3));
        assert_eq!(s0.shape(), (0, 2));
    }

    #[test]
    fn bundle_codec_round_trips() {
        let b = init_gan_bundle(5, 3, 2, 2, &[8, 4], 21).unwrap();
        let bytes = b.encode();
        assert_eq!(GanBundle::decode(&bytes).unwrap(), b);
        assert!(GanBundle::decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(GanBundle::decode(b"CSL1rest").is_err());

        let l = init_ldm_bundle(5, 3, 2, 3, &[8], 22).unwrap();
        let bytes = l.encode();
        assert_eq!(LdmBundle::decode(&bytes).unwrap(), l);
    }

    #[test]
    fn pair_indexing_is_lexicographic() {
        assert_eq!(pair_count(1), 0);
        assert_eq!(pair_count(4), 6);
        let mut seen = vec![false; 6];
        for i in 0..4 {
            for j in (i + 1)..4 {
                let k = pair_index(i, j, 4).unwrap();
                assert!(!seen[k]);
                seen[k] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
        assert_eq!(pair_index(0, 1, 4).unwrap(), 0);
        assert_eq!(pair_index(2, 3, 4).unwrap(), 5);
        assert!(pair_index(1, 1, 4).is_err());
        assert!(pair_index(0, 4, 4).is_err());
    }

    /// Composite gradient through q ∘ (e_C, e_S) against finite differences,
    /// covering both parameter and noise-input gradients. Smooth activations
    /// only; kink handling for the rectifier is exercised in gradcheck.
    #[test]
    fn generate_gradients_match_finite_differences() {
        let mut b = init_gan_bundle(3, 2, 2, 2, &[4], 5).unwrap();
        for m in [&mut b.q, &mut b.e_c]
            .into_iter()
            .chain(b.e_s.iter_mut())
        {
            for l in m.layers_mut() {
                if l.act == Activation::LeakyRelu {
                    l.act = Activation::Tanh;
                }
            }
        }
        let mut sc = rng::stream(6, 0);
        let mut ss = rng::stream(6, 1);
        let noise = NoiseDraw::sample(3, 2, 2, &mut sc, &mut ss);
        let u = rng::normal_mat(&mut rng::stream(6, 2), 3, 3);

        let fwd = generate_traced(&b, &noise, 1).unwrap();
        let g = generate_backward(&b, 1, &fwd, &u).unwrap();

        let loss = |b: &GanBundle, noise: &NoiseDraw| -> f64 {
            let x = generate(b, noise, 1).unwrap();
            x.data().iter().zip(u.data()).map(|(a, w)| a * w).sum()
        };

        // Parameter blocks, one flat vector per sub-network.
        let blocks: [(&MlpParams, &MlpGrads); 3] =
            [(&b.q, &g.q), (&b.e_c, &g.e_c), (&b.e_s[1], &g.e_s)];
        for (bi, (params, grads)) in blocks.into_iter().enumerate() {
            let flat = params.flatten();
            let fd = gradcheck::finite_diff_jacobian(
                |p| {
                    let mut bp = b.clone();
                    let target = match bi {
                        0 => &mut bp.q,
                        1 => &mut bp.e_c,
                        _ => &mut bp.e_s[1],
                    };
                    target.set_from_flat(p).unwrap();
                    vec![loss(&bp, &noise)]
                },
                &flat,
                1e-5,
            )
            .unwrap();
            for (k, (&a, &n)) in grads.flatten().iter().zip(fd.data()).enumerate() {
                assert!(
                    gradcheck::rel_err(a, n, 1e-6) < 1e-4,
                    "block {bi} param {k}: analytic {a} vs fd {n}"
                );
            }
        }

        // Noise inputs.
        let flat_noise: Vec<f64> = noise
            .r_c
            .data()
            .iter()
            .chain(noise.r_s.data())
            .copied()
            .collect();
        let fd = gradcheck::finite_diff_jacobian(
            |p| {
                let nz = NoiseDraw {
                    r_c: Mat::from_vec(3, 2, p[..6].to_vec()).unwrap(),
                    r_s: Mat::from_vec(3, 2, p[6..].to_vec()).unwrap(),
                };
                vec![loss(&b, &nz)]
            },
            &flat_noise,
            1e-5,
        )
        .unwrap();
        let analytic: Vec<f64> = g
            .d_r_c
            .data()
            .iter()
            .chain(g.d_r_s.data())
            .copied()
            .collect();
        for (k, (&a, &n)) in analytic.iter().zip(fd.data()).enumerate() {
            assert!(
                gradcheck::rel_err(a, n, 1e-6) < 1e-4,
                "noise coord {k}: analytic {a} vs fd {n}"
            );
        }
    }
}
