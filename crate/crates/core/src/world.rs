//! Synthetic ground-truth worlds.
//!
//! A world draws a shared content variable and a per-domain style variable,
//! concatenates them, and pushes the result through a smooth invertible
//! mixing map into ambient space. Because every mixing layer has a closed-form
//! inverse, the world can hand back the exact latents behind any observation
//! it generated; that oracle is what all identifiability metrics are.
//!
//! Trainers never see latents: they receive observations plus a domain index
//! only. Latents travel inside [`LabeledBatch`] and are consumed by
//! evaluation code.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::fmath;
use crate::mat::{self, Mat};
use crate::rng::{self, Stream};
use crate::{Error, Result};

/// Round-trip tolerance the construction certificate enforces.
pub const CERT_TOL: f64 = 1e-9;
/// Projection residual above which a point is declared off-manifold.
pub const MANIFOLD_TOL: f64 = 1e-6;

// ── specs ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Cov {
    /// Diagonal covariance, entries ≥ 0 (a 1e-12 floor is applied when
    /// sampling, so literal zeros express point masses).
    Diag(Vec<f64>),
    /// Full symmetric positive semi-definite covariance, row-major.
    Full(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub mean: Vec<f64>,
    pub cov: Cov,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub components: Vec<GaussianComponent>,
}

impl MixtureSpec {
    pub fn single(mean: Vec<f64>, cov_diag: Vec<f64>) -> MixtureSpec {
        MixtureSpec {
            components: vec![GaussianComponent {
                mean,
                cov: Cov::Diag(cov_diag),
                weight: 1.0,
            }],
        }
    }

    fn validate(&self, dim: usize, what: &str) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::InvalidSpec(format!("{what}: empty mixture")));
        }
        let mut wsum = 0.0;
        for (i, c) in self.components.iter().enumerate() {
            if c.mean.len() != dim {
                return Err(Error::InvalidSpec(format!(
                    "{what}: component {i} mean has {} coords, want {dim}",
                    c.mean.len()
                )));
            }
            if c.weight < 0.0 || !c.weight.is_finite() {
                return Err(Error::InvalidSpec(format!(
                    "{what}: component {i} weight {} invalid",
                    c.weight
                )));
            }
            if c.mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidSpec(format!(
                    "{what}: component {i} mean not finite"
                )));
            }
            match &c.cov {
                Cov::Diag(d) => {
                    if d.len() != dim {
                        return Err(Error::InvalidSpec(format!(
                            "{what}: component {i} diag cov has {} entries, want {dim}",
                            d.len()
                        )));
                    }
                    if d.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                        return Err(Error::InvalidSpec(format!(
                            "{what}: component {i} diag cov has negative or non-finite entries"
                        )));
                    }
                }
                Cov::Full(rows) => {
                    if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                        return Err(Error::InvalidSpec(format!(
                            "{what}: component {i} full cov is not {dim}x{dim}"
                        )));
                    }
                    for a in 0..dim {
                        for b in 0..dim {
                            let (x, y) = (rows[a][b], rows[b][a]);
                            if !x.is_finite() || (x - y).abs() > 1e-9 {
                                return Err(Error::InvalidSpec(format!(
                                    "{what}: component {i} full cov not symmetric/finite"
                                )));
                            }
                        }
                    }
                }
            }
            wsum += c.weight;
        }
        if (wsum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSpec(format!(
                "{what}: mixture weights sum to {wsum}, want 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Nonlinearity {
    /// max(x, 0.2·x); inverse is exact.
    LeakyRelu,
    /// x + 0.5·tanh(x); strictly increasing with slope in [1, 1.5],
    /// inverted by a safeguarded Newton iteration to ~1e-15.
    TanhBlend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub d_c: usize,
    pub d_s: usize,
    pub n_domains: usize,
    pub ambient_dim: usize,
    pub content: MixtureSpec,
    pub styles: Vec<MixtureSpec>,
    pub mixing_depth: usize,
    pub nonlinearity: Nonlinearity,
    pub seed: u64,
}

impl WorldSpec {
    pub fn latent_dim(&self) -> usize {
        self.d_c + self.d_s
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_c == 0 || self.d_s == 0 {
            return Err(Error::InvalidSpec("d_c and d_s must be ≥ 1".into()));
        }
        if self.n_domains < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least 2 domains, got {}",
                self.n_domains
            )));
        }
        if self.ambient_dim < self.latent_dim() {
            return Err(Error::InvalidSpec(format!(
                "ambient_dim {} below latent dimension {}",
                self.ambient_dim,
                self.latent_dim()
            )));
        }
        if self.styles.len() != self.n_domains {
            return Err(Error::InvalidSpec(format!(
                "{} style distributions for {} domains",
                self.styles.len(),
                self.n_domains
            )));
        }
        self.content.validate(self.d_c, "content")?;
        for (n, s) in self.styles.iter().enumerate() {
            s.validate(self.d_s, &format!("style[{n}]"))?;
        }
        Ok(())
    }

    /// Soft issues worth surfacing but not refusing: currently only
    /// coinciding style distributions, which void the domain-variability
    /// assumption (the probe exists to demonstrate exactly that).
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.styles.len() {
            for j in i + 1..self.styles.len() {
                if self.styles[i] == self.styles[j] {
                    out.push(format!(
                        "style distributions {i} and {j} are identical: domain variability does not hold between them"
                    ));
                }
            }
        }
        out
    }
}

// ── mixing map ─────────────────────────────────────────────────────────

impl Nonlinearity {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::LeakyRelu => {
                if x >= 0.0 {
                    x
                } else {
                    0.2 * x
                }
            }
            Nonlinearity::TanhBlend => x + 0.5 * fmath::tanh(x),
        }
    }

    #[inline]
    fn invert(self, y: f64) -> f64 {
        match self {
            Nonlinearity::LeakyRelu => {
                if y >= 0.0 {
                    y
                } else {
                    y / 0.2
                }
            }
            Nonlinearity::TanhBlend => {
                // Monotone with slope ≥ 1, so Newton from y converges fast;
                // 50 iterations is a safety net, typical count is ≤ 6.
                let mut x = y;
                for _ in 0..50 {
                    let t = fmath::tanh(x);
                    let f = x + 0.5 * t - y;
                    if f.abs() <= 1e-15 * y.abs().max(1.0) {
                        break;
                    }
                    x -= f / (1.0 + 0.5 * (1.0 - t * t));
                }
                x
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixLayer {
    /// Orthogonal k×k matrix, applied on the right of row vectors.
    pub q: Mat,
    pub shift: Vec<f64>,
    pub nonlin: Nonlinearity,
}

/// Invertible latent-to-ambient map: depth layers of
/// (rotate, shift, elementwise nonlinearity), then an isometric embedding
/// into ambient space.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMap {
    layers: Vec<MixLayer>,
    /// k×d with orthonormal rows; x = z · embed_t.
    embed_t: Mat,
}

impl MixingMap {
    pub fn latent_dim(&self) -> usize {
        self.embed_t.rows()
    }

    pub fn ambient_dim(&self) -> usize {
        self.embed_t.cols()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn mix(&self, z: &Mat) -> Result<Mat> {
        if z.cols() != self.latent_dim() {
            return Err(Error::shape(
                "MixingMap::mix",
                (z.rows(), self.latent_dim()),
                z.shape(),
            ));
        }
        let mut cur = z.clone();
        for l in &self.layers {
            cur = l.forward(&cur)?;
        }
        cur.matmul(&self.embed_t)
    }

    /// Exact inverse for on-manifold points. The projection residual
    /// ‖x − proj(x)‖₂ per row is compared against `MANIFOLD_TOL`.
    pub fn unmix(&self, x: &Mat) -> Result<Mat> {
        let z = self.project(x)?;
        // Check the worst row's reconstruction residual.
        let back = z.matmul(&self.embed_t)?;
        for i in 0..x.rows() {
            let r = fmath::sqrt(mat::sq_dist(x.row(i), back.row(i)));
            if r > MANIFOLD_TOL {
                return Err(Error::OffManifold {
                    residual: r,
                    tol: MANIFOLD_TOL,
                });
            }
        }
        self.unmix_projected(z)
    }

    /// Inverse that first projects onto the embedding subspace and never
    /// rejects: intended for near-manifold points such as generator output,
    /// where the caller accepts projection error.
    pub fn unmix_lenient(&self, x: &Mat) -> Result<Mat> {
        let z = self.project(x)?;
        self.unmix_projected(z)
    }

    fn project(&self, x: &Mat) -> Result<Mat> {
        if x.cols() != self.ambient_dim() {
            return Err(Error::shape(
                "MixingMap::unmix",
                (x.rows(), self.ambient_dim()),
                x.shape(),
            ));
        }
        x.matmul_a_bt(&self.embed_t)
    }

    fn unmix_projected(&self, mut z: Mat) -> Result<Mat> {
        for l in self.layers.iter().rev() {
            z = l.backward(&z)?;
        }
        Ok(z)
    }
}

impl MixLayer {
    fn forward(&self, z: &Mat) -> Result<Mat> {
        let mut a = z.matmul(&self.q)?;
        let cols = a.cols();
        for r in 0..a.rows() {
            let row = a.row_mut(r);
            for j in 0..cols {
                row[j] = self.nonlin.apply(row[j] + self.shift[j]);
            }
        }
        Ok(a)
    }

    fn backward(&self, y: &Mat) -> Result<Mat> {
        let mut a = y.clone();
        let cols = a.cols();
        for r in 0..a.rows() {
            let row = a.row_mut(r);
            for j in 0..cols {
                row[j] = self.nonlin.invert(row[j]) - self.shift[j];
            }
        }
        a.matmul_a_bt(&self.q)
    }
}

// ── world ──────────────────────────────────────────────────────────────

/// A sampled batch with its hidden latents attached. Trainers must only ever
/// receive `x` and `domain`; the latents exist for evaluation.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub x: Mat,
    pub c: Mat,
    pub s: Mat,
    pub domain: usize,
}

#[derive(Debug, Clone)]
struct PreparedComponent {
    mean: Vec<f64>,
    /// Lower Cholesky factor of cov + 1e-12·I.
    chol: Mat,
    cum_weight: f64,
}

#[derive(Debug, Clone)]
struct PreparedMixture {
    comps: Vec<PreparedComponent>,
}

impl PreparedMixture {
    fn build(spec: &MixtureSpec, dim: usize) -> Result<PreparedMixture> {
        let mut comps = Vec::with_capacity(spec.components.len());
        let mut cum = 0.0;
        for c in &spec.components {
            let full = match &c.cov {
                Cov::Diag(d) => Mat::from_fn(dim, dim, |i, j| {
                    if i == j {
                        d[i] + 1e-12
                    } else {
                        0.0
                    }
                }),
                Cov::Full(rows) => Mat::from_fn(dim, dim, |i, j| {
                    rows[i][j] + if i == j { 1e-12 } else { 0.0 }
                }),
            };
            let chol = mat::cholesky(&full)?;
            cum += c.weight;
            comps.push(PreparedComponent {
                mean: c.mean.clone(),
                chol,
                cum_weight: cum,
            });
        }
        Ok(PreparedMixture { comps })
    }

    fn sample(&self, batch: usize, dim: usize, rng: &mut Stream) -> Mat {
        use rand::Rng;
        let mut out = Mat::zeros(batch, dim);
        let mut z = vec![0.0; dim];
        for r in 0..batch {
            let u: f64 = rng.gen();
            let comp = self
                .comps
                .iter()
                .find(|c| u < c.cum_weight)
                .unwrap_or_else(|| self.comps.last().unwrap());
            rng::fill_standard_normal(rng, &mut z);
            let row = out.row_mut(r);
            for i in 0..dim {
                let mut v = comp.mean[i];
                for k in 0..=i {
                    v += comp.chol.get(i, k) * z[k];
                }
                row[i] = v;
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct World {
    spec: WorldSpec,
    mixing: MixingMap,
    content: PreparedMixture,
    styles: Vec<PreparedMixture>,
}

/// Streams of the world's own seed.
const STREAM_BUILD: u64 = 0;
const STREAM_CERT: u64 = 1;

/// Construct a world and verify the mixing certificate before returning.
///
/// `mixing_depth = 0` yields the identity world: no layers and the canonical
/// embedding that zero-pads latents into ambient space. Depth ≥ 1 draws
/// random orthogonal layers and a random isometric embedding from the seed.
pub fn build_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let k = spec.latent_dim();
    let mut rng = rng::stream(spec.seed, STREAM_BUILD);

    let mixing = if spec.mixing_depth == 0 {
        MixingMap {
            layers: Vec::new(),
            embed_t: Mat::from_fn(k, spec.ambient_dim, |i, j| if i == j { 1.0 } else { 0.0 }),
        }
    } else {
        let mut layers = Vec::with_capacity(spec.mixing_depth);
        for _ in 0..spec.mixing_depth {
            let q = random_orthogonal(k, &mut rng)?;
            let shift: Vec<f64> = (0..k).map(|_| 0.5 * rng::normal(&mut rng)).collect();
            layers.push(MixLayer {
                q,
                shift,
                nonlin: spec.nonlinearity,
            });
        }
        let embed_t = random_orthonormal_rows(k, spec.ambient_dim, &mut rng)?;
        MixingMap { layers, embed_t }
    };

    let content = PreparedMixture::build(&spec.content, spec.d_c)?;
    let styles = spec
        .styles
        .iter()
        .map(|s| PreparedMixture::build(s, spec.d_s))
        .collect::<Result<Vec<_>>>()?;

    let world = World {
        spec: spec.clone(),
        mixing,
        content,
        styles,
    };
    world.certify(1000)?;
    Ok(world)
}

impl World {
    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    pub fn mixing(&self) -> &MixingMap {
        &self.mixing
    }

    /// Independent sampling stream `idx` keyed by the world seed. Streams 0
    /// and 1 are reserved for construction and certification.
    pub fn stream(&self, idx: u64) -> Stream {
        rng::stream(self.spec.seed, 2 + idx)
    }

    /// Draw a labeled batch: content and style are sampled independently
    /// (block independence), and nothing is shared across calls, so batches
    /// from different calls are unaligned by construction.
    pub fn sample_domain(&self, n: usize, batch: usize, rng: &mut Stream) -> Result<LabeledBatch> {
        if n >= self.spec.n_domains {
            return Err(Error::DomainOutOfRange {
                domain: n,
                n_domains: self.spec.n_domains,
            });
        }
        let c = self.content.sample(batch, self.spec.d_c, rng);
        let s = self.styles[n].sample(batch, self.spec.d_s, rng);
        let z = c.hcat(&s)?;
        let x = self.mixing.mix(&z)?;
        Ok(LabeledBatch { x, c, s, domain: n })
    }

    /// Exact latents behind on-manifold observations.
    pub fn invert_mixing(&self, x: &Mat) -> Result<(Mat, Mat)> {
        let z = self.mixing.unmix(x)?;
        z.split_cols(self.spec.d_c)
    }

    /// Training-data view of this world: observations only, latents
    /// stripped. `stream_idx` picks the sampling stream (see
    /// [`World::stream`]).
    pub fn sampler(&self, stream_idx: u64) -> WorldSampler<'_> {
        WorldSampler { world: self, rng: self.stream(stream_idx) }
    }

    /// Latents of the projection onto the data manifold's embedding
    /// subspace; accepts near-manifold points (e.g. generator output).
    pub fn project_latents(&self, x: &Mat) -> Result<(Mat, Mat)> {
        let z = self.mixing.unmix_lenient(x)?;
        z.split_cols(self.spec.d_c)
    }

    /// Round-trip certificate over `n` fresh latent draws spread across
    /// domains. On failure, replays layer by layer to name the culprit.
    fn certify(&self, n: usize) -> Result<()> {
        let mut rng = rng::stream(self.spec.seed, STREAM_CERT);
        let per = n.div_ceil(self.spec.n_domains);
        for dom in 0..self.spec.n_domains {
            let c = self.content.sample(per, self.spec.d_c, &mut rng);
            let s = self.styles[dom].sample(per, self.spec.d_s, &mut rng);
            let z = c.hcat(&s)?;
            let x = self.mixing.mix(&z)?;
            let back = self.mixing.unmix(&x).map_err(|e| match e {
                Error::OffManifold { residual, .. } => Error::Certificate {
                    layer: self.mixing.layers.len(),
                    max_err: residual,
                },
                other => other,
            })?;
            let diff = back.sub(&z)?;
            if diff.max_abs() >= CERT_TOL {
                return Err(self.blame_layer(&z));
            }
        }
        Ok(())
    }

    /// Identify the first layer whose local round trip is broken.
    fn blame_layer(&self, z: &Mat) -> Error {
        let mut cur = z.clone();
        for (i, l) in self.mixing.layers.iter().enumerate() {
            let fwd = match l.forward(&cur) {
                Ok(m) => m,
                Err(e) => return e,
            };
            let back = match l.backward(&fwd) {
                Ok(m) => m,
                Err(e) => return e,
            };
            let err = match back.sub(&cur) {
                Ok(d) => d.max_abs(),
                Err(e) => return e,
            };
            if err >= CERT_TOL {
                return Error::Certificate {
                    layer: i,
                    max_err: err,
                };
            }
            cur = fwd;
        }
        // No single layer at fault: report the embedding stage.
        Error::Certificate {
            layer: self.mixing.layers.len(),
            max_err: CERT_TOL,
        }
    }
}

/// [`crate::models::DomainSampler`] over a world. Yields observations only;
/// the labeled latents never cross the trainer boundary.
pub struct WorldSampler<'a> {
    world: &'a World,
    rng: Stream,
}

impl crate::models::DomainSampler for WorldSampler<'_> {
    fn n_domains(&self) -> usize {
        self.world.spec.n_domains
    }

    fn dim(&self) -> usize {
        self.world.spec.ambient_dim
    }

    fn sample(&mut self, domain: usize, batch: usize) -> Result<Mat> {
        Ok(self.world.sample_domain(domain, batch, &mut self.rng)?.x)
    }
}

/// Random orthogonal k×k matrix: Gaussian entries, modified Gram-Schmidt with
/// one re-orthogonalization pass.
fn random_orthogonal(k: usize, rng: &mut Stream) -> Result<Mat> {
    random_orthonormal_rows(k, k, rng)
}

/// k×d (k ≤ d) with orthonormal rows.
fn random_orthonormal_rows(k: usize, d: usize, rng: &mut Stream) -> Result<Mat> {
    if k > d {
        return Err(Error::shape("orthonormal rows", (k, d), (d, d)));
    }
    for _attempt in 0..8 {
        let mut m = rng::normal_mat(rng, k, d);
        if gram_schmidt_rows(&mut m) {
            return Ok(m);
        }
    }
    Err(Error::Degenerate(
        "could not draw a full-rank Gaussian matrix".into(),
    ))
}

fn gram_schmidt_rows(m: &mut Mat) -> bool {
    let (k, d) = m.shape();
    for pass in 0..2 {
        for i in 0..k {
            for j in 0..i {
                let mut dot = 0.0;
                for t in 0..d {
                    dot += m.get(i, t) * m.get(j, t);
                }
                for t in 0..d {
                    let v = m.get(i, t) - dot * m.get(j, t);
                    m.set(i, t, v);
                }
            }
            let norm = fmath::sqrt((0..d).map(|t| m.get(i, t) * m.get(i, t)).sum());
            if pass == 0 && norm < 1e-8 {
                return false;
            }
            for t in 0..d {
                let v = m.get(i, t) / norm;
                m.set(i, t, v);
            }
        }
    }
    true
}

// ── domain-variability probe ───────────────────────────────────────────

/// One coordinate's constraint inside a probe box; `None` means unbounded on
/// that side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordInterval {
    pub lo: Option<f64>,
    pub hi: Option<f64>,
}

impl CoordInterval {
    fn contains(&self, v: f64) -> bool {
        self.lo.is_none_or(|l| v >= l) && self.hi.is_none_or(|h| v <= h)
    }

    fn is_trivial(&self) -> bool {
        self.lo.is_none() && self.hi.is_none()
    }
}

/// Axis-aligned box over the latent space (content coords first, then
/// style). Boxes used by the variability probe always constrain at least one
/// style coordinate, so they are never product sets B × S.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentBox {
    pub coords: Vec<CoordInterval>,
}

impl LatentBox {
    pub fn unbounded(dim: usize) -> LatentBox {
        LatentBox {
            coords: vec![
                CoordInterval {
                    lo: None,
                    hi: None
                };
                dim
            ],
        }
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        self.coords.iter().zip(z).all(|(c, &v)| c.contains(v))
    }

    pub fn constrains_any(&self, range: core::ops::Range<usize>) -> bool {
        range.clone().any(|i| !self.coords[i].is_trivial())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeSet {
    pub latent_box: LatentBox,
    /// Monte-Carlo estimate of P[z ∈ box] per domain.
    pub probs: Vec<f64>,
    /// Largest pairwise probability gap.
    pub max_gap: f64,
    /// Combined standard error of the extreme pair (smoothed estimates, so
    /// never exactly zero).
    pub se: f64,
    /// max_gap > 3·se.
    pub flagged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariabilityReport {
    pub sets: Vec<ProbeSet>,
    pub flagged_fraction: f64,
    /// Boxes abandoned after repeated all-domain-zero draws.
    pub skipped: usize,
    pub n_mc: usize,
}

/// Estimate per-domain probabilities of one explicit box.
pub fn probe_box(world: &World, latent_box: &LatentBox, n_mc: usize, rng: &mut Stream) -> Result<ProbeSet> {
    let spec = world.spec();
    if latent_box.coords.len() != spec.latent_dim() {
        return Err(Error::shape(
            "probe_box",
            (spec.latent_dim(), 1),
            (latent_box.coords.len(), 1),
        ));
    }
    let mut probs = Vec::with_capacity(spec.n_domains);
    for n in 0..spec.n_domains {
        let c = world.content.sample(n_mc, spec.d_c, rng);
        let s = world.styles[n].sample(n_mc, spec.d_s, rng);
        let mut hits = 0usize;
        let mut z = vec![0.0; spec.latent_dim()];
        for r in 0..n_mc {
            z[..spec.d_c].copy_from_slice(c.row(r));
            z[spec.d_c..].copy_from_slice(s.row(r));
            if latent_box.contains(&z) {
                hits += 1;
            }
        }
        probs.push(hits as f64 / n_mc as f64);
    }
    let (mut max_gap, mut se) = (0.0f64, 0.0f64);
    for i in 0..probs.len() {
        for j in i + 1..probs.len() {
            let gap = (probs[i] - probs[j]).abs();
            if gap >= max_gap {
                max_gap = gap;
                // Plus-two smoothing keeps the SE positive at p̂ ∈ {0, 1}.
                let sm = |p: f64| {
                    let pt = (p * n_mc as f64 + 2.0) / (n_mc as f64 + 4.0);
                    pt * (1.0 - pt) / n_mc as f64
                };
                se = fmath::sqrt(sm(probs[i]) + sm(probs[j]));
            }
        }
    }
    Ok(ProbeSet {
        latent_box: latent_box.clone(),
        probs,
        max_gap,
        se,
        flagged: max_gap > 3.0 * se,
    })
}

/// Probe domain variability with random boxes that always constrain style.
///
/// Boxes are centered on latent draws so they sit where mass actually is;
/// style coordinates are constrained with higher probability than content
/// coordinates because variability lives in style. Boxes that miss every
/// domain are retried a bounded number of times, then counted as skipped.
pub fn probe_domain_variability(
    world: &World,
    n_sets: usize,
    n_mc: usize,
    rng: &mut Stream,
) -> Result<VariabilityReport> {
    use rand::Rng;
    if n_mc < 1000 {
        return Err(Error::InvalidSpec(format!(
            "n_mc must be ≥ 1000, got {n_mc}"
        )));
    }
    let spec = world.spec();
    let k = spec.latent_dim();
    let mut sets = Vec::with_capacity(n_sets);
    let mut skipped = 0usize;
    for _ in 0..n_sets {
        let mut done = false;
        for _retry in 0..20 {
            // Center the box on a draw from a random domain.
            let dom = rng.gen_range(0..spec.n_domains);
            let c = world.content.sample(1, spec.d_c, rng);
            let s = world.styles[dom].sample(1, spec.d_s, rng);
            let mut center = c.row(0).to_vec();
            center.extend_from_slice(s.row(0));

            let mut latent_box = LatentBox::unbounded(k);
            for (i, iv) in latent_box.coords.iter_mut().enumerate() {
                let p_constrain = if i < spec.d_c { 0.3 } else { 0.7 };
                if rng.gen::<f64>() < p_constrain {
                    let w = rng::uniform(rng, 0.5, 2.0);
                    *iv = CoordInterval {
                        lo: Some(center[i] - w),
                        hi: Some(center[i] + w),
                    };
                }
            }
            if !latent_box.constrains_any(spec.d_c..k) {
                let i = spec.d_c + rng.gen_range(0..spec.d_s);
                let w = rng::uniform(rng, 0.5, 2.0);
                latent_box.coords[i] = CoordInterval {
                    lo: Some(center[i] - w),
                    hi: Some(center[i] + w),
                };
            }

            let set = probe_box(world, &latent_box, n_mc, rng)?;
            if set.probs.iter().all(|&p| p == 0.0) {
                continue;
            }
            sets.push(set);
            done = true;
            break;
        }
        if !done {
            skipped += 1;
        }
    }
    let flagged = sets.iter().filter(|s| s.flagged).count();
    let flagged_fraction = if sets.is_empty() {
        0.0
    } else {
        flagged as f64 / sets.len() as f64
    };
    Ok(VariabilityReport {
        sets,
        flagged_fraction,
        skipped,
        n_mc,
    })
}
