//! Pluggable guidance priors: a DDPM-style noise schedule, an analytic
//! Gaussian score oracle with classifier-free guidance, and a deterministic
//! embedding prior standing in for a pretrained image/text encoder.

pub mod translate;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::image::ImageBuffer;
use crate::numgrad::{NodeId, Tape};

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("variance must be positive, got {0}")]
    DegenerateVariance(f64),
    #[error("timestep {t} outside 1..={t_total}")]
    TimestepRange { t: usize, t_total: usize },
    #[error("length mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("embedding input must be {0}x{0}-pool divisible, got {1}x{2}")]
    EmbedSize(usize, usize, usize),
    #[error("zero-norm embedding")]
    ZeroNormEmbedding,
    #[error("translation backend '{backend}' failed: {log}")]
    Backend { backend: String, log: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] crate::image::ImageError),
}

/// Per-timestep weighting of the score residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightRule {
    /// `w_t = 1 - alpha_bar_t`.
    #[default]
    OneMinusAlphaBar,
    /// `w_t = 1`.
    One,
}

/// Linear-beta DDPM schedule with cached cumulative alpha products;
/// `alpha_bar[0] = 1` and timesteps run 1..=t_total.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
    pub w_rule: WeightRule,
}

impl NoiseSchedule {
    pub fn new(t_total: usize, beta_start: f64, beta_end: f64, w_rule: WeightRule) -> Self {
        assert!(t_total >= 2, "schedule needs at least 2 steps");
        assert!(
            0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0,
            "betas must satisfy 0 < start <= end < 1"
        );
        let betas: Vec<f64> = (0..t_total)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_total - 1) as f64)
            .collect();
        let mut alpha_bar = Vec::with_capacity(t_total + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for &b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Self { betas, alpha_bar, w_rule }
    }

    /// The standard configuration: 1000 steps, beta from 1e-4 to 2e-2.
    pub fn standard(w_rule: WeightRule) -> Self {
        Self::new(1000, 1e-4, 2e-2, w_rule)
    }

    pub fn t_total(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn weight(&self, t: usize) -> f64 {
        match self.w_rule {
            WeightRule::OneMinusAlphaBar => 1.0 - self.alpha_bar[t],
            WeightRule::One => 1.0,
        }
    }

    pub fn check_t(&self, t: usize) -> Result<(), PriorError> {
        if t == 0 || t > self.t_total() {
            return Err(PriorError::TimestepRange { t, t_total: self.t_total() });
        }
        Ok(())
    }

    /// Forward diffusion: `z_t = sqrt(alpha_bar) x + sqrt(1 - alpha_bar) eps`.
    pub fn add_noise(&self, x: &[f64], eps: &[f64], t: usize) -> Result<Vec<f64>, PriorError> {
        self.check_t(t)?;
        if x.len() != eps.len() {
            return Err(PriorError::ShapeMismatch { expected: x.len(), got: eps.len() });
        }
        let ab = self.alpha_bar(t);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x.iter().zip(eps).map(|(x, e)| sa * x + sb * e).collect())
    }
}

/// Predicts the noise content of a noised image, conditionally or not.
pub trait NoisePredictor {
    fn predict(&self, z_t: &[f64], t: usize, conditioned: bool) -> Result<Vec<f64>, PriorError>;
}

/// Closed-form epsilon prediction when the data distribution is an isotropic
/// Gaussian `N(mu, sigma2 I)`.
pub fn analytic_epsilon(z: f64, mu: f64, alpha_bar: f64, sigma2: f64) -> f64 {
    (1.0 - alpha_bar).sqrt() * (z - alpha_bar.sqrt() * mu) / (alpha_bar * sigma2 + 1.0 - alpha_bar)
}

/// Score oracle for a Gaussian image distribution around a conditional mean,
/// with a flat gray unconditional mean for guidance.
#[derive(Debug, Clone)]
pub struct AnalyticPrior {
    pub schedule: NoiseSchedule,
    mu_cond: Vec<f64>,
    mu_uncond: Vec<f64>,
    sigma2: f64,
}

impl AnalyticPrior {
    pub fn new(schedule: NoiseSchedule, mu: &ImageBuffer, sigma2: f64) -> Result<Self, PriorError> {
        if sigma2 <= 0.0 {
            return Err(PriorError::DegenerateVariance(sigma2));
        }
        Ok(Self {
            schedule,
            mu_cond: mu.data.clone(),
            mu_uncond: vec![0.5; mu.data.len()],
            sigma2,
        })
    }

    /// Conditional mean synthesized from the prompt.
    pub fn from_prompt(
        schedule: NoiseSchedule,
        prompt: &str,
        h: usize,
        w: usize,
        sigma2: f64,
    ) -> Result<Self, PriorError> {
        let mu = synthesize_prompt_image(prompt, h, w);
        Self::new(schedule, &mu, sigma2)
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu_cond
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }
}

impl NoisePredictor for AnalyticPrior {
    fn predict(&self, z_t: &[f64], t: usize, conditioned: bool) -> Result<Vec<f64>, PriorError> {
        self.schedule.check_t(t)?;
        let mu = if conditioned { &self.mu_cond } else { &self.mu_uncond };
        if z_t.len() != mu.len() {
            return Err(PriorError::ShapeMismatch { expected: mu.len(), got: z_t.len() });
        }
        let ab = self.schedule.alpha_bar(t);
        Ok(z_t
            .iter()
            .zip(mu)
            .map(|(&z, &m)| analytic_epsilon(z, m, ab, self.sigma2))
            .collect())
    }
}

/// Classifier-free guidance mix: `eps_u + s * (eps_c - eps_u)`.
pub fn cfg_combine(eps_u: &[f64], eps_c: &[f64], s: f64) -> Vec<f64> {
    assert_eq!(eps_u.len(), eps_c.len(), "cfg operand size mismatch");
    eps_u.iter().zip(eps_c).map(|(u, c)| u + s * (c - u)).collect()
}

/// Guided noise prediction; skips the unconditional pass when `s == 1`.
pub fn predict_guided(
    prior: &dyn NoisePredictor,
    z_t: &[f64],
    t: usize,
    cfg_scale: f64,
) -> Result<Vec<f64>, PriorError> {
    let eps_c = prior.predict(z_t, t, true)?;
    if cfg_scale == 1.0 {
        return Ok(eps_c);
    }
    let eps_u = prior.predict(z_t, t, false)?;
    Ok(cfg_combine(&eps_u, &eps_c, cfg_scale))
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic low-frequency color pattern per prompt: a few seeded
/// sinusoids per channel around mid-gray, clamped to [0, 1].
pub fn synthesize_prompt_image(prompt: &str, h: usize, w: usize) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(prompt.as_bytes()));
    let mut waves = [[[0.0f64; 4]; 3]; 3];
    for ch in &mut waves {
        for wave in ch.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            wave[0] = 0.12 * n;
            wave[1] = (rand::Rng::gen_range(&mut rng, 0..3)) as f64;
            wave[2] = (rand::Rng::gen_range(&mut rng, 0..3)) as f64;
            wave[3] = rand::Rng::gen_range(&mut rng, 0.0..std::f64::consts::TAU);
        }
    }
    ImageBuffer::from_fn(h, w, 3, |y, x, c| {
        let mut v = 0.5;
        for wave in &waves[c] {
            let phase = std::f64::consts::TAU
                * (wave[1] * x as f64 / w as f64 + wave[2] * y as f64 / h as f64)
                + wave[3];
            v += wave[0] * phase.sin();
        }
        v.clamp(0.0, 1.0)
    })
}

/// Pool target per axis for image embeddings.
const EMBED_POOL: usize = 8;

/// Deterministic stand-in for a CLIP-style encoder pair: images are block
/// averaged to 8x8 and pushed through a fixed seeded random projection; text
/// is a hashed bag of words. Both embed to the unit sphere in `dim`.
#[derive(Debug, Clone)]
pub struct EmbeddingPrior {
    pub dim: usize,
    proj: Vec<f64>,
}

impl EmbeddingPrior {
    pub fn new(dim: usize) -> Self {
        let cols = 3 * EMBED_POOL * EMBED_POOL;
        let mut rng = ChaCha8Rng::seed_from_u64(0x7a5c_3d1e_90ab_42f7);
        let scale = 1.0 / (cols as f64).sqrt();
        let proj = (0..dim * cols)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) * scale)
            .collect();
        Self { dim, proj }
    }

    fn check_size(&self, h: usize, w: usize) -> Result<(), PriorError> {
        if h % EMBED_POOL != 0 || w % EMBED_POOL != 0 {
            return Err(PriorError::EmbedSize(EMBED_POOL, h, w));
        }
        Ok(())
    }

    /// Projection from a channel-planar `[3*h*w]` image vector straight to
    /// the (unnormalized) embedding, with the block average folded in.
    pub fn embed_matrix(&self, h: usize, w: usize) -> Result<Vec<f64>, PriorError> {
        self.check_size(h, w)?;
        let npix = h * w;
        let (bh, bw) = (h / EMBED_POOL, w / EMBED_POOL);
        let inv_bin = 1.0 / (bh * bw) as f64;
        let cols = 3 * npix;
        let pooled_cols = 3 * EMBED_POOL * EMBED_POOL;
        let mut mat = vec![0.0; self.dim * cols];
        for e in 0..self.dim {
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        let bin = (y / bh) * EMBED_POOL + x / bw;
                        mat[e * cols + c * npix + y * w + x] =
                            self.proj[e * pooled_cols + c * EMBED_POOL * EMBED_POOL + bin] * inv_bin;
                    }
                }
            }
        }
        Ok(mat)
    }

    pub fn image_embed(&self, img: &ImageBuffer) -> Result<Vec<f64>, PriorError> {
        self.check_size(img.h, img.w)?;
        let npix = img.npix();
        let (bh, bw) = (img.h / EMBED_POOL, img.w / EMBED_POOL);
        let inv_bin = 1.0 / (bh * bw) as f64;
        let pooled_cols = 3 * EMBED_POOL * EMBED_POOL;
        let mut pooled = vec![0.0; pooled_cols];
        for p in 0..npix {
            let (y, x) = (p / img.w, p % img.w);
            let bin = (y / bh) * EMBED_POOL + x / bw;
            for c in 0..3 {
                pooled[c * EMBED_POOL * EMBED_POOL + bin] += img.data[p * 3 + c] * inv_bin;
            }
        }
        let raw: Vec<f64> = (0..self.dim)
            .map(|e| {
                self.proj[e * pooled_cols..(e + 1) * pooled_cols]
                    .iter()
                    .zip(&pooled)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        normalize_embedding(raw)
    }

    /// Differentiable image embedding over planar channel nodes from a render.
    pub fn image_embed_graph(
        &self,
        tape: &mut Tape,
        rgb: [NodeId; 3],
        h: usize,
        w: usize,
    ) -> Result<NodeId, PriorError> {
        let mat = self.embed_matrix(h, w)?;
        let planar = tape.concat(&rgb);
        let raw = tape.linear_const(planar, mat, self.dim);
        let norm = tape.value(raw).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-12 {
            return Err(PriorError::ZeroNormEmbedding);
        }
        Ok(tape.normalize(raw))
    }

    pub fn text_embed(&self, prompt: &str) -> Result<Vec<f64>, PriorError> {
        let mut acc = vec![0.0; self.dim];
        for token in prompt.split_whitespace() {
            let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token.to_lowercase().as_bytes()));
            for slot in acc.iter_mut() {
                *slot += <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
            }
        }
        normalize_embedding(acc)
    }
}

impl Default for EmbeddingPrior {
    fn default() -> Self {
        Self::new(32)
    }
}

fn normalize_embedding(mut v: Vec<f64>) -> Result<Vec<f64>, PriorError> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n <= 1e-12 {
        return Err(PriorError::ZeroNormEmbedding);
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

/// Cosine-distance loss between two unit embeddings.
pub fn clip_loss(a: &[f64], b: &[f64]) -> f64 {
    1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
}

/// Tape version of [`clip_loss`] against a fixed text embedding.
pub fn clip_loss_graph(tape: &mut Tape, image_embed: NodeId, text_embed: &[f64]) -> NodeId {
    let prod = tape.mul_const(image_embed, text_embed.to_vec());
    let cos = tape.sum_all(prod);
    let neg = tape.mul_scalar(cos, -1.0);
    tape.add_scalar(neg, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_is_strictly_decreasing_from_one() {
        let s = NoiseSchedule::standard(WeightRule::default());
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=s.t_total() {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1), "alpha_bar not decreasing at t={t}");
            assert!(s.alpha_bar(t) > 0.0);
        }
        assert!((s.beta(1) - 1e-4).abs() < 1e-15);
        assert!((s.beta(1000) - 2e-2).abs() < 1e-15);
    }

    #[test]
    fn add_noise_without_noise_scales_by_sqrt_alpha_bar() {
        let s = NoiseSchedule::standard(WeightRule::default());
        let x = vec![1.0, -0.5];
        let z = s.add_noise(&x, &[0.0, 0.0], 10).unwrap();
        let sa = s.alpha_bar(10).sqrt();
        assert!((z[0] - sa).abs() < 1e-15);
        assert!((z[1] + 0.5 * sa).abs() < 1e-15);
        assert!(s.add_noise(&x, &[0.0, 0.0], 0).is_err());
        assert!(s.add_noise(&x, &[0.0, 0.0], 1001).is_err());
    }

    #[test]
    fn weight_rules() {
        let s = NoiseSchedule::standard(WeightRule::OneMinusAlphaBar);
        assert!((s.weight(500) - (1.0 - s.alpha_bar(500))).abs() < 1e-15);
        let s1 = NoiseSchedule::standard(WeightRule::One);
        assert_eq!(s1.weight(500), 1.0);
    }

    #[test]
    fn analytic_epsilon_hand_values() {
        let e = analytic_epsilon(1.0, 0.0, 0.5, 1.0);
        assert!((e - 0.5f64.sqrt()).abs() < 1e-12);
        // As alpha_bar -> 0 the prediction degrades to the noised input.
        assert!((analytic_epsilon(0.73, 5.0, 0.0, 1.0) - 0.73).abs() < 1e-15);
    }

    #[test]
    fn unit_variance_prior_has_unit_denominator() {
        let s = NoiseSchedule::standard(WeightRule::default());
        let mu = ImageBuffer::constant(2, 2, 3, 0.25);
        let prior = AnalyticPrior::new(s, &mu, 1.0).unwrap();
        let t = 400;
        let ab = prior.schedule.alpha_bar(t);
        let z = vec![0.9; 12];
        let eps = prior.predict(&z, t, true).unwrap();
        let want = (1.0 - ab).sqrt() * (0.9 - ab.sqrt() * 0.25);
        assert!((eps[0] - want).abs() < 1e-12);
    }

    #[test]
    fn degenerate_variance_is_rejected() {
        let s = NoiseSchedule::standard(WeightRule::default());
        let mu = ImageBuffer::constant(1, 1, 3, 0.5);
        assert!(matches!(
            AnalyticPrior::new(s, &mu, 0.0),
            Err(PriorError::DegenerateVariance(_))
        ));
    }

    #[test]
    fn cfg_combine_endpoints_and_extrapolation() {
        let u = vec![1.0, 2.0];
        let c = vec![3.0, 0.0];
        assert_eq!(cfg_combine(&u, &c, 0.0), u);
        assert_eq!(cfg_combine(&u, &c, 1.0), c);
        assert_eq!(cfg_combine(&u, &c, 2.0), vec![5.0, -2.0]);
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let prior = EmbeddingPrior::default();
        let t1 = prior.text_embed("majestic sorcerer portrait").unwrap();
        let t2 = prior.text_embed("majestic sorcerer portrait").unwrap();
        assert_eq!(t1, t2);
        assert!((t1.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        let img = synthesize_prompt_image("anything", 16, 16);
        let e = prior.image_embed(&img).unwrap();
        assert!((e.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clip_loss_extremes() {
        let e = vec![1.0, 0.0];
        let o = vec![0.0, 1.0];
        assert_eq!(clip_loss(&e, &e), 0.0);
        assert_eq!(clip_loss(&e, &o), 1.0);
        let n = vec![-1.0, 0.0];
        assert_eq!(clip_loss(&e, &n), 2.0);
    }

    #[test]
    fn empty_prompt_embedding_is_an_error() {
        let prior = EmbeddingPrior::default();
        assert!(matches!(prior.text_embed("  "), Err(PriorError::ZeroNormEmbedding)));
    }

    #[test]
    fn graph_embedding_matches_value_path() {
        let prior = EmbeddingPrior::default();
        let img = synthesize_prompt_image("a red cube", 8, 8);
        let direct = prior.image_embed(&img).unwrap();
        let mut tape = Tape::new();
        let mut chans = Vec::new();
        for c in 0..3 {
            let v: Vec<f64> = (0..img.npix()).map(|p| img.data[p * 3 + c]).collect();
            chans.push(tape.constant(vec![img.npix()], v));
        }
        let node = prior
            .image_embed_graph(&mut tape, [chans[0], chans[1], chans[2]], 8, 8)
            .unwrap();
        let graph: Vec<f64> = tape.value(node).to_vec();
        for (a, b) in direct.iter().zip(&graph) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn prompt_synthesis_is_deterministic_per_prompt() {
        let a = synthesize_prompt_image("wizard", 8, 8);
        let b = synthesize_prompt_image("wizard", 8, 8);
        let c = synthesize_prompt_image("warrior", 8, 8);
        assert_eq!(a.data, b.data);
        assert_ne!(a.data, c.data);
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
