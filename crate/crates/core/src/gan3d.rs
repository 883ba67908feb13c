//! Toy triplane generator: a latent mapping network, a dense triplane
//! synthesizer, and a small feature decoder, all stored as named buffers so
//! finetuning can freeze arbitrary parts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::numgrad::{NodeId, ParamSet, Tape};

#[derive(Debug, Clone, Copy)]
pub struct GeneratorConfig {
    /// Latent (z) and style (w) dimensionality.
    pub d_latent: usize,
    /// Hidden width of the mapping, triplane, and decoder networks.
    pub hidden: usize,
    /// Feature channels per plane.
    pub channels: usize,
    /// Plane grid resolution (square).
    pub resolution: usize,
    /// Negative slope of the hidden leaky-relu activations.
    pub leaky_slope: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { d_latent: 16, hidden: 64, channels: 8, resolution: 32, leaky_slope: 0.2 }
    }
}

impl GeneratorConfig {
    pub fn triplane_len(&self) -> usize {
        3 * self.channels * self.resolution * self.resolution
    }

    pub fn triplane_shape(&self) -> Vec<usize> {
        vec![3, self.channels, self.resolution, self.resolution]
    }
}

/// Handles to decoder weights on a tape, consumed by the renderer.
#[derive(Debug, Clone, Copy)]
pub struct DecoderRef {
    pub w0: NodeId,
    pub b0: NodeId,
    pub w1: NodeId,
    pub b1: NodeId,
    pub slope: f64,
}

/// The toy generator: parameters plus the shape metadata needed to rebuild
/// forward graphs. Buffer names are stable and double as checkpoint keys.
#[derive(Debug, Clone)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub params: ParamSet,
}

/// Name of the optional zero-initialized triplane residual buffer.
pub const LEARNABLE_TRIPLANE: &str = "t_l";

impl Generator {
    /// Seeded initialization: normal weights scaled by 1/sqrt(fan_in), zero
    /// biases except a positive density bias so fresh scenes are not empty.
    pub fn init(config: GeneratorConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let d = config.d_latent;
        let h = config.hidden;
        let c = config.channels;
        let out = config.triplane_len();
        let mut dense = |name: &str, rows: usize, cols: usize| {
            let scale = 1.0 / (cols as f64).sqrt();
            let w: Vec<f64> = (0..rows * cols)
                .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) * scale)
                .collect();
            params.insert(name, vec![rows, cols], w, true);
        };
        dense("mapping.w0", h, d);
        dense("mapping.w1", d, h);
        dense("tplane.w0", h, d);
        dense("tplane.w1", out, h);
        dense("decoder.w0", h, c);
        dense("decoder.w1", 4, h);
        params.insert("mapping.b0", vec![h], vec![0.0; h], true);
        params.insert("mapping.b1", vec![d], vec![0.0; d], true);
        params.insert("tplane.b0", vec![h], vec![0.0; h], true);
        params.insert("tplane.b1", vec![out], vec![0.0; out], true);
        params.insert("decoder.b0", vec![h], vec![0.0; h], true);
        let mut db1 = vec![0.0; 4];
        db1[0] = 0.5;
        params.insert("decoder.b1", vec![4], db1, true);
        Self { config, params }
    }

    /// Adds the zero-initialized learnable triplane residual buffer.
    pub fn add_learnable_triplane(&mut self) {
        self.params.insert(
            LEARNABLE_TRIPLANE,
            self.config.triplane_shape(),
            vec![0.0; self.config.triplane_len()],
            true,
        );
    }

    pub fn has_learnable_triplane(&self) -> bool {
        self.params.contains(LEARNABLE_TRIPLANE)
    }

    /// Mapping network on the tape: `z` is `[1, d_latent]`, result `[1, d_latent]`.
    pub fn mapping_forward(&self, tape: &mut Tape, z: NodeId) -> NodeId {
        let w0 = tape.leaf(&self.params, "mapping.w0");
        let b0 = tape.leaf(&self.params, "mapping.b0");
        let w1 = tape.leaf(&self.params, "mapping.w1");
        let b1 = tape.leaf(&self.params, "mapping.b1");
        let h = tape.linear(z, w0, b0);
        let h = tape.leaky_relu(h, self.config.leaky_slope);
        tape.linear(h, w1, b1)
    }

    /// Triplane synthesizer on the tape: `w` is `[1, d_latent]`, result is
    /// `[3, channels, resolution, resolution]`, with `residual` added when
    /// present.
    pub fn triplane_forward(&self, tape: &mut Tape, w: NodeId, residual: Option<NodeId>) -> NodeId {
        let w0 = tape.leaf(&self.params, "tplane.w0");
        let b0 = tape.leaf(&self.params, "tplane.b0");
        let w1 = tape.leaf(&self.params, "tplane.w1");
        let b1 = tape.leaf(&self.params, "tplane.b1");
        let h = tape.linear(w, w0, b0);
        let h = tape.leaky_relu(h, self.config.leaky_slope);
        let flat = tape.linear(h, w1, b1);
        let planes = tape.reshape(flat, self.config.triplane_shape());
        match residual {
            Some(r) => tape.add(planes, r),
            None => planes,
        }
    }

    /// Decoder weight handles for the renderer.
    pub fn decoder_ref(&self, tape: &mut Tape) -> DecoderRef {
        DecoderRef {
            w0: tape.leaf(&self.params, "decoder.w0"),
            b0: tape.leaf(&self.params, "decoder.b0"),
            w1: tape.leaf(&self.params, "decoder.w1"),
            b1: tape.leaf(&self.params, "decoder.b1"),
            slope: self.config.leaky_slope,
        }
    }

    /// Value-only mapping pass.
    pub fn mapping_value(&self, z: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new();
        let zn = tape.constant(vec![1, z.len()], z.to_vec());
        let w = self.mapping_forward(&mut tape, zn);
        tape.value(w).to_vec()
    }

    /// Value-only triplane pass, residual included when the buffer exists.
    pub fn triplane_value(&self, w: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new();
        let wn = tape.constant(vec![1, w.len()], w.to_vec());
        let residual = self
            .has_learnable_triplane()
            .then(|| tape.leaf(&self.params, LEARNABLE_TRIPLANE));
        let t = self.triplane_forward(&mut tape, wn, residual);
        tape.value(t).to_vec()
    }

    /// Deep copy with every buffer frozen; finetuning the original leaves the
    /// clone untouched.
    pub fn clone_frozen(&self) -> Self {
        Self { config: self.config, params: self.params.clone_frozen() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplane_output_has_stacked_plane_shape() {
        let gen = Generator::init(GeneratorConfig::default(), 7);
        let w = gen.mapping_value(&vec![0.1; 16]);
        assert_eq!(w.len(), 16);
        let t = gen.triplane_value(&w);
        assert_eq!(t.len(), 3 * 8 * 32 * 32);
    }

    #[test]
    fn mapping_is_deterministic_in_seed_and_latent() {
        let a = Generator::init(GeneratorConfig::default(), 3);
        let b = Generator::init(GeneratorConfig::default(), 3);
        let z = vec![0.25; 16];
        assert_eq!(a.mapping_value(&z), b.mapping_value(&z));
        let c = Generator::init(GeneratorConfig::default(), 4);
        assert_ne!(a.mapping_value(&z), c.mapping_value(&z));
    }

    #[test]
    fn zero_residual_matches_no_residual_bitwise() {
        let mut gen = Generator::init(GeneratorConfig::default(), 11);
        let w = gen.mapping_value(&vec![-0.3; 16]);
        let plain = gen.triplane_value(&w);
        gen.add_learnable_triplane();
        let with_zero = gen.triplane_value(&w);
        assert_eq!(plain, with_zero);
    }

    #[test]
    fn clone_frozen_is_isolated_from_later_finetuning() {
        let mut gen = Generator::init(GeneratorConfig::default(), 5);
        let frozen = gen.clone_frozen();
        assert_eq!(gen.params.get("tplane.w1").values, frozen.params.get("tplane.w1").values);
        for (_, buf) in frozen.params.iter() {
            assert!(!buf.trainable);
        }
        gen.params.get_mut("tplane.w1").values[0] += 1.0;
        assert_ne!(gen.params.get("tplane.w1").values[0], frozen.params.get("tplane.w1").values[0]);
    }

    #[test]
    fn small_config_triplane_gradient_matches_fd() {
        use crate::numgrad::fd_compare;
        let config = GeneratorConfig { d_latent: 3, hidden: 4, channels: 2, resolution: 4, leaky_slope: 0.2 };
        let gen = Generator::init(config, 2);
        let z = vec![0.3, -0.8, 0.5];
        let run = |gen: &Generator, collect: bool| -> (f64, Vec<f64>) {
            let mut g = gen.clone();
            g.params.set_trainable_prefixes(&["tplane."]);
            let mut tape = Tape::new();
            let zn = tape.constant(vec![1, 3], z.clone());
            let w = g.mapping_forward(&mut tape, zn);
            let t = g.triplane_forward(&mut tape, w, None);
            let sq = tape.mul(t, t);
            let out = tape.sum_all(sq);
            let v = tape.scalar(out);
            if collect {
                tape.backward(out, &mut g.params).unwrap();
                (v, g.params.get("tplane.w0").grad.clone())
            } else {
                (v, vec![])
            }
        };
        let (_, analytic) = run(&gen, true);
        let base = gen.params.get("tplane.w0").values.clone();
        let eval = |p: &[f64]| {
            let mut g = gen.clone();
            g.params.get_mut("tplane.w0").values = p.to_vec();
            run(&g, false).0
        };
        let err = fd_compare(&analytic, eval, &base, 1e-5).unwrap();
        assert!(err < 1e-4, "fd mismatch {err}");
    }
}
