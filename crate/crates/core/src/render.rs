//! Pinhole-camera volume rendering of a decoded triplane field, built on the
//! tape so images are differentiable with respect to planes and decoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gan3d::DecoderRef;
use crate::image::{DepthMap, ImageBuffer};
use crate::numgrad::{NodeId, Tape};

/// Radius of the sphere bounding the `[-1, 1]^3` scene cube.
pub const SCENE_SPHERE_RADIUS: f64 = 1.7320508075688772;

#[derive(Debug, Clone, Copy)]
pub struct Camera {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub radius: f64,
    pub fov_y_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Orbit camera at the default distance (2.7) and vertical fov (30 deg),
    /// looking at the origin with +Y up.
    pub fn orbit(azimuth_deg: f64, elevation_deg: f64, width: usize, height: usize) -> Self {
        Self {
            azimuth_deg: normalize_azimuth(azimuth_deg),
            elevation_deg,
            radius: 2.7,
            fov_y_deg: 30.0,
            width,
            height,
        }
    }

    pub fn position(&self) -> [f64; 3] {
        let az = self.azimuth_deg.to_radians();
        let el = self.elevation_deg.to_radians();
        [
            self.radius * el.cos() * az.sin(),
            self.radius * el.sin(),
            self.radius * el.cos() * az.cos(),
        ]
    }

    pub fn basis(&self) -> CameraBasis {
        let pos = self.position();
        let forward = normalize(neg(pos));
        let right = cross(forward, [0.0, 1.0, 0.0]);
        let rl = len(right);
        assert!(rl > 1e-9, "camera looking straight along +Y is unsupported (elevation {})", self.elevation_deg);
        let right = scale(right, 1.0 / rl);
        let up = cross(right, forward);
        CameraBasis { pos, right, up, forward }
    }

    /// Unit ray directions through every pixel center, row-major.
    pub fn ray_grid(&self) -> Vec<[f64; 3]> {
        let basis = self.basis();
        let tan_half = (self.fov_y_deg.to_radians() * 0.5).tan();
        let aspect = self.width as f64 / self.height as f64;
        let mut dirs = Vec::with_capacity(self.width * self.height);
        for i in 0..self.height {
            let ndc_y = 1.0 - 2.0 * (i as f64 + 0.5) / self.height as f64;
            for j in 0..self.width {
                let ndc_x = 2.0 * (j as f64 + 0.5) / self.width as f64 - 1.0;
                let d = add(
                    basis.forward,
                    add(
                        scale(basis.right, ndc_x * aspect * tan_half),
                        scale(basis.up, ndc_y * tan_half),
                    ),
                );
                dirs.push(normalize(d));
            }
        }
        dirs
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CameraBasis {
    pub pos: [f64; 3],
    pub right: [f64; 3],
    pub up: [f64; 3],
    pub forward: [f64; 3],
}

/// Wraps an azimuth into `[-180, 180)`.
pub fn normalize_azimuth(az: f64) -> f64 {
    (az + 180.0).rem_euclid(360.0) - 180.0
}

#[derive(Debug, Clone, Copy)]
pub struct SampleSpec {
    pub samples: usize,
    /// Stratified jitter seed; `None` places samples at interval midpoints.
    pub jitter: Option<u64>,
}

impl SampleSpec {
    pub fn midpoint(samples: usize) -> Self {
        Self { samples, jitter: None }
    }

    pub fn jittered(samples: usize, seed: u64) -> Self {
        Self { samples, jitter: Some(seed) }
    }
}

/// Per-render geometry: one sample point per (ray, step), plus the constant
/// vectors compositing needs.
pub struct RayBatch {
    pub points: Vec<[f64; 3]>,
    pub deltas: Vec<f64>,
    pub tvals: Vec<f64>,
    /// 1.0 where the sample lies inside the scene cube, else 0.0; densities
    /// are masked by this so the exterior stays empty regardless of what the
    /// decoder emits for a zero feature.
    pub inside: Vec<f64>,
    pub npix: usize,
    pub samples: usize,
}

/// Stratified samples along each pixel ray between its scene-sphere bounds.
/// Rays that miss the sphere get zero-length samples that composite to
/// nothing. Jitter streams are per-ray, so the result does not depend on
/// traversal or thread order.
pub fn sample_rays(cam: &Camera, spec: &SampleSpec) -> RayBatch {
    let origin = cam.basis().pos;
    let dirs = cam.ray_grid();
    let npix = dirs.len();
    let s = spec.samples;
    assert!(s >= 1, "need at least one sample per ray");
    let mut points = Vec::with_capacity(npix * s);
    let mut deltas = Vec::with_capacity(npix * s);
    let mut tvals = Vec::with_capacity(npix * s);
    let mut inside = Vec::with_capacity(npix * s);
    let mut rng = spec.jitter.map(ChaCha8Rng::seed_from_u64);
    for (r, d) in dirs.iter().enumerate() {
        let (near, far) = match hit_sphere(origin, *d, SCENE_SPHERE_RADIUS) {
            Some(range) => range,
            None => (cam.radius, cam.radius),
        };
        if let Some(rng) = rng.as_mut() {
            rng.set_stream(r as u64);
        }
        let span = (far - near) / s as f64;
        let mut prev_t = f64::NAN;
        for k in 0..s {
            let u: f64 = match rng.as_mut() {
                Some(rng) => rng.gen::<f64>(),
                None => 0.5,
            };
            let t = near + (k as f64 + u) * span;
            let p = add(origin, scale(*d, t));
            points.push(p);
            tvals.push(t);
            inside.push(if p.iter().all(|v| (-1.0..=1.0).contains(v)) { 1.0 } else { 0.0 });
            if k > 0 {
                deltas.push(t - prev_t);
            }
            prev_t = t;
        }
        deltas.push(far - prev_t);
    }
    RayBatch { points, deltas, tvals, inside, npix, samples: s }
}

/// Alpha compositing over per-sample densities: `alpha = 1 - exp(-sigma*delta)`,
/// transmittance from the exclusive running optical depth, `weights = T*alpha`.
/// `sigma` is `[npix*s]` flat; the returned weights node is `[npix, s]`.
pub fn composite_graph(
    tape: &mut Tape,
    sigma: NodeId,
    deltas: &[f64],
    npix: usize,
    s: usize,
) -> (NodeId, NodeId) {
    let sd = tape.mul_const(sigma, deltas.to_vec());
    let sd2 = tape.reshape(sd, vec![npix, s]);
    let cum = tape.cumsum_excl_last(sd2);
    let neg_cum = tape.mul_scalar(cum, -1.0);
    let trans = tape.exp(neg_cum);
    let neg_sd = tape.mul_scalar(sd2, -1.0);
    let decay = tape.exp(neg_sd);
    let neg_decay = tape.mul_scalar(decay, -1.0);
    let alpha = tape.add_scalar(neg_decay, 1.0);
    let weights = tape.mul(trans, alpha);
    let opacity = tape.sum_last(weights);
    (weights, opacity)
}

/// Differentiable render graph nodes, each `[npix]`.
pub struct RenderNodes {
    pub rgb: [NodeId; 3],
    pub opacity: NodeId,
    pub depth: NodeId,
}

/// Builds the full render graph: triplane sampling, decoding (softplus
/// density, sigmoid color), and alpha compositing over a black background.
pub fn render_graph(
    tape: &mut Tape,
    planes: NodeId,
    dec: DecoderRef,
    cam: &Camera,
    spec: &SampleSpec,
) -> RenderNodes {
    let batch = sample_rays(cam, spec);
    render_graph_for_batch(tape, planes, dec, &batch)
}

/// Same as [`render_graph`] but over precomputed ray geometry.
pub fn render_graph_for_batch(
    tape: &mut Tape,
    planes: NodeId,
    dec: DecoderRef,
    batch: &RayBatch,
) -> RenderNodes {
    let feats = tape.triplane_sample(planes, batch.points.clone());
    let h = tape.linear(feats, dec.w0, dec.b0);
    let h = tape.leaky_relu(h, dec.slope);
    let out = tape.linear(h, dec.w1, dec.b1);
    let sigma_raw = tape.slice_col(out, 0);
    let sigma = tape.softplus(sigma_raw);
    let sigma = tape.mul_const(sigma, batch.inside.clone());
    let (weights, opacity) = composite_graph(tape, sigma, &batch.deltas, batch.npix, batch.samples);
    let mut rgb = [opacity; 3];
    for ch in 0..3 {
        let raw = tape.slice_col(out, 1 + ch);
        let col = tape.sigmoid(raw);
        let col2 = tape.reshape(col, vec![batch.npix, batch.samples]);
        let weighted = tape.mul(weights, col2);
        rgb[ch] = tape.sum_last(weighted);
    }
    let wt = tape.mul_const(weights, batch.tvals.clone());
    let depth = tape.sum_last(wt);
    RenderNodes { rgb, opacity, depth }
}

/// Copies finished render nodes into an image and depth map.
pub fn read_out(tape: &Tape, nodes: &RenderNodes, cam: &Camera) -> (ImageBuffer, DepthMap) {
    let mut img = ImageBuffer::new(cam.height, cam.width, 3);
    for ch in 0..3 {
        let v = tape.value(nodes.rgb[ch]);
        for p in 0..img.npix() {
            img.data[p * 3 + ch] = v[p];
        }
    }
    let mut depth = DepthMap::new(cam.height, cam.width);
    depth.depth.copy_from_slice(tape.value(nodes.depth));
    depth.coverage.copy_from_slice(tape.value(nodes.opacity));
    (img, depth)
}

/// Value-only render of a triplane through a decoder.
pub fn render(
    gen: &crate::gan3d::Generator,
    triplane: &[f64],
    cam: &Camera,
    spec: &SampleSpec,
) -> (ImageBuffer, DepthMap) {
    let mut tape = Tape::new();
    let planes = tape.constant(gen.config.triplane_shape(), triplane.to_vec());
    let dec = gen.decoder_ref(&mut tape);
    let nodes = render_graph(&mut tape, planes, dec, cam, spec);
    read_out(&tape, &nodes, cam)
}

fn hit_sphere(o: [f64; 3], d: [f64; 3], radius: f64) -> Option<(f64, f64)> {
    let b = dot(o, d);
    let c = dot(o, o) - radius * radius;
    let disc = b * b - c;
    if disc <= 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let near = (-b - sq).max(0.0);
    let far = -b + sq;
    (far > near).then_some((near, far))
}

#[inline]
fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
fn neg(a: [f64; 3]) -> [f64; 3] {
    [-a[0], -a[1], -a[2]]
}

#[inline]
fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
fn len(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
fn normalize(a: [f64; 3]) -> [f64; 3] {
    scale(a, 1.0 / len(a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gan3d::{Generator, GeneratorConfig};

    #[test]
    fn front_camera_center_ray_points_at_origin() {
        let cam = Camera { azimuth_deg: 0.0, elevation_deg: 0.0, radius: 2.7, fov_y_deg: 30.0, width: 5, height: 5 };
        let pos = cam.position();
        assert!((pos[0]).abs() < 1e-12 && (pos[1]).abs() < 1e-12 && (pos[2] - 2.7).abs() < 1e-12);
        let dirs = cam.ray_grid();
        let center = dirs[2 * 5 + 2];
        assert!((center[0]).abs() < 1e-12);
        assert!((center[1]).abs() < 1e-12);
        assert!((center[2] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn opposite_azimuth_negates_x_and_z() {
        let a = Camera::orbit(0.0, 0.0, 4, 4).position();
        let b = Camera::orbit(180.0, 0.0, 4, 4).position();
        assert!((a[0] + b[0]).abs() < 1e-9);
        assert!((a[2] + b[2]).abs() < 1e-9);
    }

    #[test]
    fn azimuth_wraps_into_half_open_range() {
        assert_eq!(normalize_azimuth(270.0), -90.0);
        assert_eq!(normalize_azimuth(180.0), -180.0);
        assert_eq!(normalize_azimuth(-180.0), -180.0);
        assert_eq!(normalize_azimuth(539.0), 179.0);
    }

    #[test]
    fn composite_two_half_alpha_samples() {
        let mut tape = Tape::new();
        let ln2 = std::f64::consts::LN_2;
        let sigma = tape.constant(vec![2], vec![ln2, ln2]);
        let (weights, opacity) = composite_graph(&mut tape, sigma, &[1.0, 1.0], 1, 2);
        let w = tape.value(weights);
        assert!((w[0] - 0.5).abs() < 1e-12);
        assert!((w[1] - 0.25).abs() < 1e-12);
        assert!((tape.value(opacity)[0] - 0.75).abs() < 1e-12);
        let colors = tape.constant(vec![1, 2], vec![1.0, 0.0]);
        let weighted = tape.mul(weights, colors);
        let px = tape.sum_last(weighted);
        assert!((tape.value(px)[0] - 0.5).abs() < 1e-12);
    }

    /// Decoder emitting a hugely negative raw density for any feature, so the
    /// zero triplane renders to an empty scene.
    fn empty_scene_generator() -> Generator {
        let mut gen = Generator::init(GeneratorConfig::default(), 1);
        gen.params.get_mut("decoder.b1").values[0] = -40.0;
        gen
    }

    #[test]
    fn zero_triplane_with_zero_density_decoder_renders_black() {
        let gen = empty_scene_generator();
        let cam = Camera::orbit(30.0, 10.0, 8, 8);
        let (img, depth) = render(&gen, &vec![0.0; gen.config.triplane_len()], &cam, &SampleSpec::midpoint(12));
        assert!(img.data.iter().all(|v| v.abs() < 1e-12), "image not black");
        assert!(depth.coverage.iter().all(|v| v.abs() < 1e-12));
    }

    /// Triplane whose interpolated feature field is radially symmetric: every
    /// plane carries c - (a^2 + b^2) in channel 0, so the plane sum is
    /// 3c - 2|p|^2 up to the shared 1D interpolation of the square function.
    fn radial_triplane(config: &GeneratorConfig, c: f64) -> Vec<f64> {
        let r = config.resolution;
        let mut t = vec![0.0; config.triplane_len()];
        for plane in 0..3 {
            for gy in 0..r {
                for gx in 0..r {
                    let a = -1.0 + 2.0 * gx as f64 / (r - 1) as f64;
                    let b = -1.0 + 2.0 * gy as f64 / (r - 1) as f64;
                    t[(plane * config.channels) * r * r + gy * r + gx] = c - (a * a + b * b);
                }
            }
        }
        t
    }

    #[test]
    fn rotationally_symmetric_field_renders_identically_from_orthogonal_views() {
        let gen = Generator::init(GeneratorConfig::default(), 9);
        let t = radial_triplane(&gen.config, 1.2);
        let spec = SampleSpec::midpoint(24);
        let (front, _) = render(&gen, &t, &Camera::orbit(0.0, 0.0, 16, 16), &spec);
        let (side, _) = render(&gen, &t, &Camera::orbit(90.0, 0.0, 16, 16), &spec);
        let diff = crate::image::max_abs_diff(&front, &side);
        assert!(diff < 1e-9, "orthogonal views differ by {diff}");
    }

    #[test]
    fn jitter_seed_is_reproducible_and_matters() {
        let gen = Generator::init(GeneratorConfig::default(), 9);
        let t = radial_triplane(&gen.config, 1.0);
        let cam = Camera::orbit(20.0, 5.0, 8, 8);
        let (a, _) = render(&gen, &t, &cam, &SampleSpec::jittered(8, 42));
        let (b, _) = render(&gen, &t, &cam, &SampleSpec::jittered(8, 42));
        let (c, _) = render(&gen, &t, &cam, &SampleSpec::jittered(8, 43));
        assert_eq!(a.data, b.data);
        assert!(crate::image::max_abs_diff(&a, &c) > 0.0);
    }

    #[test]
    fn render_gradient_wrt_planes_matches_fd() {
        use crate::numgrad::{fd_check, Tape};
        let config = GeneratorConfig { d_latent: 3, hidden: 6, channels: 2, resolution: 2, leaky_slope: 0.2 };
        let gen = Generator::init(config, 4).clone_frozen();
        let cam = Camera::orbit(15.0, -10.0, 3, 3);
        let spec = SampleSpec::midpoint(4);
        let batch = sample_rays(&cam, &spec);
        let build = move |t: &mut Tape, x: crate::numgrad::NodeId| {
            let planes = t.reshape(x, vec![3, 2, 2, 2]);
            let dec = gen.decoder_ref(t);
            let nodes = render_graph_for_batch(t, planes, dec, &batch);
            let parts = t.concat(&[nodes.rgb[0], nodes.rgb[1], nodes.rgb[2], nodes.depth]);
            let sq = t.mul(parts, parts);
            t.sum_all(sq)
        };
        let point: Vec<f64> = (0..24).map(|i| (i as f64 * 0.61).sin() * 0.8).collect();
        let err = fd_check(build, &point, 1e-5).unwrap();
        assert!(err < 1e-4, "fd mismatch {err}");
    }
}
