//! Two-tower network: parameters, forward/backward passes, and the
//! decoupled-weight-decay adaptive-moment optimizer.
//!
//! Each tower is a two-layer affine network with a tanh nonlinearity,
//! applied to pre-featurized inputs; tower outputs are row-normalized into a
//! joint embedding space. All arithmetic is 64-bit and sequential, so
//! training is bit-deterministic; parallelism lives a level up (independent
//! expert jobs) and a level down (distance kernels).

use crate::embed::EmbeddingMatrix;
use crate::error::ModeError;
use crate::kernels::Mat64;
use crate::stream::{derive_rng, gauss};
use crate::Result;

/// Hard cap on exp(logit_scale), applied after every optimizer step.
pub const MAX_LOGIT_SCALE: f64 = 100.0;

/// Number of affine layers in the flat layout (two per tower, weight+bias).
pub const LAYER_COUNT: usize = 8;

/// Tower dimensions. Layer layout (also the checkpoint layer order):
/// image w1, image b1, image w2, image b2, text w1, text b1, text w2,
/// text b2 — with the logit-scale log-value appended as the final scalar of
/// the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TowerShape {
    pub image_dim: usize,
    pub caption_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
}

impl TowerShape {
    pub fn validate(&self) -> Result<()> {
        if self.image_dim == 0 || self.caption_dim == 0 || self.hidden_dim == 0 || self.embed_dim == 0
        {
            return Err(ModeError::Config(format!("tower shape has a zero extent: {self:?}")));
        }
        Ok(())
    }

    /// (rows, cols) of each affine layer, in layout order.
    pub fn layer_shapes(&self) -> [(usize, usize); LAYER_COUNT] {
        let (di, dt, h, k) = (self.image_dim, self.caption_dim, self.hidden_dim, self.embed_dim);
        [(h, di), (1, h), (k, h), (1, k), (h, dt), (1, h), (k, h), (1, k)]
    }

    /// Byte-free flat length: all layer entries plus the logit scale.
    pub fn param_len(&self) -> usize {
        self.layer_shapes().iter().map(|(r, c)| r * c).sum::<usize>() + 1
    }

    /// Range of layer `i` within the flat parameter vector.
    pub fn layer_range(&self, i: usize) -> std::ops::Range<usize> {
        let shapes = self.layer_shapes();
        let start: usize = shapes[..i].iter().map(|(r, c)| r * c).sum();
        start..start + shapes[i].0 * shapes[i].1
    }

    /// Index of the logit-scale log-value (last flat slot).
    pub fn logit_scale_index(&self) -> usize {
        self.param_len() - 1
    }

    /// True for entries that receive weight decay: the four weight matrices,
    /// never biases or the logit scale.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.param_len()];
        for layer in [0, 2, 4, 6] {
            mask[self.layer_range(layer)].fill(true);
        }
        mask
    }
}

/// Flat two-tower parameter vector plus its shape.
#[derive(Clone, Debug, PartialEq)]
pub struct TowerParams {
    shape: TowerShape,
    theta: Vec<f64>,
}

/// Per-tower forward caches needed by the backward pass.
pub struct TowerCache {
    /// Batch input, widened to f64 (B x d).
    x: Mat64,
    /// Post-tanh hidden activations (B x h).
    a: Mat64,
    /// Row norms of the pre-normalization output (length B).
    z_norm: Vec<f64>,
    /// Normalized output embeddings (B x k).
    pub y: Mat64,
}

/// Which tower of the pair to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tower {
    Image,
    Text,
}

impl TowerParams {
    /// Random initialization: weights ~ N(0, 1/fan_in), biases zero, logit
    /// scale at its configured log-value (clamped to the hard cap). Draws
    /// come from the "init" stream of `seed`, in layout order.
    pub fn init(shape: TowerShape, seed: u64, logit_scale_init: f64) -> Result<Self> {
        shape.validate()?;
        let mut rng = derive_rng(seed, "init", 0);
        let mut theta = vec![0.0f64; shape.param_len()];
        for layer in [0usize, 2, 4, 6] {
            let (_, fan_in) = shape.layer_shapes()[layer];
            let scale = 1.0 / (fan_in as f64).sqrt();
            for v in &mut theta[shape.layer_range(layer)] {
                *v = scale * gauss(&mut rng);
            }
        }
        theta[shape.logit_scale_index()] = logit_scale_init.min(MAX_LOGIT_SCALE.ln());
        Ok(Self { shape, theta })
    }

    /// Wrap an explicit flat vector (tests and checkpoint loading).
    pub fn from_theta(shape: TowerShape, theta: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        if theta.len() != shape.param_len() {
            return Err(ModeError::ShapeMismatch {
                context: "flat parameter vector".into(),
                left: theta.len().to_string(),
                right: shape.param_len().to_string(),
            });
        }
        Ok(Self { shape, theta })
    }

    pub fn shape(&self) -> TowerShape {
        self.shape
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn layer(&self, i: usize) -> &[f64] {
        &self.theta[self.shape.layer_range(i)]
    }

    /// Logit-scale log-value.
    pub fn logit_scale(&self) -> f64 {
        self.theta[self.shape.logit_scale_index()]
    }

    pub fn set_logit_scale(&mut self, value: f64) {
        let i = self.shape.logit_scale_index();
        self.theta[i] = value;
    }

    /// Multiplier applied to cosine logits: exp(logit_scale).
    pub fn scale(&self) -> f64 {
        self.logit_scale().exp()
    }

    pub fn all_finite(&self) -> bool {
        self.theta.iter().all(|v| v.is_finite())
    }

    fn tower_layers(&self, tower: Tower) -> (usize, usize, usize, usize, usize) {
        // (w1, b1, w2, b2, input_dim)
        match tower {
            Tower::Image => (0, 1, 2, 3, self.shape.image_dim),
            Tower::Text => (4, 5, 6, 7, self.shape.caption_dim),
        }
    }

    /// Run one tower over a batch, keeping the caches the backward pass
    /// needs. Errors when a pre-normalization row collapses to zero norm.
    pub fn forward(&self, tower: Tower, batch: &EmbeddingMatrix) -> Result<TowerCache> {
        let (w1i, b1i, w2i, b2i, input_dim) = self.tower_layers(tower);
        if batch.dim() != input_dim {
            return Err(ModeError::DimensionMismatch {
                context: "tower input".into(),
                left: batch.dim(),
                right: input_dim,
            });
        }
        let b = batch.rows();
        let h = self.shape.hidden_dim;
        let k = self.shape.embed_dim;
        let (w1, b1, w2, b2) =
            (self.layer(w1i), self.layer(b1i), self.layer(w2i), self.layer(b2i));

        let mut x = Mat64::zeros(b, input_dim);
        for (o, &v) in x.data_mut().iter_mut().zip(batch.data()) {
            *o = v as f64;
        }

        // H = X·W1ᵀ + b1, A = tanh(H)
        let mut a = Mat64::zeros(b, h);
        for i in 0..b {
            let xi = x.row(i);
            let ai = a.row_mut(i);
            for (j, aj) in ai.iter_mut().enumerate() {
                let wj = &w1[j * input_dim..(j + 1) * input_dim];
                let mut acc = b1[j];
                for (xv, wv) in xi.iter().zip(wj) {
                    acc += xv * wv;
                }
                *aj = acc.tanh();
            }
        }

        // Z = A·W2ᵀ + b2, Y = rownorm(Z)
        let mut y = Mat64::zeros(b, k);
        let mut z_norm = vec![0.0f64; b];
        for i in 0..b {
            let ai = a.row(i);
            let yi = y.row_mut(i);
            for (j, yj) in yi.iter_mut().enumerate() {
                let wj = &w2[j * h..(j + 1) * h];
                let mut acc = b2[j];
                for (av, wv) in ai.iter().zip(wj) {
                    acc += av * wv;
                }
                *yj = acc;
            }
            let norm = yi.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 1e-30) {
                return Err(ModeError::NonFinite {
                    context: format!("tower output norm for batch row {i}"),
                });
            }
            for v in yi.iter_mut() {
                *v /= norm;
            }
            z_norm[i] = norm;
        }

        Ok(TowerCache { x, a, z_norm, y })
    }

    /// Backward through one tower given d(loss)/dY; accumulates into the
    /// matching slices of `grad` (flat layout).
    pub fn backward(&self, tower: Tower, cache: &TowerCache, d_y: &Mat64, grad: &mut [f64]) {
        let (w1i, b1i, w2i, b2i, input_dim) = self.tower_layers(tower);
        let b = cache.y.rows();
        let h = self.shape.hidden_dim;
        let k = self.shape.embed_dim;
        let w2 = self.layer(w2i).to_vec();

        // Y = Z/‖Z‖ ⇒ dZ = (dY − (dY·Y)·Y)/‖Z‖
        let mut d_z = Mat64::zeros(b, k);
        for i in 0..b {
            let (yi, dyi) = (cache.y.row(i), d_y.row(i));
            let proj: f64 = dyi.iter().zip(yi).map(|(a, b)| a * b).sum();
            let dzi = d_z.row_mut(i);
            for j in 0..k {
                dzi[j] = (dyi[j] - proj * yi[j]) / cache.z_norm[i];
            }
        }

        // Z = A·W2ᵀ + b2 ⇒ dW2 = dZᵀ·A, db2 = Σ_rows dZ, dA = dZ·W2
        {
            let range = self.shape.layer_range(w2i);
            let gw2 = &mut grad[range];
            for i in 0..b {
                let (dzi, ai) = (d_z.row(i), cache.a.row(i));
                for j in 0..k {
                    let row = &mut gw2[j * h..(j + 1) * h];
                    let d = dzi[j];
                    for (g, av) in row.iter_mut().zip(ai) {
                        *g += d * av;
                    }
                }
            }
        }
        {
            let range = self.shape.layer_range(b2i);
            let gb2 = &mut grad[range];
            for i in 0..b {
                for (g, d) in gb2.iter_mut().zip(d_z.row(i)) {
                    *g += d;
                }
            }
        }
        let mut d_a = Mat64::zeros(b, h);
        for i in 0..b {
            let dzi = d_z.row(i);
            let dai = d_a.row_mut(i);
            for (j, w2j) in w2.chunks_exact(h).enumerate() {
                let d = dzi[j];
                for (g, wv) in dai.iter_mut().zip(w2j) {
                    *g += d * wv;
                }
            }
        }

        // A = tanh(H) ⇒ dH = dA ⊙ (1 − A²)
        let mut d_h = d_a;
        for (dh, av) in d_h.data_mut().iter_mut().zip(cache.a.data()) {
            *dh *= 1.0 - av * av;
        }

        // H = X·W1ᵀ + b1 ⇒ dW1 = dHᵀ·X, db1 = Σ_rows dH
        {
            let range = self.shape.layer_range(w1i);
            let gw1 = &mut grad[range];
            for i in 0..b {
                let (dhi, xi) = (d_h.row(i), cache.x.row(i));
                for j in 0..h {
                    let row = &mut gw1[j * input_dim..(j + 1) * input_dim];
                    let d = dhi[j];
                    for (g, xv) in row.iter_mut().zip(xi) {
                        *g += d * xv;
                    }
                }
            }
        }
        {
            let range = self.shape.layer_range(b1i);
            let gb1 = &mut grad[range];
            for i in 0..b {
                for (g, d) in gb1.iter_mut().zip(d_h.row(i)) {
                    *g += d;
                }
            }
        }
    }

    /// Embed a batch of images into the joint space (unit rows).
    pub fn embed_images(&self, batch: &EmbeddingMatrix) -> Result<Mat64> {
        Ok(self.forward(Tower::Image, batch)?.y)
    }

    /// Embed a batch of captions/metadata texts into the joint space.
    pub fn embed_texts(&self, batch: &EmbeddingMatrix) -> Result<Mat64> {
        Ok(self.forward(Tower::Text, batch)?.y)
    }
}

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64, len: usize) -> Self {
        Self { lr, beta1, beta2, eps, weight_decay, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    /// One update step. Decay applies only where `decay_mask` is true.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], decay_mask: &[bool]) {
        assert_eq!(theta.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        assert_eq!(decay_mask.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            let mut update = m_hat / (v_hat.sqrt() + self.eps);
            if decay_mask[i] {
                update += self.weight_decay * theta[i];
            }
            theta[i] -= self.lr * update;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_shape() -> TowerShape {
        TowerShape { image_dim: 3, caption_dim: 4, hidden_dim: 5, embed_dim: 2 }
    }

    #[test]
    fn layout_ranges_tile_the_vector_exactly() {
        let shape = tiny_shape();
        let mut covered = 0usize;
        for i in 0..LAYER_COUNT {
            let range = shape.layer_range(i);
            assert_eq!(range.start, covered);
            covered = range.end;
        }
        assert_eq!(covered + 1, shape.param_len());
        assert_eq!(shape.logit_scale_index(), covered);
        let mask = shape.decay_mask();
        let decayed = mask.iter().filter(|&&d| d).count();
        let weights: usize =
            [0, 2, 4, 6].iter().map(|&l| shape.layer_range(l).len()).sum();
        assert_eq!(decayed, weights);
        assert!(!mask[shape.logit_scale_index()]);
    }

    #[test]
    fn init_is_deterministic_and_finite() {
        let a = TowerParams::init(tiny_shape(), 5, (1.0f64 / 0.07).ln()).unwrap();
        let b = TowerParams::init(tiny_shape(), 5, (1.0f64 / 0.07).ln()).unwrap();
        assert_eq!(a.theta(), b.theta());
        assert!(a.all_finite());
        // Biases start at zero.
        assert!(a.layer(1).iter().all(|&v| v == 0.0));
        assert!(a.layer(3).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_rows_are_unit_norm() {
        let params = TowerParams::init(tiny_shape(), 9, 0.0).unwrap();
        let batch = EmbeddingMatrix::from_rows(&[
            vec![0.2f32, -0.4, 0.6],
            vec![1.0, 0.0, -1.0],
            vec![0.0, 0.5, 0.25],
        ])
        .unwrap();
        let cache = params.forward(Tower::Image, &batch).unwrap();
        for i in 0..3 {
            let n: f64 = cache.y.row(i).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn optimizer_decays_only_masked_entries() {
        let mut theta = vec![1.0f64, 1.0];
        let grad = vec![0.0f64, 0.0];
        let mask = vec![true, false];
        let mut opt = AdamW::new(0.1, 0.9, 0.98, 1e-6, 0.5, 2);
        opt.step(&mut theta, &grad, &mask);
        // Zero gradient: only the decayed slot moves.
        assert!((theta[0] - (1.0 - 0.1 * 0.5)).abs() < 1e-12);
        assert_eq!(theta[1], 1.0);
    }
}
