//! Frozen random-feature networks: the perceptual extractor φ and the
//! identity proxy embedder.
//!
//! Both are stacks of stride-2 3×3 convolutions with LeakyReLU and weights
//! drawn from fixed seeds, so they are part of the toolkit's assets rather
//! than something trained.

use std::sync::{Arc, OnceLock};

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::imaging::Image;
use crate::rng;
use crate::tensor::Tensor;

const PERCEPTUAL_SEED: u64 = 0x5EED_0F01;
const IDENTITY_SEED: u64 = 0x5EED_1D01;
const FEATURE_SLOPE: f64 = 0.2;

/// A frozen conv stack. `widths[0]` is the input channel count.
#[derive(Debug)]
pub struct FeatureNet {
    layers: Vec<(Arc<Tensor>, Arc<Tensor>)>,
}

impl FeatureNet {
    pub fn seeded(seed: u64, widths: &[usize]) -> Self {
        let mut r = rng::stream(seed, "feature-net");
        let gain = (2.0 / (1.0 + FEATURE_SLOPE * FEATURE_SLOPE)).sqrt();
        let layers = widths
            .windows(2)
            .map(|io| {
                let (cin, cout) = (io[0], io[1]);
                let w = Tensor::randn(&[cout, cin, 3, 3], gain / ((cin * 9) as f64).sqrt(), &mut r);
                let b = Tensor::randn(&[cout], 0.1, &mut r);
                (Arc::new(w), Arc::new(b))
            })
            .collect();
        Self { layers }
    }

    pub fn num_blocks(&self) -> usize {
        self.layers.len()
    }

    /// Weight `[Cout, Cin, 3, 3]` and bias of block `i`.
    pub fn block(&self, i: usize) -> (&Tensor, &Tensor) {
        (&self.layers[i].0, &self.layers[i].1)
    }

    /// Activations after every block for a `[B, C, H, W]` input.
    pub fn blocks_vars(&self, g: &mut Graph, x: Var) -> Vec<Var> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for (w, b) in &self.layers {
            let wv = g.leaf_shared(w.clone(), false);
            let bv = g.leaf_shared(b.clone(), false);
            h = g.conv2d(h, wv, Some(bv), 2, 1);
            h = g.leaky_relu(h, FEATURE_SLOPE);
            out.push(h);
        }
        out
    }
}

/// The perceptual extractor φ: 3 → 16 → 32 → 32 channels.
pub fn perceptual_net() -> &'static FeatureNet {
    static NET: OnceLock<FeatureNet> = OnceLock::new();
    NET.get_or_init(|| FeatureNet::seeded(PERCEPTUAL_SEED, &[3, 16, 32, 32]))
}

/// The identity proxy: 3 → 32 → 64 → 128 channels, pooled to 128-d.
pub fn identity_net() -> &'static FeatureNet {
    static NET: OnceLock<FeatureNet> = OnceLock::new();
    NET.get_or_init(|| FeatureNet::seeded(IDENTITY_SEED, &[3, 32, 64, 128]))
}

/// φ features of a `[B, 3, H, W]` batch: per-block activations with every
/// spatial position scaled to unit channel norm.
pub fn perceptual_features_vars(g: &mut Graph, x: Var) -> Vec<Var> {
    perceptual_net()
        .blocks_vars(g, x)
        .into_iter()
        .map(|a| g.channel_unit_norm(a))
        .collect()
}

/// Perceptual distance between two feature lists, averaged over the batch:
/// for each block, the squared distance of normalized features summed over
/// channels and averaged over positions; blocks are summed.
pub fn perceptual_distance_vars(g: &mut Graph, a: &[Var], b: &[Var]) -> Var {
    let mut total: Option<Var> = None;
    for (&fa, &fb) in a.iter().zip(b) {
        let ch = g.shape(fa)[1] as f64;
        let m = g.mse(fa, fb);
        let term = g.scale(m, ch);
        total = Some(match total {
            Some(t) => g.add(t, term),
            None => term,
        });
    }
    total.expect("feature list is empty")
}

/// Normalized φ features of an image, as constants ready for reuse.
pub fn perceptual_features(img: &Image) -> Vec<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(img.as_batch());
    perceptual_features_vars(&mut g, x)
        .into_iter()
        .map(|v| g.value(v).clone())
        .collect()
}

pub fn perceptual_distance(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    let mut g = Graph::new();
    let xa = g.constant(a.as_batch());
    let xb = g.constant(b.as_batch());
    let fa = perceptual_features_vars(&mut g, xa);
    let fb = perceptual_features_vars(&mut g, xb);
    let d = perceptual_distance_vars(&mut g, &fa, &fb);
    Ok(g.value(d).item())
}

/// 128-d identity embedding (global average of the last block).
pub fn identity_embedding(img: &Image) -> Vec<f64> {
    let mut g = Graph::new();
    let x = g.constant(img.as_batch());
    let blocks = identity_net().blocks_vars(&mut g, x);
    let pooled = g.global_avg_pool(*blocks.last().expect("identity net has blocks"));
    g.value(pooled).data().to_vec()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}
