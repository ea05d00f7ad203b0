//! The feature encoder E: image → F, trained only on generator samples.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, ParamId, ParamStore, ENCODER_FORMAT};
use crate::error::{AtlasError, Result};
use crate::features::{perceptual_distance_vars, perceptual_features_vars};
use crate::generator::{GeneratorConfig, GeneratorModel, LEAKY_SLOPE};
use crate::graph::{Graph, Var};
use crate::imaging::Image;
use crate::optim::{Adam, AdamConfig};
use crate::rng;
use crate::spaces::{sample_z_batch, FCode};
use crate::tensor::Tensor;

/// Input side of the encoder: `min(output, 8 × tap)` pixels.
pub fn encoder_input_resolution(cfg: &GeneratorConfig) -> usize {
    cfg.output_resolution.min(8 * cfg.tap_resolution())
}

/// Area-downsamples a generator-resolution image to the encoder input size.
pub fn downsample(x: &Image, cfg: &GeneratorConfig) -> Result<Image> {
    if x.height() != cfg.output_resolution || x.width() != cfg.output_resolution {
        return Err(AtlasError::Shape {
            expected: format!("{0}x{0} image", cfg.output_resolution),
            actual: format!("{}x{}", x.height(), x.width()),
        });
    }
    x.area_downsample(encoder_input_resolution(cfg))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_resolution: usize,
    /// `[C, h, w]` of the generator tap.
    pub tap_shape: [usize; 3],
    /// Width of the stride-1 stem followed by one width per stride-2 block.
    pub widths: Vec<usize>,
    pub init_seed: u64,
}

impl EncoderConfig {
    /// A stride-1 stem plus one stride-2 block per halving from the input
    /// resolution down to the tap resolution.
    pub fn for_generator(cfg: &GeneratorConfig, init_seed: u64) -> Self {
        let input_resolution = encoder_input_resolution(cfg);
        let halvings = (input_resolution / cfg.tap_resolution()).trailing_zeros() as usize;
        let mut widths = vec![16];
        for i in 0..halvings {
            widths.push((32 << i).min(64));
        }
        Self {
            input_resolution,
            tap_shape: cfg.tap_shape(),
            widths,
            init_seed,
        }
    }

    fn validate(&self) -> Result<()> {
        let ratio = self.input_resolution / self.tap_shape[1];
        if ratio == 0
            || !ratio.is_power_of_two()
            || ratio * self.tap_shape[1] != self.input_resolution
            || self.widths.len() != ratio.trailing_zeros() as usize + 1
        {
            return Err(AtlasError::Config(format!(
                "encoder widths {:?} cannot map {} pixels to a {:?} tap",
                self.widths, self.input_resolution, self.tap_shape
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_enc: f64,
    pub seed: u64,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 8,
            lr: 2e-3,
            lambda_enc: 10.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderModel {
    config: EncoderConfig,
    params: ParamStore,
    convs: Vec<(ParamId, ParamId)>,
    head: (ParamId, ParamId),
}

impl EncoderModel {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(config.init_seed, "encoder-init");
        let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
        let mut params = ParamStore::new();
        let mut cin = 3;
        let mut convs = Vec::new();
        for (i, &c) in config.widths.iter().enumerate() {
            let w = params.insert(
                format!("conv.{i}.weight"),
                Tensor::randn(&[c, cin, 3, 3], gain / ((cin * 9) as f64).sqrt(), &mut r),
            );
            let b = params.insert(format!("conv.{i}.bias"), Tensor::zeros(&[c]));
            convs.push((w, b));
            cin = c;
        }
        let tc = config.tap_shape[0];
        let hw = params.insert(
            "head.weight",
            Tensor::randn(&[tc, cin, 1, 1], 1.0 / (cin as f64).sqrt(), &mut r),
        );
        let hb = params.insert("head.bias", Tensor::zeros(&[tc]));
        Ok(Self {
            config,
            params,
            convs,
            head: (hw, hb),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// `[B, 3, r, r]` downsampled images → `[B, C, h, w]` feature maps.
    pub fn forward_vars(&self, g: &mut Graph, p: &checkpoint::BoundParams, x: Var) -> Var {
        let mut h = x;
        for (i, &(w, b)) in self.convs.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            h = g.conv2d(h, p.var(w), Some(p.var(b)), stride, 1);
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        g.conv2d(h, p.var(self.head.0), Some(p.var(self.head.1)), 1, 0)
    }

    /// `f⁰ = E(x↓)` for a generator-resolution image.
    pub fn encode(&self, x: &Image, gen: &GeneratorConfig) -> Result<FCode> {
        if gen.tap_shape() != self.config.tap_shape {
            return Err(AtlasError::Config(format!(
                "encoder predicts a {:?} tap but the generator taps {:?}",
                self.config.tap_shape,
                gen.tap_shape()
            )));
        }
        let small = downsample(x, gen)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(small.as_batch());
        let f = self.forward_vars(&mut g, &p, xv);
        FCode::from_batch(g.value(f))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save(dir, ENCODER_FORMAT, &self.config, &self.params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (config, loaded): (EncoderConfig, ParamStore) = checkpoint::load(dir, ENCODER_FORMAT)?;
        let mut model = Self::new(config)?;
        checkpoint::restore_into(dir, &mut model.params, loaded)?;
        Ok(model)
    }
}

/// Per-step training losses.
#[derive(Clone, Debug, Serialize)]
pub struct EncoderStep {
    pub step: usize,
    pub mse: f64,
    pub feature: f64,
    pub total: f64,
}

/// Fits the encoder on generator samples: each step draws `z`, renders
/// `x = G(z)`, and minimizes `‖G(E(x↓), w) − x‖² + λ_enc ‖φ(G(E(x↓), w)) − φ(x)‖²`
/// with `w = M(z)` known for the detail layers.
pub fn train_encoder(
    gen: &GeneratorModel,
    enc_config: EncoderConfig,
    cfg: &EncoderTrainConfig,
) -> Result<(EncoderModel, Vec<EncoderStep>)> {
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) || cfg.lambda_enc < 0.0 {
        return Err(AtlasError::Config(
            "encoder training needs batch_size > 0, lr > 0 and lambda_enc >= 0".into(),
        ));
    }
    let mut enc = EncoderModel::new(enc_config)?;
    if enc.config.tap_shape != gen.config().tap_shape() {
        return Err(AtlasError::Config("encoder tap shape does not match the generator".into()));
    }
    let gc = gen.config().clone();
    let (n, m) = (gc.num_style_layers, gc.split_layer);
    let d = gc.latent_dim;
    let mut opt = Adam::for_store(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &enc.params,
    );
    let mut r = rng::stream(cfg.seed, "encoder-train");
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let zs = sample_z_batch(d, cfg.batch_size, &mut r);
        let ws = gen.map_batch(&zs);
        let mut g = Graph::new();
        let gp = gen.bind(&mut g, false);
        let wv = g.constant(ws);
        let styles = vec![wv; n];
        let x = {
            let feats = gen.layers_vars(&mut g, &gp, 1, n, None, &styles);
            gen.to_rgb_vars(&mut g, &gp, feats)
        };
        let x_img = g.value(x).clone();
        let small = downsample_batch(&x_img, gc.output_resolution / enc.config.input_resolution);
        let xs = g.constant(small);
        let ep = enc.params.bind(&mut g, true);
        let f = enc.forward_vars(&mut g, &ep, xs);
        let tail = gen.layers_vars(&mut g, &gp, m, n, Some(f), &styles[m - 1..]);
        let recon = gen.to_rgb_vars(&mut g, &gp, tail);
        let target = g.constant(x_img);
        let mse = g.mse(recon, target);
        let fa = perceptual_features_vars(&mut g, recon);
        let fb = perceptual_features_vars(&mut g, target);
        let feature = perceptual_distance_vars(&mut g, &fa, &fb);
        let weighted = g.scale(feature, cfg.lambda_enc);
        let total = g.add(mse, weighted);
        let rec = EncoderStep {
            step,
            mse: g.value(mse).item(),
            feature: g.value(feature).item(),
            total: g.value(total).item(),
        };
        if !rec.total.is_finite() {
            return Err(AtlasError::Numeric(format!(
                "encoder loss became {} at step {step}",
                rec.total
            )));
        }
        let mut grads = g.backward(total);
        drop(g);
        opt.step_store(&mut enc.params, &ep, &mut grads, |_| 1.0);
        history.push(rec);
    }
    Ok((enc, history))
}

/// Area-averages a `[B, C, H, W]` batch by an integer factor.
fn downsample_batch(x: &Tensor, factor: usize) -> Tensor {
    if factor == 1 {
        return x.clone();
    }
    let s = x.shape();
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let (ho, wo) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let src = x.data();
    let mut out = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = 0.0;
                for di in 0..factor {
                    for dj in 0..factor {
                        acc += src[(p * h + i * factor + di) * w + j * factor + dj];
                    }
                }
                out[(p * ho + i) * wo + j] = acc * norm;
            }
        }
    }
    Tensor::from_parts(vec![s[0], s[1], ho, wo], out)
}
