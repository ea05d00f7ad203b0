//! Adversarial training of the toy generator.

use serde::{Deserialize, Serialize};

use crate::checkpoint::{BoundParams, ParamId, ParamStore};
use crate::error::{AtlasError, Result};
use crate::features::perceptual_net;
use crate::generator::{GeneratorConfig, GeneratorModel, LEAKY_SLOPE};
use crate::graph::{Graph, Var};
use crate::optim::{Adam, AdamConfig};
use crate::rng;
use crate::spaces::sample_z_batch;
use crate::tensor::Tensor;
use crate::toy::ToyDataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub seed: u64,
    /// Seed of the toy dataset the generator learns.
    pub dataset_seed: u64,
    /// Distinct dataset images cycled through during training.
    pub dataset_size: u64,
    /// Steps between quality evaluations (0: only first and last).
    pub eval_every: usize,
    pub eval_samples: usize,
    /// Decay of the weight average that is evaluated and returned; 0 returns
    /// the raw weights.
    pub ema_beta: f64,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch_size: 16,
            lr_g: 2e-3,
            lr_d: 2e-3,
            seed: 0,
            dataset_seed: 0,
            dataset_size: 20_000,
            eval_every: 500,
            eval_samples: 256,
            ema_beta: 0.999,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GanStep {
    pub step: usize,
    pub loss_d: f64,
    pub loss_g: f64,
    /// Real-vs-fake feature statistics gap, when evaluated at this step.
    pub quality_gap: Option<f64>,
}

/// A small convolutional critic for `[B, 3, R, R]` images.
pub struct Discriminator {
    params: ParamStore,
    convs: Vec<(ParamId, ParamId, usize)>,
    fc: (ParamId, ParamId),
    flat: usize,
}

impl Discriminator {
    pub fn new(resolution: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "discriminator-init");
        let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
        let mut params = ParamStore::new();
        let mut convs = Vec::new();
        let mut cin = 3;
        let mut res = resolution;
        let mut widths = vec![(16, 1)];
        while res > 4 {
            let c = (cin.max(16) * 2).min(64);
            widths.push((c, 2));
            res /= 2;
            cin = c;
        }
        cin = 3;
        for (i, &(c, stride)) in widths.iter().enumerate() {
            let w = params.insert(
                format!("conv.{i}.weight"),
                Tensor::randn(&[c, cin, 3, 3], gain / ((cin * 9) as f64).sqrt(), &mut r),
            );
            let b = params.insert(format!("conv.{i}.bias"), Tensor::zeros(&[c]));
            convs.push((w, b, stride));
            cin = c;
        }
        let flat = (cin + 1) * res * res;
        let fw = params.insert("fc.weight", Tensor::randn(&[1, flat], 1.0 / (flat as f64).sqrt(), &mut r));
        let fb = params.insert("fc.bias", Tensor::zeros(&[1]));
        Self {
            params,
            convs,
            fc: (fw, fb),
            flat,
        }
    }

    /// Logits `[B, 1]`.
    pub fn forward_vars(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Var {
        let batch = g.shape(x)[0];
        let mut h = x;
        for &(w, b, stride) in &self.convs {
            h = g.conv2d(h, p.var(w), Some(p.var(b)), stride, 1);
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        let h = g.minibatch_std(h);
        let flat = g.reshape(h, &[batch, self.flat]);
        g.linear(flat, p.var(self.fc.0), Some(p.var(self.fc.1)))
    }
}

/// Renders `[B, 3, R, R]` images for a `[B, d]` batch of sphere codes.
fn render_batch(gen: &GeneratorModel, g: &mut Graph, p: &BoundParams, zs: Var) -> Var {
    let n = gen.config().num_style_layers;
    let w = gen.map_vars(g, p, zs);
    let x = gen.layers_vars(g, p, 1, n, None, &vec![w; n]);
    gen.to_rgb_vars(g, p, x)
}

/// Pixel channel means and stds plus pooled φ activations, per image.
fn image_statistics(batch: &Tensor) -> Vec<Vec<f64>> {
    let s = batch.shape();
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut g = Graph::new();
    let x = g.constant(batch.clone());
    let blocks = perceptual_net().blocks_vars(&mut g, x);
    let pooled: Vec<Tensor> = blocks
        .iter()
        .map(|&v| {
            let p = g.global_avg_pool(v);
            g.value(p).clone()
        })
        .collect();
    (0..b)
        .map(|i| {
            let mut feats = Vec::new();
            for ch in 0..c {
                let plane = &batch.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                let mean = plane.iter().sum::<f64>() / hw as f64;
                let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / hw as f64;
                feats.push(mean);
                feats.push(var.sqrt());
            }
            for p in &pooled {
                let k = p.shape()[1];
                feats.extend_from_slice(&p.data()[i * k..(i + 1) * k]);
            }
            feats
        })
        .collect()
}

fn moments(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let k = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; k];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut std = vec![0.0; k];
    for r in rows {
        for ((s, v), m) in std.iter_mut().zip(r).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    std.iter_mut().for_each(|s| *s = s.sqrt());
    (mean, std)
}

/// Diagonal Fréchet-style gap between image-statistic distributions of two
/// batches: `‖μ_a − μ_b‖² + ‖σ_a − σ_b‖²`.
pub fn statistics_gap(a: &Tensor, b: &Tensor) -> f64 {
    let (ma, sa) = moments(&image_statistics(a));
    let (mb, sb) = moments(&image_statistics(b));
    let d2 = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
    d2(&ma, &mb) + d2(&sa, &sb)
}

/// Statistics gap between `count` generator samples and toy images.
pub fn quality_gap(gen: &GeneratorModel, data: &ToyDataset, count: usize, seed: u64) -> f64 {
    let real = data.batch(u64::MAX / 2, count);
    let fake = sample_images(gen, count, seed);
    statistics_gap(&real, &fake)
}

/// `[count, 3, R, R]` generator samples.
pub fn sample_images(gen: &GeneratorModel, count: usize, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, "quality-samples");
    let zs = sample_z_batch(gen.config().latent_dim, count, &mut r);
    let mut out = Vec::new();
    for chunk in zs.data().chunks(64 * gen.config().latent_dim) {
        let rows = chunk.len() / gen.config().latent_dim;
        let mut g = Graph::new();
        let p = gen.bind(&mut g, false);
        let z = g.constant(Tensor::from_parts(vec![rows, gen.config().latent_dim], chunk.to_vec()));
        let x = render_batch(gen, &mut g, &p, z);
        out.extend_from_slice(g.value(x).data());
    }
    let r = gen.config().output_resolution;
    Tensor::from_parts(vec![count, 3, r, r], out)
}

/// Trains a freshly initialized generator on the toy dataset with the
/// non-saturating logistic loss.
pub fn train_generator(
    config: GeneratorConfig,
    cfg: &GanTrainConfig,
    mut progress: impl FnMut(&GanStep),
) -> Result<(GeneratorModel, Vec<GanStep>)> {
    if cfg.batch_size == 0 || !(cfg.lr_g > 0.0) || !(cfg.lr_d > 0.0) || cfg.dataset_size == 0 {
        return Err(AtlasError::Config(
            "GAN training needs batch_size > 0, dataset_size > 0 and positive learning rates".into(),
        ));
    }
    if !(0.0..1.0).contains(&cfg.ema_beta) {
        return Err(AtlasError::Config(format!("ema_beta must be in [0, 1), got {}", cfg.ema_beta)));
    }
    let mut gen = GeneratorModel::new(config)?;
    let mut ema = gen.clone();
    let res = gen.config().output_resolution;
    let d = gen.config().latent_dim;
    let data = ToyDataset::new(res, cfg.dataset_seed);
    let mut disc = Discriminator::new(res, cfg.seed);
    let adam = |lr| AdamConfig {
        lr,
        beta1: 0.0,
        beta2: 0.99,
        eps: 1e-8,
    };
    let mut opt_g = Adam::for_store(adam(cfg.lr_g), gen.params());
    let mut opt_d = Adam::for_store(adam(cfg.lr_d), &disc.params);
    let mut r = rng::stream(cfg.seed, "gan-train");
    let mut history = Vec::with_capacity(cfg.steps);
    let eval = |g: &GeneratorModel| quality_gap(g, &data, cfg.eval_samples, cfg.seed);
    if cfg.steps == 0 {
        return Ok((gen, history));
    }
    let mut cursor = 0u64;
    for step in 0..cfg.steps {
        let gap = if step == 0 || (cfg.eval_every > 0 && step % cfg.eval_every == 0) {
            Some(eval(&ema))
        } else {
            None
        };
        let real = {
            let b = cfg.batch_size as u64;
            let start = cursor % cfg.dataset_size;
            cursor += b;
            if start + b <= cfg.dataset_size {
                data.batch(start, cfg.batch_size)
            } else {
                let parts: Vec<Tensor> = (0..b).map(|i| data.batch((start + i) % cfg.dataset_size, 1)).collect();
                Tensor::cat_rows(&parts.iter().collect::<Vec<_>>())?
            }
        };
        let zs = sample_z_batch(d, cfg.batch_size, &mut r);
        let mut g = Graph::new();
        let gp = gen.bind(&mut g, true);
        let dp = disc.params.bind(&mut g, true);
        let zv = g.constant(zs);
        let fake = render_batch(&gen, &mut g, &gp, zv);
        let fake_det = g.constant(g.value(fake).clone());
        let real_v = g.constant(real);
        let d_real = disc.forward_vars(&mut g, &dp, real_v);
        let d_fake_det = disc.forward_vars(&mut g, &dp, fake_det);
        let l_real = g.softplus_mean(d_real, -1.0);
        let l_fake = g.softplus_mean(d_fake_det, 1.0);
        let loss_d = g.add(l_real, l_fake);
        let d_fake = disc.forward_vars(&mut g, &dp, fake);
        let loss_g = g.softplus_mean(d_fake, -1.0);
        let rec = GanStep {
            step,
            loss_d: g.value(loss_d).item(),
            loss_g: g.value(loss_g).item(),
            quality_gap: gap,
        };
        if !rec.loss_d.is_finite() || !rec.loss_g.is_finite() {
            return Err(AtlasError::Numeric(format!(
                "GAN training diverged at step {step}: loss_d {} loss_g {}",
                rec.loss_d, rec.loss_g
            )));
        }
        let mut grads_d = g.backward(loss_d);
        let mut grads_g = g.backward(loss_g);
        drop(g);
        opt_d.step_store(&mut disc.params, &dp, &mut grads_d, |_| 1.0);
        let mults: Vec<f64> = gen.params().ids().map(|id| gen.lr_multiplier(id)).collect();
        opt_g.step_store(gen.params_mut(), &gp, &mut grads_g, |id| mults[id.0]);
        let beta = cfg.ema_beta.min((1.0 + step as f64) / (10.0 + step as f64));
        let ids: Vec<_> = gen.params().ids().collect();
        for id in ids {
            let src = gen.params().get(id).data();
            let dst = ema.params_mut().get_mut(id).data_mut();
            for (e, v) in dst.iter_mut().zip(src) {
                *e = beta * *e + (1.0 - beta) * v;
            }
        }
        progress(&rec);
        history.push(rec);
    }
    let last = GanStep {
        step: cfg.steps,
        loss_d: f64::NAN,
        loss_g: f64::NAN,
        quality_gap: Some(eval(&ema)),
    };
    progress(&last);
    history.push(last);
    Ok((ema, history))
}

/// CSV of a training history; steps without an evaluation leave the gap empty.
pub fn history_csv(history: &[GanStep]) -> String {
    let mut s = String::from("step,loss_d,loss_g,quality_gap\n");
    for h in history {
        let gap = h.quality_gap.map(|v| format!("{v:.9e}")).unwrap_or_default();
        let f = |v: f64| if v.is_finite() { format!("{v:.9e}") } else { String::new() };
        s.push_str(&format!("{},{},{},{}\n", h.step, f(h.loss_d), f(h.loss_g), gap));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> GanTrainConfig {
        GanTrainConfig {
            steps: 3,
            batch_size: 2,
            eval_samples: 8,
            dataset_size: 5,
            ..Default::default()
        }
    }

    #[test]
    fn rejects_bad_average_decay() {
        let cfg = GanTrainConfig {
            ema_beta: 1.0,
            ..tiny()
        };
        assert!(train_generator(GeneratorConfig::micro(), &cfg, |_| {}).is_err());
    }

    #[test]
    fn zero_steps_return_the_initial_model() {
        let cfg = GanTrainConfig {
            steps: 0,
            ..tiny()
        };
        let (g, hist) = train_generator(GeneratorConfig::micro(), &cfg, |_| {}).unwrap();
        let fresh = GeneratorModel::new(GeneratorConfig::micro()).unwrap();
        assert!(hist.is_empty());
        for id in fresh.params().ids() {
            assert_eq!(fresh.params().get(id), g.params().get(id));
        }
    }

    #[test]
    fn training_is_seeded() {
        let (a, ha) = train_generator(GeneratorConfig::micro(), &tiny(), |_| {}).unwrap();
        let (b, hb) = train_generator(GeneratorConfig::micro(), &tiny(), |_| {}).unwrap();
        assert_eq!(history_csv(&ha), history_csv(&hb));
        for id in a.params().ids() {
            assert_eq!(a.params().get(id), b.params().get(id));
        }
    }

    #[test]
    fn statistics_gap_is_zero_on_identical_batches() {
        let ds = ToyDataset::new(8, 0);
        let x = ds.batch(0, 4);
        assert_eq!(statistics_gap(&x, &x), 0.0);
        assert!(statistics_gap(&x, &ds.batch(10, 4)) > 0.0);
    }
}
