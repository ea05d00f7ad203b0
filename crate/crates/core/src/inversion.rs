//! The inversion objective and optimization loop.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderModel;
use crate::error::{AtlasError, Result};
use crate::features::{perceptual_distance, perceptual_distance_vars, perceptual_features, perceptual_features_vars};
use crate::generator::{CodeVars, GeneratorModel};
use crate::graph::{Graph, Var};
use crate::imaging::Image;
use crate::optim::{Adam, AdamConfig};
use crate::rng;
use crate::spaces::{
    mapped_samples, retract_rows, sample_z, save_latent, DetailCodes, FCode, HybridCode, LatentCode,
    PnWhitener, Space, WCode, ZCode,
};
use crate::tensor::Tensor;

/// Samples averaged for the mean-w start of W and W⁺ inversions.
pub const MEAN_W_SAMPLES: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionConfig {
    pub space: Space,
    pub iterations: usize,
    pub lr: f64,
    pub lambda_per: f64,
    pub lambda_reg: f64,
    pub lambda_pn: f64,
    /// Overrides the generator's split layer when set.
    pub split_layer: Option<usize>,
    pub seed: u64,
    pub record_every: usize,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            space: Space::FZPlus,
            iterations: 1200,
            lr: 0.01,
            lambda_per: 10.0,
            lambda_reg: 10.0,
            lambda_pn: 1e-3,
            split_layer: None,
            seed: 0,
            record_every: 10,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(AtlasError::Config("iterations must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(AtlasError::Config("step size must be positive".into()));
        }
        if self.record_every == 0 {
            return Err(AtlasError::Config("record_every must be at least 1".into()));
        }
        for (name, v) in [
            ("lambda_per", self.lambda_per),
            ("lambda_reg", self.lambda_reg),
            ("lambda_pn", self.lambda_pn),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(AtlasError::Config(format!("{name} must be a finite value >= 0")));
            }
        }
        Ok(())
    }
}

/// Loss terms at one point; `total` is the weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub perceptual: f64,
    pub reg: f64,
    pub pn: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct InversionResult {
    pub code: LatentCode,
    pub curve: Vec<LossRecord>,
    /// Objective at the returned code.
    pub final_losses: LossBreakdown,
    pub image: Image,
    pub f0: Option<FCode>,
    pub wall_s: f64,
}

/// Everything the objective needs besides the code.
pub struct ObjectiveContext<'a> {
    pub target: &'a Image,
    pub f0: Option<&'a FCode>,
    pub whitener: Option<&'a PnWhitener>,
    pub space: Space,
    pub lambda_per: f64,
    pub lambda_reg: f64,
    pub lambda_pn: f64,
    target_feats: Vec<Tensor>,
}

impl<'a> ObjectiveContext<'a> {
    pub fn new(
        target: &'a Image,
        f0: Option<&'a FCode>,
        whitener: Option<&'a PnWhitener>,
        cfg: &InversionConfig,
    ) -> Result<Self> {
        if cfg.space.uses_pn_penalty() && whitener.is_none() {
            return Err(AtlasError::Config(format!(
                "space {} needs a fitted Pn whitener",
                cfg.space
            )));
        }
        if f0.is_some() && !cfg.space.is_hybrid() {
            return Err(AtlasError::Config(format!(
                "an f0 base code only applies to hybrid spaces, not {}",
                cfg.space
            )));
        }
        Ok(Self {
            target,
            f0,
            whitener,
            space: cfg.space,
            lambda_per: cfg.lambda_per,
            lambda_reg: cfg.lambda_reg,
            lambda_pn: cfg.lambda_pn,
            target_feats: perceptual_features(target),
        })
    }

    /// Records the objective for `code` on `g`; returns the total and the terms.
    fn build(&self, gen: &GeneratorModel, g: &mut Graph, code: &CodeVars) -> (Var, [Var; 4]) {
        let p = gen.bind(g, false);
        let img = gen.render_vars(g, &p, code);
        let target = g.constant(self.target.as_batch());
        let mse = g.mse(img, target);
        let fa = perceptual_features_vars(g, img);
        let fb: Vec<Var> = self.target_feats.iter().map(|t| g.constant(t.clone())).collect();
        let per = perceptual_distance_vars(g, &fa, &fb);
        let wper = g.scale(per, self.lambda_per);
        let mut total = g.add(mse, wper);
        let zero = g.constant(Tensor::scalar(0.0));
        let mut reg = zero;
        let mut pn = zero;
        if let CodeVars::Hybrid {
            f,
            details,
            z_flavored,
        } = *code
        {
            if let Some(f0) = self.f0 {
                let f0v = g.constant(f0.batch_tensor());
                reg = g.mse(f, f0v);
                let w = g.scale(reg, self.lambda_reg);
                total = g.add(total, w);
            }
            if self.space.uses_pn_penalty() && !z_flavored {
                let wh = self.whitener.expect("checked at construction");
                pn = wh.penalty_vars(g, details);
                let w = g.scale(pn, self.lambda_pn);
                total = g.add(total, w);
            }
        }
        (total, [mse, per, reg, pn])
    }

    fn breakdown(g: &Graph, total: Var, terms: [Var; 4]) -> LossBreakdown {
        LossBreakdown {
            mse: g.value(terms[0]).item(),
            perceptual: g.value(terms[1]).item(),
            reg: g.value(terms[2]).item(),
            pn: g.value(terms[3]).item(),
            total: g.value(total).item(),
        }
    }
}

/// `L_MSE + λ_per L_per` for a code against a target.
pub fn reconstruction_loss(
    code: &LatentCode,
    target: &Image,
    gen: &GeneratorModel,
    lambda_per: f64,
) -> Result<LossBreakdown> {
    let img = gen.synthesize(code)?;
    let mse = img.mse(target)?;
    let perceptual = perceptual_distance(target, &img)?;
    Ok(LossBreakdown {
        mse,
        perceptual,
        total: mse + lambda_per * perceptual,
        ..Default::default()
    })
}

/// Mean squared difference between a base code and its encoder estimate.
pub fn base_regularizer(f: &FCode, f0: &FCode) -> Result<f64> {
    let (a, b) = (f.tensor(), f0.tensor());
    if a.shape() != b.shape() {
        return Err(AtlasError::Shape {
            expected: format!("{:?}", b.shape()),
            actual: format!("{:?}", a.shape()),
        });
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.len() as f64)
}

/// The full objective at `code`.
pub fn total_objective(gen: &GeneratorModel, code: &LatentCode, ctx: &ObjectiveContext<'_>) -> Result<LossBreakdown> {
    Ok(objective_gradient(gen, code, ctx, false)?.0)
}

/// The objective and, when `with_grad`, its gradient for every code tensor
/// in layout order (`[codes]` for standalone spaces, `[f, details]` for hybrid).
pub fn objective_gradient(
    gen: &GeneratorModel,
    code: &LatentCode,
    ctx: &ObjectiveContext<'_>,
    with_grad: bool,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    gen.check_code(code)?;
    check_code_space(code, ctx.space)?;
    let mut g = Graph::new();
    let cv = gen.code_vars(&mut g, code, with_grad);
    let (total, terms) = ctx.build(gen, &mut g, &cv);
    let losses = ObjectiveContext::breakdown(&g, total, terms);
    if !with_grad {
        return Ok((losses, Vec::new()));
    }
    let mut grads = g.backward(total);
    let grads = code_leaves(&cv)
        .into_iter()
        .map(|v| grads.take(v).unwrap_or_else(|| Tensor::zeros(g.shape(v))))
        .collect();
    Ok((losses, grads))
}

fn code_leaves(cv: &CodeVars) -> Vec<Var> {
    match *cv {
        CodeVars::Z(v) | CodeVars::ZPlus(v) | CodeVars::W(v) | CodeVars::WPlus(v) => vec![v],
        CodeVars::Hybrid { f, details, .. } => vec![f, details],
    }
}

fn check_code_space(code: &LatentCode, space: Space) -> Result<()> {
    let layout = match space {
        Space::FWPlusPn => Space::FWPlus,
        s => s,
    };
    if code.space() != layout {
        return Err(AtlasError::Input(format!(
            "code is laid out for {} but the objective is for {space}",
            code.space()
        )));
    }
    Ok(())
}

/// Mean of `M(z)` over sphere samples.
pub fn mean_w(gen: &GeneratorModel, count: usize, seed: u64) -> Result<WCode> {
    let ws = mapped_samples(gen, count, seed, "mean-w")?;
    let d = gen.config().latent_dim;
    let mut mean = vec![0.0; d];
    for row in ws.data().chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    Ok(WCode::new(mean))
}

/// Starting code for an inversion, plus `f⁰` for hybrid spaces with an encoder.
pub fn initial_code(
    target: &Image,
    gen: &GeneratorModel,
    encoder: Option<&EncoderModel>,
    cfg: &InversionConfig,
) -> Result<(LatentCode, Option<FCode>)> {
    let c = gen.config();
    let (d, n) = (c.latent_dim, c.num_style_layers);
    let mut r = rng::stream(cfg.seed, "inversion-init");
    let code = match cfg.space {
        Space::Z => LatentCode::Z(sample_z(d, &mut r)),
        Space::ZPlus => LatentCode::ZPlus((0..n).map(|_| sample_z(d, &mut r)).collect()),
        Space::W => LatentCode::W(mean_w(gen, MEAN_W_SAMPLES, cfg.seed)?),
        Space::WPlus => LatentCode::WPlus(vec![mean_w(gen, MEAN_W_SAMPLES, cfg.seed)?; n]),
        space => {
            let tag = space.hybrid_tag().expect("hybrid space");
            let f0 = encoder.map(|e| e.encode(target, c)).transpose()?;
            let f = f0.clone().unwrap_or_else(|| FCode::zeros(c.tap_shape()));
            let k = if tag.broadcasts_detail() { 1 } else { c.num_detail_layers() };
            let zs: Vec<ZCode> = (0..k).map(|_| sample_z(d, &mut r)).collect();
            let details = if tag.is_z_flavored() {
                DetailCodes::Z(zs)
            } else {
                DetailCodes::W(WCode::unstack(&gen.map_batch(&ZCode::stack(&zs))))
            };
            return Ok((LatentCode::Hybrid(HybridCode { space: tag, f, details }), f0));
        }
    };
    Ok((code, None))
}

/// Inverts `target` into `cfg.space`. Hybrid spaces start from `E(x↓)` when
/// an encoder is given and from a zero feature map otherwise.
pub fn invert(
    target: &Image,
    gen: &GeneratorModel,
    encoder: Option<&EncoderModel>,
    whitener: Option<&PnWhitener>,
    cfg: &InversionConfig,
) -> Result<InversionResult> {
    invert_observed(target, gen, encoder, whitener, cfg, |_, _| {})
}

/// [`invert`] that hands every post-step code to `observe(iteration, code)`.
pub fn invert_observed(
    target: &Image,
    gen: &GeneratorModel,
    encoder: Option<&EncoderModel>,
    whitener: Option<&PnWhitener>,
    cfg: &InversionConfig,
    mut observe: impl FnMut(usize, &LatentCode),
) -> Result<InversionResult> {
    cfg.validate()?;
    let gen_split;
    let gen = match cfg.split_layer {
        Some(m) if m != gen.config().split_layer => {
            gen_split = gen.with_split_layer(m)?;
            &gen_split
        }
        _ => gen,
    };
    let c = gen.config();
    if target.height() != c.output_resolution || target.channels() != 3 {
        return Err(AtlasError::Shape {
            expected: format!("[3, {0}, {0}] target", c.output_resolution),
            actual: format!("{:?}", target.tensor().shape()),
        });
    }
    let start = Instant::now();
    let (mut code, f0) = initial_code(target, gen, encoder, cfg)?;
    let ctx = ObjectiveContext::new(target, f0.as_ref(), whitener, cfg)?;
    let d = c.latent_dim;
    let mut leaves = code_tensors(&code);
    let sphere: Vec<bool> = sphere_mask(&code);
    let lens: Vec<usize> = leaves.iter().map(|t| t.len()).collect();
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &lens,
    );
    let mut curve = Vec::with_capacity(cfg.iterations.div_ceil(cfg.record_every));
    for it in 1..=cfg.iterations {
        let (losses, grads) = objective_gradient(gen, &code, &ctx, true)?;
        if !losses.total.is_finite() {
            return Err(AtlasError::Numeric(format!(
                "inversion loss became {} at iteration {it} (last recorded: {:?})",
                losses.total,
                curve.last()
            )));
        }
        if (it - 1) % cfg.record_every == 0 {
            curve.push(LossRecord {
                iteration: it,
                losses,
            });
        }
        opt.begin_step();
        for (slot, (leaf, grad)) in leaves.iter_mut().zip(&grads).enumerate() {
            opt.update(slot, leaf.data_mut(), grad.data(), 1.0);
            if sphere[slot] {
                retract_rows(leaf.data_mut(), d)?;
            }
        }
        code = rebuild_code(&code, &leaves)?;
        observe(it, &code);
    }
    let final_losses = total_objective(gen, &code, &ctx)?;
    let image = gen.synthesize(&code)?;
    Ok(InversionResult {
        code,
        curve,
        final_losses,
        image,
        f0,
        wall_s: start.elapsed().as_secs_f64(),
    })
}

fn code_tensors(code: &LatentCode) -> Vec<Tensor> {
    match code {
        LatentCode::Z(z) => vec![z.row_tensor()],
        LatentCode::W(w) => vec![w.row_tensor()],
        LatentCode::ZPlus(zs) => vec![ZCode::stack(zs)],
        LatentCode::WPlus(ws) => vec![WCode::stack(ws)],
        LatentCode::Hybrid(h) => vec![h.f.tensor().clone(), h.details.to_tensor()],
    }
}

fn sphere_mask(code: &LatentCode) -> Vec<bool> {
    match code {
        LatentCode::Z(_) | LatentCode::ZPlus(_) => vec![true],
        LatentCode::W(_) | LatentCode::WPlus(_) => vec![false],
        LatentCode::Hybrid(h) => vec![false, matches!(h.details, DetailCodes::Z(_))],
    }
}

fn rebuild_code(like: &LatentCode, t: &[Tensor]) -> Result<LatentCode> {
    Ok(match like {
        LatentCode::Z(_) => LatentCode::Z(ZCode::new(t[0].data().to_vec())),
        LatentCode::W(_) => LatentCode::W(WCode::new(t[0].data().to_vec())),
        LatentCode::ZPlus(_) => LatentCode::ZPlus(ZCode::unstack(&t[0])),
        LatentCode::WPlus(_) => LatentCode::WPlus(WCode::unstack(&t[0])),
        LatentCode::Hybrid(h) => LatentCode::Hybrid(HybridCode {
            space: h.space,
            f: FCode::new(t[0].clone())?,
            details: match h.details {
                DetailCodes::Z(_) => DetailCodes::Z(ZCode::unstack(&t[1])),
                DetailCodes::W(_) => DetailCodes::W(WCode::unstack(&t[1])),
            },
        }),
    })
}

/// Rounds every tensor of a code through `f32`, as a save/load cycle does.
pub fn round_code_f32(code: &LatentCode) -> Result<LatentCode> {
    let t: Vec<Tensor> = code_tensors(code).iter().map(Tensor::round_f32).collect();
    rebuild_code(code, &t)
}

#[derive(Serialize)]
struct ResultManifest<'a> {
    format: &'static str,
    config: &'a InversionConfig,
    final_losses: LossBreakdown,
    wall_s: f64,
    iterations_recorded: usize,
    files: [&'static str; 3],
}

/// Writes `manifest.json`, `code.lat`, `recon.png` and `loss.csv` into `dir`.
/// The image is rendered from the `f32`-rounded code that `code.lat` stores.
pub fn save_result(dir: &Path, result: &InversionResult, gen: &GeneratorModel, cfg: &InversionConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| AtlasError::io(dir, e))?;
    let c = gen.config();
    let n = c.num_style_layers;
    let m = cfg.split_layer.unwrap_or(c.split_layer);
    save_latent(&dir.join("code.lat"), &result.code, n, m)?;
    let rounded = round_code_f32(&result.code)?;
    let gen_split;
    let render_gen = if m != c.split_layer {
        gen_split = gen.with_split_layer(m)?;
        &gen_split
    } else {
        gen
    };
    render_gen.synthesize(&rounded)?.save_png(&dir.join("recon.png"))?;
    fs::write(dir.join("loss.csv"), loss_csv(&result.curve)).map_err(|e| AtlasError::io(dir, e))?;
    let manifest = ResultManifest {
        format: "latent-atlas/inversion-v1",
        config: cfg,
        final_losses: result.final_losses,
        wall_s: result.wall_s,
        iterations_recorded: result.curve.len(),
        files: ["code.lat", "recon.png", "loss.csv"],
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| AtlasError::io(&path, e))
}

pub fn loss_csv(curve: &[LossRecord]) -> String {
    let mut s = String::from("iteration,mse,perceptual,reg,pn,total\n");
    for r in curve {
        let l = r.losses;
        s.push_str(&format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}\n",
            r.iteration, l.mse, l.perceptual, l.reg, l.pn, l.total
        ));
    }
    s
}
