//! A small style-based generator.
//!
//! The mapping network turns a prior code `z` into a style code `w`. The
//! synthesis network starts from a learned constant and runs `N` style layers;
//! each layer applies (upsample →) 3×3 conv → LeakyReLU → AdaIN with a
//! per-layer affine style. Layers come in pairs per resolution, so
//! `N = 2·log2(output / base) + 2`. The feature map entering layer `M` is the
//! tap that defines the F space. Noise inputs are fixed to zero.

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, BoundParams, ParamId, ParamStore, GENERATOR_FORMAT};
use crate::error::{AtlasError, Result};
use crate::graph::{Graph, Var};
use crate::imaging::Image;
use crate::rng;
use crate::spaces::{DetailCodes, FCode, LatentCode, WCode, ZCode};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    pub num_style_layers: usize,
    pub split_layer: usize,
    pub mapping_depth: usize,
    pub base_resolution: usize,
    pub output_resolution: usize,
    /// Channel count per resolution, base resolution first.
    pub channels: Vec<usize>,
    pub init_seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl GeneratorConfig {
    /// d = 64, 32×32 output, N = 8, M = 3.
    pub fn desk() -> Self {
        Self {
            latent_dim: 64,
            num_style_layers: 8,
            split_layer: 3,
            mapping_depth: 8,
            base_resolution: 4,
            output_resolution: 32,
            channels: vec![32, 32, 16, 8],
            init_seed: 0,
        }
    }

    /// d = 8, 8×8 output; used for gradient checks.
    pub fn micro() -> Self {
        Self {
            latent_dim: 8,
            num_style_layers: 4,
            split_layer: 3,
            mapping_depth: 2,
            base_resolution: 4,
            output_resolution: 8,
            channels: vec![4, 4],
            init_seed: 0,
        }
    }

    pub fn num_upsamples(&self) -> usize {
        (self.output_resolution / self.base_resolution).trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AtlasError::Config(m));
        if self.latent_dim == 0 || self.mapping_depth == 0 {
            return bad("latent_dim and mapping_depth must be positive".into());
        }
        if !self.base_resolution.is_power_of_two() || !self.output_resolution.is_power_of_two() {
            return bad("resolutions must be powers of two".into());
        }
        if self.output_resolution < self.base_resolution || self.output_resolution > 128 {
            return bad("output_resolution must be in [base_resolution, 128]".into());
        }
        let ups = self.num_upsamples();
        if self.channels.len() != ups + 1 || self.channels.contains(&0) {
            return bad(format!(
                "channels must list {} positive counts, got {:?}",
                ups + 1,
                self.channels
            ));
        }
        if self.num_style_layers != 2 * ups + 2 {
            return bad(format!(
                "num_style_layers must be {} for this resolution range, got {}",
                2 * ups + 2,
                self.num_style_layers
            ));
        }
        if self.split_layer < 1 || self.split_layer > self.num_style_layers {
            return bad(format!(
                "split_layer must be in 1..={}, got {}",
                self.num_style_layers, self.split_layer
            ));
        }
        Ok(())
    }

    /// Output channels of style layer `i` (1-based).
    pub fn layer_channels(&self, i: usize) -> usize {
        self.channels[(i - 1) / 2]
    }

    /// Output resolution of style layer `i` (1-based).
    pub fn layer_resolution(&self, i: usize) -> usize {
        self.base_resolution << ((i - 1) / 2)
    }

    /// Shape `[C, h, w]` of the feature map entering layer `M`.
    pub fn tap_shape(&self) -> [usize; 3] {
        let m = self.split_layer;
        if m == 1 {
            let r = self.base_resolution;
            [self.channels[0], r, r]
        } else {
            let r = self.layer_resolution(m - 1);
            [self.layer_channels(m - 1), r, r]
        }
    }

    pub fn tap_resolution(&self) -> usize {
        self.tap_shape()[1]
    }

    /// Number of detail layers `M..=N`.
    pub fn num_detail_layers(&self) -> usize {
        self.num_style_layers - self.split_layer + 1
    }
}

#[derive(Clone, Debug)]
struct GenIds {
    mapping: Vec<(ParamId, ParamId)>,
    const_input: ParamId,
    style: Vec<(ParamId, ParamId)>,
    conv: Vec<Option<(ParamId, ParamId)>>,
    to_rgb: (ParamId, ParamId),
}

/// Graph-level view of a latent code: the tensors an optimizer updates.
#[derive(Clone, Copy, Debug)]
pub enum CodeVars {
    /// `[1, d]`
    Z(Var),
    /// `[N, d]`
    ZPlus(Var),
    /// `[1, d]`
    W(Var),
    /// `[N, d]`
    WPlus(Var),
    /// `f: [1, C, h, w]`, `details: [k, d]` where `k` is 1 for a broadcast code.
    Hybrid {
        f: Var,
        details: Var,
        z_flavored: bool,
    },
}

#[derive(Clone, Debug)]
pub struct GeneratorModel {
    config: GeneratorConfig,
    params: ParamStore,
    ids: GenIds,
}

impl GeneratorModel {
    /// Freshly initialized model; weights drawn from `config.init_seed`.
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(config.init_seed, "generator-init");
        let d = config.latent_dim;
        let n = config.num_style_layers;
        let mut params = ParamStore::new();
        let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
        let mapping = (0..config.mapping_depth)
            .map(|i| {
                let w = params.insert(
                    format!("mapping.{i}.weight"),
                    Tensor::randn(&[d, d], gain / (d as f64).sqrt(), &mut r),
                );
                let b = params.insert(format!("mapping.{i}.bias"), Tensor::zeros(&[d]));
                (w, b)
            })
            .collect();
        let c0 = config.channels[0];
        let base = config.base_resolution;
        let const_input =
            params.insert("const", Tensor::randn(&[1, c0, base, base], 1.0, &mut r));
        let mut style = Vec::with_capacity(n);
        let mut conv = Vec::with_capacity(n);
        for i in 1..=n {
            let c = config.layer_channels(i);
            let sw = params.insert(
                format!("style.{i}.weight"),
                Tensor::randn(&[2 * c, d], 0.5 / (d as f64).sqrt(), &mut r),
            );
            let sb = params.insert(format!("style.{i}.bias"), Tensor::zeros(&[2 * c]));
            style.push((sw, sb));
            if i == 1 {
                conv.push(None);
            } else {
                let cin = config.layer_channels(i - 1);
                let cw = params.insert(
                    format!("conv.{i}.weight"),
                    Tensor::randn(&[c, cin, 3, 3], gain / ((cin * 9) as f64).sqrt(), &mut r),
                );
                let cb = params.insert(format!("conv.{i}.bias"), Tensor::zeros(&[c]));
                conv.push(Some((cw, cb)));
            }
        }
        let cl = config.layer_channels(n);
        let rgb_w = params.insert(
            "to_rgb.weight",
            Tensor::randn(&[3, cl, 1, 1], 1.0 / (cl as f64).sqrt(), &mut r),
        );
        let rgb_b = params.insert("to_rgb.bias", Tensor::zeros(&[3]));
        Ok(Self {
            config,
            params,
            ids: GenIds {
                mapping,
                const_input,
                style,
                conv,
                to_rgb: (rgb_w, rgb_b),
            },
        })
    }

    /// The same weights with detail codes starting at layer `m`.
    pub fn with_split_layer(&self, m: usize) -> Result<Self> {
        let mut config = self.config.clone();
        config.split_layer = m;
        config.validate()?;
        Ok(Self {
            config,
            params: self.params.clone(),
            ids: self.ids.clone(),
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Learning-rate multiplier for a parameter during adversarial training.
    pub(crate) fn lr_multiplier(&self, id: ParamId) -> f64 {
        if self.ids.mapping.iter().any(|&(w, b)| w == id || b == id) {
            0.1
        } else {
            1.0
        }
    }

    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        checkpoint::save(dir, GENERATOR_FORMAT, &self.config, &self.params)
    }

    pub fn load(dir: &std::path::Path) -> Result<Self> {
        let (config, loaded): (GeneratorConfig, ParamStore) =
            checkpoint::load(dir, GENERATOR_FORMAT)?;
        let mut model = Self::new(config)?;
        checkpoint::restore_into(dir, &mut model.params, loaded)?;
        Ok(model)
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        self.params.bind(g, trainable)
    }

    /// Mapping network on a `[B, d]` batch of prior codes.
    pub fn map_vars(&self, g: &mut Graph, p: &BoundParams, z: Var) -> Var {
        let mut x = g.pixel_norm(z);
        for &(w, b) in &self.ids.mapping {
            x = g.linear(x, p.var(w), Some(p.var(b)));
            x = g.leaky_relu(x, LEAKY_SLOPE);
        }
        x
    }

    /// Runs style layers `from..=to`. `input` is the feature map entering
    /// layer `from` (the learned constant when `None` and `from == 1`);
    /// `styles[k]` is the `[B, d]` style code for layer `from + k`.
    pub fn layers_vars(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        from: usize,
        to: usize,
        input: Option<Var>,
        styles: &[Var],
    ) -> Var {
        assert_eq!(styles.len(), to + 1 - from, "one style per layer");
        let batch = g.shape(styles[0])[0];
        let mut x = match input {
            Some(x) => x,
            None => {
                assert_eq!(from, 1, "only layer 1 may start from the constant");
                let c = p.var(self.ids.const_input);
                if batch == 1 {
                    c
                } else {
                    g.repeat_batch(c, batch)
                }
            }
        };
        for (k, i) in (from..=to).enumerate() {
            if let Some((cw, cb)) = self.ids.conv[i - 1] {
                if i % 2 == 1 {
                    x = g.upsample2x(x);
                }
                x = g.conv2d(x, p.var(cw), Some(p.var(cb)), 1, 1);
                x = g.leaky_relu(x, LEAKY_SLOPE);
            }
            let (sw, sb) = self.ids.style[i - 1];
            let s = g.linear(styles[k], p.var(sw), Some(p.var(sb)));
            x = g.adain(x, s);
        }
        x
    }

    pub fn to_rgb_vars(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Var {
        let (w, b) = self.ids.to_rgb;
        let y = g.conv2d(x, p.var(w), Some(p.var(b)), 1, 0);
        g.tanh(y)
    }

    /// Per-layer style codes for a code, as `(first_layer, styles)`; also
    /// returns the injected feature map for hybrid codes.
    fn styles_for(&self, g: &mut Graph, p: &BoundParams, code: &CodeVars) -> (usize, Option<Var>, Vec<Var>) {
        let n = self.config.num_style_layers;
        let m = self.config.split_layer;
        match *code {
            CodeVars::Z(z) => {
                let w = self.map_vars(g, p, z);
                (1, None, vec![w; n])
            }
            CodeVars::W(w) => (1, None, vec![w; n]),
            CodeVars::ZPlus(zs) => {
                let ws = self.map_vars(g, p, zs);
                (1, None, (0..n).map(|i| g.row(ws, i)).collect())
            }
            CodeVars::WPlus(ws) => (1, None, (0..n).map(|i| g.row(ws, i)).collect()),
            CodeVars::Hybrid {
                f,
                details,
                z_flavored,
            } => {
                let ws = if z_flavored {
                    self.map_vars(g, p, details)
                } else {
                    details
                };
                let k = g.shape(details)[0];
                let styles = if k == 1 {
                    vec![ws; n - m + 1]
                } else {
                    (0..k).map(|i| g.row(ws, i)).collect()
                };
                (m, Some(f), styles)
            }
        }
    }

    /// Image `[1, 3, H, W]` for a code on the graph.
    pub fn render_vars(&self, g: &mut Graph, p: &BoundParams, code: &CodeVars) -> Var {
        let (from, input, styles) = self.styles_for(g, p, code);
        let x = self.layers_vars(g, p, from, self.config.num_style_layers, input, &styles);
        self.to_rgb_vars(g, p, x)
    }

    /// Feature map entering layer `M`, `[1, C, h, w]`.
    pub fn tap_vars(&self, g: &mut Graph, p: &BoundParams, code: &CodeVars) -> Var {
        let m = self.config.split_layer;
        let (_, _, styles) = self.styles_for(g, p, code);
        if m == 1 {
            return p.var(self.ids.const_input);
        }
        self.layers_vars(g, p, 1, m - 1, None, &styles[..m - 1])
    }

    fn check_vector(&self, v: &[f64], what: &str) -> Result<()> {
        if v.len() != self.config.latent_dim {
            return Err(AtlasError::Shape {
                expected: format!("{what} of dimension {}", self.config.latent_dim),
                actual: format!("dimension {}", v.len()),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(AtlasError::Numeric(format!("{what} contains non-finite values")));
        }
        Ok(())
    }

    /// Checks a code's layout against this generator.
    pub fn check_code(&self, code: &LatentCode) -> Result<()> {
        let n = self.config.num_style_layers;
        let list_len = |len: usize, want: usize, what: &str| {
            if len != want {
                Err(AtlasError::Shape {
                    expected: format!("{want} {what} codes"),
                    actual: format!("{len}"),
                })
            } else {
                Ok(())
            }
        };
        match code {
            LatentCode::Z(z) => self.check_vector(z.as_slice(), "z"),
            LatentCode::W(w) => self.check_vector(w.as_slice(), "w"),
            LatentCode::ZPlus(zs) => {
                list_len(zs.len(), n, "z+")?;
                zs.iter().try_for_each(|z| self.check_vector(z.as_slice(), "z"))
            }
            LatentCode::WPlus(ws) => {
                list_len(ws.len(), n, "w+")?;
                ws.iter().try_for_each(|w| self.check_vector(w.as_slice(), "w"))
            }
            LatentCode::Hybrid(h) => {
                let shape = self.config.tap_shape();
                if h.f.tensor().shape() != shape {
                    return Err(AtlasError::Shape {
                        expected: format!("feature map {shape:?}"),
                        actual: format!("{:?}", h.f.tensor().shape()),
                    });
                }
                if !h.f.tensor().is_finite() {
                    return Err(AtlasError::Numeric("feature map contains non-finite values".into()));
                }
                let want = if h.space.broadcasts_detail() {
                    1
                } else {
                    self.config.num_detail_layers()
                };
                match &h.details {
                    DetailCodes::Z(zs) => {
                        list_len(zs.len(), want, "detail")?;
                        zs.iter().try_for_each(|z| self.check_vector(z.as_slice(), "z"))
                    }
                    DetailCodes::W(ws) => {
                        list_len(ws.len(), want, "detail")?;
                        ws.iter().try_for_each(|w| self.check_vector(w.as_slice(), "w"))
                    }
                }
            }
        }
    }

    /// Puts a code on the graph as constants (or variables when `trainable`).
    pub fn code_vars(&self, g: &mut Graph, code: &LatentCode, trainable: bool) -> CodeVars {
        let leaf = |g: &mut Graph, t: Tensor| {
            if trainable {
                g.variable(t)
            } else {
                g.constant(t)
            }
        };
        match code {
            LatentCode::Z(z) => CodeVars::Z(leaf(g, z.row_tensor())),
            LatentCode::W(w) => CodeVars::W(leaf(g, w.row_tensor())),
            LatentCode::ZPlus(zs) => CodeVars::ZPlus(leaf(g, ZCode::stack(zs))),
            LatentCode::WPlus(ws) => CodeVars::WPlus(leaf(g, WCode::stack(ws))),
            LatentCode::Hybrid(h) => {
                let f = leaf(g, h.f.batch_tensor());
                let (details, z_flavored) = match &h.details {
                    DetailCodes::Z(zs) => (ZCode::stack(zs), true),
                    DetailCodes::W(ws) => (WCode::stack(ws), false),
                };
                CodeVars::Hybrid {
                    f,
                    details: leaf(g, details),
                    z_flavored,
                }
            }
        }
    }

    /// `w = M(z)`.
    pub fn map_latent(&self, z: &ZCode) -> Result<WCode> {
        self.check_vector(z.as_slice(), "z")?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let zv = g.constant(z.row_tensor());
        let w = self.map_vars(&mut g, &p, zv);
        Ok(WCode::new(g.value(w).data().to_vec()))
    }

    /// Maps a `[B, d]` batch of prior codes in one pass.
    pub fn map_batch(&self, zs: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let zv = g.constant(zs.clone());
        let w = self.map_vars(&mut g, &p, zv);
        g.value(w).clone()
    }

    pub fn synthesize(&self, code: &LatentCode) -> Result<Image> {
        self.check_code(code)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let cv = self.code_vars(&mut g, code, false);
        let img = self.render_vars(&mut g, &p, &cv);
        let t = g.value(img);
        let s = t.shape();
        Image::new(t.reshaped(&[s[1], s[2], s[3]])?)
    }

    /// The feature map entering layer `M` for a non-hybrid code.
    pub fn feature_tap(&self, code: &LatentCode) -> Result<FCode> {
        if matches!(code, LatentCode::Hybrid(_)) {
            return Err(AtlasError::Input(
                "feature_tap needs a Z, Z+, W or W+ code; hybrid codes already carry f".into(),
            ));
        }
        self.check_code(code)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let cv = self.code_vars(&mut g, code, false);
        let f = self.tap_vars(&mut g, &p, &cv);
        let shape = self.config.tap_shape();
        FCode::new(g.value(f).reshaped(&shape)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spaces::{HybridCode, HybridTag};

    fn micro() -> GeneratorModel {
        GeneratorModel::new(GeneratorConfig::micro()).unwrap()
    }

    fn zcode(d: usize, seed: u64) -> ZCode {
        let mut r = rng::stream(seed, "test-z");
        ZCode::new(Tensor::randn(&[d], 1.0, &mut r).into_data())
    }

    #[test]
    fn config_invariants() {
        let c = GeneratorConfig::desk();
        c.validate().unwrap();
        assert_eq!(c.num_style_layers, 2 * c.num_upsamples() + 2);
        assert_eq!(c.base_resolution << c.num_upsamples(), c.output_resolution);
        assert_eq!(c.tap_shape(), [32, 4, 4]);
        let mut bad = c.clone();
        bad.split_layer = 9;
        assert!(bad.validate().is_err());
        bad.split_layer = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn tap_resolution_matches_layer_entering_split() {
        let mut c = GeneratorConfig::desk();
        for m in 2..=c.num_style_layers {
            c.split_layer = m;
            // layer m consumes a map at its own resolution, or half of it if it upsamples
            let r = c.layer_resolution(m);
            let entering = if m % 2 == 1 { r / 2 } else { r };
            assert_eq!(c.tap_resolution(), entering);
        }
    }

    #[test]
    fn mapping_is_deterministic_and_checks_dimension() {
        let g = micro();
        let z = ZCode::new(vec![0.0; 8]);
        let a = g.map_latent(&z).unwrap();
        let b = g.map_latent(&z).unwrap();
        assert_eq!(a, b);
        assert!(g.map_latent(&ZCode::new(vec![0.0; 7])).is_err());
    }

    #[test]
    fn broadcast_z_plus_matches_z() {
        let g = micro();
        let z = zcode(8, 1);
        let a = g.synthesize(&LatentCode::Z(z.clone())).unwrap();
        let b = g
            .synthesize(&LatentCode::ZPlus(vec![z; g.config().num_style_layers]))
            .unwrap();
        assert!(a.tensor().max_abs_diff(b.tensor()) <= 1e-6);
    }

    #[test]
    fn hybrid_from_tap_reproduces_w_image() {
        let g = micro();
        let w = g.map_latent(&zcode(8, 2)).unwrap();
        let f = g.feature_tap(&LatentCode::W(w.clone())).unwrap();
        let hybrid = LatentCode::Hybrid(HybridCode {
            space: HybridTag::FWPlus,
            f,
            details: DetailCodes::W(vec![w.clone(); g.config().num_detail_layers()]),
        });
        let a = g.synthesize(&LatentCode::W(w)).unwrap();
        let b = g.synthesize(&hybrid).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn later_layers_do_not_affect_tap() {
        let g = micro();
        let n = g.config().num_style_layers;
        let m = g.config().split_layer;
        let w = g.map_latent(&zcode(8, 3)).unwrap();
        let mut plus = vec![w.clone(); n];
        for (k, entry) in plus.iter_mut().enumerate().skip(m - 1) {
            *entry = g.map_latent(&zcode(8, 100 + k as u64)).unwrap();
        }
        let a = g.feature_tap(&LatentCode::W(w)).unwrap();
        let b = g.feature_tap(&LatentCode::WPlus(plus)).unwrap();
        assert!(a.tensor().max_abs_diff(b.tensor()) <= 1e-7);
        assert_eq!(a.tensor().shape(), &g.config().tap_shape());
    }

    #[test]
    fn synthesize_rejects_bad_layouts() {
        let g = micro();
        assert!(g.synthesize(&LatentCode::ZPlus(vec![zcode(8, 1); 3])).is_err());
        let mut nan = zcode(8, 1);
        nan.as_mut_slice()[0] = f64::NAN;
        assert!(g.synthesize(&LatentCode::Z(nan)).is_err());
        let hybrid = LatentCode::Hybrid(HybridCode {
            space: HybridTag::FZPlus,
            f: FCode::new(Tensor::zeros(&[4, 2, 2])).unwrap(),
            details: DetailCodes::Z(vec![zcode(8, 1); 2]),
        });
        assert!(g.synthesize(&hybrid).is_err());
        assert!(g.feature_tap(&hybrid).is_err());
    }

    #[test]
    fn repeated_synthesis_is_bit_stable() {
        let g = micro();
        let code = LatentCode::Z(zcode(8, 9));
        let a = g.synthesize(&code).unwrap();
        let b = g.synthesize(&code).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|v| v.abs() <= 1.0));
    }
}
