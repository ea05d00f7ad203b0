//! Semantic directions and latent edits.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{AtlasError, Result};
use crate::generator::GeneratorModel;
use crate::rng;
use crate::spaces::{retract_in_place, sample_z_batch, DetailCodes, HybridCode, LatentCode, Pca, WCode, ZCode};
use crate::tensor::Tensor;

pub const BANK_FORMAT: &str = "latent-atlas/dir-v1";

/// Standard deviation of random directions (variance 0.04).
pub const RANDOM_DIRECTION_STD: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DirectionSpace {
    Z,
    W,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ganspace,
    Interfacegan,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    pub name: String,
    pub space: DirectionSpace,
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub component: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute: Option<String>,
    /// Norm before normalization.
    pub magnitude: f64,
    pub vector: Vec<f64>,
}

impl Direction {
    /// Normalizes `vector` to unit length.
    pub fn new(name: impl Into<String>, space: DirectionSpace, method: Method, vector: Vec<f64>) -> Result<Self> {
        let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(AtlasError::Numeric(format!("direction has norm {norm}")));
        }
        Ok(Self {
            name: name.into(),
            space,
            method,
            component: None,
            attribute: None,
            magnitude: norm,
            vector: vector.into_iter().map(|v| v / norm).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn negated(&self) -> Self {
        Self {
            vector: self.vector.iter().map(|v| -v).collect(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BankMeta {
    pub method: Option<Method>,
    pub num_samples: usize,
    pub seed: u64,
    /// Per-direction fit statistics (explained variance, accuracy, ...).
    pub stats: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionBank {
    pub format: String,
    pub directions: Vec<Direction>,
    /// W-space counterparts of GANSpace Z directions, in the same order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub w_directions: Vec<Direction>,
    pub meta: BankMeta,
}

impl DirectionBank {
    pub fn new(directions: Vec<Direction>, meta: BankMeta) -> Result<Self> {
        let bank = Self {
            format: BANK_FORMAT.into(),
            directions,
            w_directions: Vec::new(),
            meta,
        };
        bank.check()?;
        Ok(bank)
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    /// Direction `index` expressed in `space`.
    pub fn get(&self, index: usize, space: DirectionSpace) -> Result<&Direction> {
        let z = self
            .directions
            .get(index)
            .ok_or_else(|| AtlasError::Input(format!("bank has {} directions, asked for #{index}", self.len())))?;
        if z.space == space {
            return Ok(z);
        }
        self.w_directions
            .get(index)
            .filter(|w| w.space == space)
            .ok_or_else(|| {
                AtlasError::Input(format!(
                    "direction {} lives in {:?}, not {space:?}",
                    z.name, z.space
                ))
            })
    }

    fn check(&self) -> Result<()> {
        let mut all = self.directions.iter().chain(&self.w_directions);
        if let Some(first) = all.next() {
            let d = first.dim();
            if let Some(bad) = all.find(|x| x.dim() != d) {
                return Err(AtlasError::Shape {
                    expected: format!("direction dimension {d}"),
                    actual: format!("{} has dimension {}", bad.name, bad.dim()),
                });
            }
        }
        if !self.w_directions.is_empty() && self.w_directions.len() != self.directions.len() {
            return Err(AtlasError::Input("w_directions must parallel directions".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| AtlasError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| AtlasError::io(path, e))?;
        let bank: Self = serde_json::from_str(&text).map_err(|e| AtlasError::format(path, e.to_string()))?;
        if bank.format != BANK_FORMAT {
            return Err(AtlasError::format(path, format!("format tag {:?}", bank.format)));
        }
        bank.check().map_err(|e| AtlasError::format(path, e.to_string()))?;
        Ok(bank)
    }
}

/// Adds `α·n` to every detail-layer code (all layers for Z⁺/W⁺, layers
/// `M..N` for hybrid codes) and retracts Z-flavored entries. `f` is untouched.
pub fn apply_edit(code: &LatentCode, dir: &Direction, alpha: f64) -> Result<LatentCode> {
    let want = match code {
        LatentCode::Z(_) | LatentCode::ZPlus(_) => DirectionSpace::Z,
        LatentCode::W(_) | LatentCode::WPlus(_) => DirectionSpace::W,
        LatentCode::Hybrid(h) => match h.details {
            DetailCodes::Z(_) => DirectionSpace::Z,
            DetailCodes::W(_) => DirectionSpace::W,
        },
    };
    if dir.space != want {
        return Err(AtlasError::Input(format!(
            "direction {} lives in {:?} but the code's detail codes are {want:?}",
            dir.name, dir.space
        )));
    }
    let edit = |v: &[f64]| -> Result<Vec<f64>> {
        if v.len() != dir.dim() {
            return Err(AtlasError::Shape {
                expected: format!("direction dimension {}", v.len()),
                actual: format!("{}", dir.dim()),
            });
        }
        Ok(v.iter().zip(&dir.vector).map(|(a, n)| a + alpha * n).collect())
    };
    let edit_z = |z: &ZCode| -> Result<ZCode> {
        let mut v = edit(z.as_slice())?;
        retract_in_place(&mut v)?;
        Ok(ZCode::new(v))
    };
    let edit_w = |w: &WCode| -> Result<WCode> { Ok(WCode::new(edit(w.as_slice())?)) };
    Ok(match code {
        LatentCode::Z(z) => LatentCode::Z(edit_z(z)?),
        LatentCode::W(w) => LatentCode::W(edit_w(w)?),
        LatentCode::ZPlus(zs) => LatentCode::ZPlus(zs.iter().map(edit_z).collect::<Result<_>>()?),
        LatentCode::WPlus(ws) => LatentCode::WPlus(ws.iter().map(edit_w).collect::<Result<_>>()?),
        LatentCode::Hybrid(h) => LatentCode::Hybrid(HybridCode {
            space: h.space,
            f: h.f.clone(),
            details: match &h.details {
                DetailCodes::Z(zs) => DetailCodes::Z(zs.iter().map(edit_z).collect::<Result<_>>()?),
                DetailCodes::W(ws) => DetailCodes::W(ws.iter().map(edit_w).collect::<Result<_>>()?),
            },
        }),
    })
}

/// GANSpace fit on paired samples: PCA of `ws [n, d]`, then each component
/// is regressed back onto `zs [n, d]` with `n_k = Σ x_k z / Σ x_k²`.
/// Returns Z directions, their W-space axes, and explained variances.
pub fn ganspace_from_samples(
    zs: &Tensor,
    ws: &Tensor,
    num_components: usize,
) -> Result<(Vec<Direction>, Vec<Direction>, Vec<f64>)> {
    let (n, d) = (zs.shape()[0], zs.shape()[1]);
    if ws.shape() != zs.shape() {
        return Err(AtlasError::Shape {
            expected: format!("{:?}", zs.shape()),
            actual: format!("{:?}", ws.shape()),
        });
    }
    if num_components == 0 || num_components > d {
        return Err(AtlasError::Input(format!(
            "num_components must be in 1..={d}, got {num_components}"
        )));
    }
    let pca = Pca::fit(ws)?;
    let mut z_dirs = Vec::new();
    let mut w_dirs = Vec::new();
    let mut variances = Vec::new();
    for k in 0..num_components {
        let mut num = vec![0.0; d];
        let mut den = 0.0;
        for j in 0..n {
            let x = pca.coordinate(&ws.data()[j * d..(j + 1) * d], k);
            den += x * x;
            for (acc, z) in num.iter_mut().zip(&zs.data()[j * d..(j + 1) * d]) {
                *acc += x * z;
            }
        }
        if !(den > 0.0) {
            log::warn!("GANSpace component {k} has zero coordinate variance; skipped");
            continue;
        }
        let nk: Vec<f64> = num.iter().map(|v| v / den).collect();
        let mut zd = Direction::new(format!("pc{k}"), DirectionSpace::Z, Method::Ganspace, nk)?;
        zd.component = Some(k);
        let mut wd = Direction::new(format!("pc{k}"), DirectionSpace::W, Method::Ganspace, pca.axis(k).to_vec())?;
        wd.component = Some(k);
        z_dirs.push(zd);
        w_dirs.push(wd);
        variances.push(pca.variances[k]);
    }
    Ok((z_dirs, w_dirs, variances))
}

/// GANSpace directions for a generator from `num_samples` sphere samples.
pub fn ganspace_directions(
    gen: &GeneratorModel,
    num_samples: usize,
    num_components: usize,
    seed: u64,
) -> Result<DirectionBank> {
    let d = gen.config().latent_dim;
    if num_samples <= d {
        return Err(AtlasError::Input(format!(
            "GANSpace needs more samples than dimensions ({num_samples} <= {d})"
        )));
    }
    let mut r = rng::stream(seed, "ganspace");
    let zs = sample_z_batch(d, num_samples, &mut r);
    let ws = gen.map_batch(&zs);
    let (z_dirs, w_dirs, variances) = ganspace_from_samples(&zs, &ws, num_components)?;
    let mut bank = DirectionBank::new(
        z_dirs,
        BankMeta {
            method: Some(Method::Ganspace),
            num_samples,
            seed,
            stats: variances,
        },
    )?;
    bank.w_directions = w_dirs;
    Ok(bank)
}

/// Settings of the linear max-margin fit.
#[derive(Clone, Copy, Debug)]
pub struct SvmConfig {
    /// Weight of `½‖w‖²` against the mean hinge loss.
    pub lambda: f64,
    pub max_epochs: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            max_epochs: 20_000,
            tolerance: 1e-12,
            seed: 0,
        }
    }
}

/// Linear SVM with bias, `min ½λ‖w‖² + mean(hinge)`, solved by dual
/// coordinate descent in a seeded order. Returns `(w, b, training accuracy)`.
pub fn linear_svm(codes: &[Vec<f64>], labels: &[bool], cfg: &SvmConfig) -> Result<(Vec<f64>, f64, f64)> {
    let n = codes.len();
    if n != labels.len() {
        return Err(AtlasError::Input("codes and labels differ in length".into()));
    }
    if !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
        return Err(AtlasError::Input("InterfaceGAN fit needs both classes present".into()));
    }
    let d = codes[0].len();
    if codes.iter().any(|c| c.len() != d) {
        return Err(AtlasError::Input("codes must share one dimension".into()));
    }
    // primal C for ½‖w‖² + C Σ hinge
    let c = 1.0 / (cfg.lambda * n as f64);
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();
    // bias folded in as a constant feature
    let qii: Vec<f64> = codes.iter().map(|x| x.iter().map(|v| v * v).sum::<f64>() + 1.0).collect();
    let mut alpha = vec![0.0; n];
    let mut w = vec![0.0; d + 1];
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(cfg.seed, "svm-order");
    for _ in 0..cfg.max_epochs {
        order.shuffle(&mut r);
        let mut max_pg: f64 = 0.0;
        for &i in &order {
            let x = &codes[i];
            let wx: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + w[d];
            let grad = y[i] * wx - 1.0;
            let pg = if alpha[i] == 0.0 {
                grad.min(0.0)
            } else if alpha[i] == c {
                grad.max(0.0)
            } else {
                grad
            };
            max_pg = max_pg.max(pg.abs());
            if pg != 0.0 {
                let old = alpha[i];
                alpha[i] = (old - grad / qii[i]).clamp(0.0, c);
                let delta = (alpha[i] - old) * y[i];
                for (wj, xj) in w.iter_mut().zip(x) {
                    *wj += delta * xj;
                }
                w[d] += delta;
            }
        }
        if max_pg <= cfg.tolerance {
            break;
        }
    }
    let b = w.pop().expect("bias slot");
    let correct = codes
        .iter()
        .zip(&y)
        .filter(|(x, &yi)| {
            let s: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            s * yi > 0.0
        })
        .count();
    Ok((w, b, correct as f64 / n as f64))
}

/// InterfaceGAN direction: the unit normal of a max-margin hyperplane
/// separating `codes` by `labels`, pointing toward the positive class.
pub fn interfacegan_direction(
    codes: &[Vec<f64>],
    labels: &[bool],
    space: DirectionSpace,
    cfg: &SvmConfig,
) -> Result<(Direction, f64)> {
    let (w, _, acc) = linear_svm(codes, labels, cfg)?;
    let dir = Direction::new("interfacegan", space, Method::Interfacegan, w)?;
    Ok((dir, acc))
}

/// A seeded Gaussian direction with per-coordinate variance 0.04, normalized;
/// the raw norm is kept in `magnitude`.
pub fn random_direction(seed: u64, d: usize, space: DirectionSpace) -> Result<Direction> {
    let mut r = rng::stream(seed, "random-direction");
    let normal = Normal::new(0.0, RANDOM_DIRECTION_STD).expect("valid std");
    let v: Vec<f64> = (0..d).map(|_| normal.sample(&mut r)).collect();
    Direction::new(format!("random-{seed}"), space, Method::Random, v)
}
