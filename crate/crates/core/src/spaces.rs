//! Latent spaces: code types, samplers, hypersphere retraction, and the
//! deactivated-and-whitened Pₙ machinery used as a density regularizer.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{AtlasError, Result};
use crate::generator::{GeneratorModel, LEAKY_SLOPE};
use crate::graph::{Graph, Var};
use crate::rng::{self, AtlasRng};
use crate::tensor::Tensor;

/// Every latent space the toolkit inverts into.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Space {
    #[serde(rename = "Z")]
    Z,
    #[serde(rename = "Z_PLUS")]
    ZPlus,
    #[serde(rename = "W")]
    W,
    #[serde(rename = "W_PLUS")]
    WPlus,
    #[serde(rename = "FZ")]
    FZ,
    #[serde(rename = "FZ_PLUS")]
    FZPlus,
    #[serde(rename = "FW_PLUS")]
    FWPlus,
    #[serde(rename = "FW_PLUS_PN")]
    FWPlusPn,
}

impl Space {
    pub const ALL: [Space; 8] = [
        Space::Z,
        Space::ZPlus,
        Space::W,
        Space::WPlus,
        Space::FZ,
        Space::FZPlus,
        Space::FWPlus,
        Space::FWPlusPn,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Space::Z => "Z",
            Space::ZPlus => "Z_PLUS",
            Space::W => "W",
            Space::WPlus => "W_PLUS",
            Space::FZ => "FZ",
            Space::FZPlus => "FZ_PLUS",
            Space::FWPlus => "FW_PLUS",
            Space::FWPlusPn => "FW_PLUS_PN",
        }
    }

    pub fn is_hybrid(self) -> bool {
        matches!(self, Space::FZ | Space::FZPlus | Space::FWPlus | Space::FWPlusPn)
    }

    /// Codes optimized on the sphere (Z, Z⁺, F/Z, F/Z⁺).
    pub fn is_z_flavored(self) -> bool {
        matches!(self, Space::Z | Space::ZPlus | Space::FZ | Space::FZPlus)
    }

    pub fn uses_pn_penalty(self) -> bool {
        self == Space::FWPlusPn
    }

    pub fn hybrid_tag(self) -> Option<HybridTag> {
        match self {
            Space::FZ => Some(HybridTag::FZ),
            Space::FZPlus => Some(HybridTag::FZPlus),
            Space::FWPlus | Space::FWPlusPn => Some(HybridTag::FWPlus),
            _ => None,
        }
    }

    pub fn list() -> String {
        Space::ALL.map(|s| s.tag()).join(", ")
    }
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Space {
    type Err = AtlasError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace(['-', '/'], "_").replace('+', "_PLUS");
        Space::ALL
            .into_iter()
            .find(|sp| sp.tag() == norm || sp.tag().replace('_', "") == norm.replace('_', ""))
            .ok_or_else(|| {
                AtlasError::Input(format!("unknown space {s:?}; expected one of {}", Space::list()))
            })
    }
}

/// Layout tag of a hybrid `(f, details)` code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HybridTag {
    FZ,
    FZPlus,
    FWPlus,
}

impl HybridTag {
    /// F/Z stores one detail code shared by every detail layer.
    pub fn broadcasts_detail(self) -> bool {
        self == HybridTag::FZ
    }

    pub fn is_z_flavored(self) -> bool {
        self != HybridTag::FWPlus
    }

    pub fn space(self) -> Space {
        match self {
            HybridTag::FZ => Space::FZ,
            HybridTag::FZPlus => Space::FZPlus,
            HybridTag::FWPlus => Space::FWPlus,
        }
    }
}

macro_rules! vector_code {
    ($name:ident) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name(Vec<f64>);

        impl $name {
            pub fn new(v: Vec<f64>) -> Self {
                Self(v)
            }

            pub fn dim(&self) -> usize {
                self.0.len()
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.0
            }

            pub fn as_mut_slice(&mut self) -> &mut [f64] {
                &mut self.0
            }

            pub fn into_vec(self) -> Vec<f64> {
                self.0
            }

            pub fn norm(&self) -> f64 {
                self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
            }

            /// `[1, d]`
            pub fn row_tensor(&self) -> Tensor {
                Tensor::from_parts(vec![1, self.0.len()], self.0.clone())
            }

            /// `[len, d]`
            pub fn stack(codes: &[Self]) -> Tensor {
                let d = codes.first().map_or(0, |c| c.dim());
                let data = codes.iter().flat_map(|c| c.0.iter().copied()).collect();
                Tensor::from_parts(vec![codes.len(), d], data)
            }

            /// Splits a `[k, d]` tensor into `k` codes.
            pub fn unstack(t: &Tensor) -> Vec<Self> {
                let d = t.shape()[1];
                t.data().chunks(d).map(|c| Self(c.to_vec())).collect()
            }
        }
    };
}

vector_code!(ZCode);
vector_code!(WCode);

/// A feature map `[C, h, w]` at the generator tap.
#[derive(Clone, Debug, PartialEq)]
pub struct FCode(Tensor);

impl FCode {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.shape().len() != 3 {
            return Err(AtlasError::Shape {
                expected: "[C, h, w]".into(),
                actual: format!("{:?}", t.shape()),
            });
        }
        Ok(Self(t))
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self(Tensor::zeros(&shape))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// `[1, C, h, w]`
    pub fn batch_tensor(&self) -> Tensor {
        let mut shape = vec![1];
        shape.extend_from_slice(self.0.shape());
        Tensor::from_parts(shape, self.0.data().to_vec())
    }

    /// Inverse of [`FCode::batch_tensor`].
    pub fn from_batch(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        Self::new(t.reshaped(&s[1..])?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DetailCodes {
    Z(Vec<ZCode>),
    W(Vec<WCode>),
}

impl DetailCodes {
    pub fn len(&self) -> usize {
        match self {
            DetailCodes::Z(v) => v.len(),
            DetailCodes::W(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_tensor(&self) -> Tensor {
        match self {
            DetailCodes::Z(v) => ZCode::stack(v),
            DetailCodes::W(v) => WCode::stack(v),
        }
    }
}

/// A base feature map plus detail codes for layers `M..=N`.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridCode {
    pub space: HybridTag,
    pub f: FCode,
    pub details: DetailCodes,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LatentCode {
    Z(ZCode),
    ZPlus(Vec<ZCode>),
    W(WCode),
    WPlus(Vec<WCode>),
    Hybrid(HybridCode),
}

impl LatentCode {
    /// The space tag this layout belongs to (F/W⁺ codes report `FW_PLUS`).
    pub fn space(&self) -> Space {
        match self {
            LatentCode::Z(_) => Space::Z,
            LatentCode::ZPlus(_) => Space::ZPlus,
            LatentCode::W(_) => Space::W,
            LatentCode::WPlus(_) => Space::WPlus,
            LatentCode::Hybrid(h) => h.space.space(),
        }
    }

    /// Every Z-flavored vector in the code.
    pub fn z_codes(&self) -> Vec<&ZCode> {
        match self {
            LatentCode::Z(z) => vec![z],
            LatentCode::ZPlus(zs) => zs.iter().collect(),
            LatentCode::Hybrid(HybridCode {
                details: DetailCodes::Z(zs),
                ..
            }) => zs.iter().collect(),
            _ => Vec::new(),
        }
    }
}

/// Draws `z` uniformly on the sphere of radius `√d`.
pub fn sample_z<R: Rng + ?Sized>(d: usize, rng: &mut R) -> ZCode {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        if let Ok(z) = retract(&ZCode(v)) {
            return z;
        }
    }
}

/// Samples a standalone code; hybrid spaces come from inversion only.
pub fn sample(space: Space, g: &GeneratorModel, seed: u64) -> Result<LatentCode> {
    let d = g.config().latent_dim;
    let n = g.config().num_style_layers;
    let mut r = rng::stream(seed, "sample");
    match space {
        Space::Z => Ok(LatentCode::Z(sample_z(d, &mut r))),
        Space::ZPlus => Ok(LatentCode::ZPlus((0..n).map(|_| sample_z(d, &mut r)).collect())),
        Space::W => Ok(LatentCode::W(g.map_latent(&sample_z(d, &mut r))?)),
        Space::WPlus => {
            let zs: Vec<ZCode> = (0..n).map(|_| sample_z(d, &mut r)).collect();
            Ok(LatentCode::WPlus(WCode::unstack(&g.map_batch(&ZCode::stack(&zs)))))
        }
        other => Err(AtlasError::Input(format!(
            "cannot sample hybrid space {other}; hybrid codes come from inversion"
        ))),
    }
}

/// `[count, d]` batch of sphere samples.
pub fn sample_z_batch(d: usize, count: usize, rng: &mut AtlasRng) -> Tensor {
    let zs: Vec<ZCode> = (0..count).map(|_| sample_z(d, rng)).collect();
    ZCode::stack(&zs)
}

/// Projects `z` onto the sphere of radius `√d`.
pub fn retract(z: &ZCode) -> Result<ZCode> {
    let mut v = z.0.clone();
    retract_in_place(&mut v)?;
    Ok(ZCode(v))
}

/// Retracts each entry of a Z⁺-style list independently.
pub fn retract_all(zs: &[ZCode]) -> Result<Vec<ZCode>> {
    zs.iter().map(retract).collect()
}

/// Retracts one row in place.
pub fn retract_in_place(v: &mut [f64]) -> Result<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return Err(AtlasError::Numeric(format!(
            "cannot retract a code with norm {norm}; the optimizer collapsed it"
        )));
    }
    let s = (v.len() as f64).sqrt() / norm;
    for x in v.iter_mut() {
        *x *= s;
    }
    Ok(())
}

/// Retracts every `d`-wide row of a flat buffer.
pub fn retract_rows(data: &mut [f64], d: usize) -> Result<()> {
    data.chunks_mut(d).try_for_each(retract_in_place)
}

/// Inverse LeakyReLU: negative entries are scaled by `1 / slope`.
pub fn deactivate(w: &[f64]) -> Vec<f64> {
    w.iter()
        .map(|&v| if v >= 0.0 { v } else { v / LEAKY_SLOPE })
        .collect()
}

/// LeakyReLU with the mapping network's slope.
pub fn activate(p: &[f64]) -> Vec<f64> {
    p.iter()
        .map(|&v| if v >= 0.0 { v } else { v * LEAKY_SLOPE })
        .collect()
}

/// PCA whitening of the deactivated W space.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PnWhitener {
    pub mean: Vec<f64>,
    /// Column-major `d × d`; column `k` is the `k`-th principal axis.
    pub basis: Vec<f64>,
    pub scales: Vec<f64>,
    pub num_samples: usize,
}

impl PnWhitener {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Principal axis `k`.
    pub fn axis(&self, k: usize) -> &[f64] {
        let d = self.dim();
        &self.basis[k * d..(k + 1) * d]
    }

    /// Fits on an `[n, d]` batch of P-space vectors.
    pub fn fit(p: &Tensor) -> Result<Self> {
        let (n, d) = (p.shape()[0], p.shape()[1]);
        let pca = Pca::fit(p)?;
        let max = pca.variances.first().copied().unwrap_or(0.0);
        let min = pca.variances.last().copied().unwrap_or(0.0);
        if !(min > 1e-10 * max) || !(max > 0.0) {
            return Err(AtlasError::Numeric(format!(
                "rank-deficient P covariance (eigenvalues {min:e}..{max:e}); the mapping collapsed dimensions"
            )));
        }
        Ok(Self {
            mean: pca.mean,
            basis: pca.basis,
            scales: pca.variances.iter().map(|v| v.sqrt()).collect(),
            num_samples: n,
        })
        .inspect(|w: &PnWhitener| debug_assert_eq!(w.dim(), d))
    }

    /// `diag(1/s) Vᵀ (p − μ)` for a P-space vector.
    pub fn transform(&self, p: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let centered: Vec<f64> = p.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        (0..d)
            .map(|k| {
                let axis = self.axis(k);
                axis.iter().zip(&centered).map(|(a, c)| a * c).sum::<f64>() / self.scales[k]
            })
            .collect()
    }

    pub fn inverse_transform(&self, y: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut p = self.mean.clone();
        for k in 0..d {
            let c = y[k] * self.scales[k];
            for (pi, a) in p.iter_mut().zip(self.axis(k)) {
                *pi += c * a;
            }
        }
        p
    }

    /// Affine map as linear-layer parameters: weight `[d, d]` (row `k` is
    /// axis `k / s_k`) and bias `−weight · μ`.
    fn affine(&self) -> (Tensor, Tensor) {
        let d = self.dim();
        let mut w = vec![0.0; d * d];
        for k in 0..d {
            for (j, a) in self.axis(k).iter().enumerate() {
                w[k * d + j] = a / self.scales[k];
            }
        }
        let b = (0..d)
            .map(|k| -(0..d).map(|j| w[k * d + j] * self.mean[j]).sum::<f64>())
            .collect();
        (
            Tensor::from_parts(vec![d, d], w),
            Tensor::from_parts(vec![d], b),
        )
    }

    /// Penalty on a `[k, d]` block of W codes recorded on the graph.
    pub fn penalty_vars(&self, g: &mut Graph, ws: Var) -> Var {
        let k = g.shape(ws)[0];
        let (w, b) = self.affine();
        let wv = g.constant(w);
        let bv = g.constant(b);
        let p = g.leaky_relu(ws, 1.0 / LEAKY_SLOPE);
        let y = g.linear(p, wv, Some(bv));
        let s = g.sum_sq(y);
        g.scale(s, 1.0 / k as f64)
    }
}

const WHITENER_FORMAT: &str = "latent-atlas/pn-v1";

#[derive(Serialize, Deserialize)]
struct WhitenerFile {
    format: String,
    #[serde(flatten)]
    whitener: PnWhitener,
}

impl PnWhitener {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = WhitenerFile {
            format: WHITENER_FORMAT.into(),
            whitener: self.clone(),
        };
        fs::write(path, serde_json::to_string(&file)?).map_err(|e| AtlasError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| AtlasError::io(path, e))?;
        let file: WhitenerFile =
            serde_json::from_str(&text).map_err(|e| AtlasError::format(path, e.to_string()))?;
        if file.format != WHITENER_FORMAT {
            return Err(AtlasError::format(path, format!("format tag {:?}", file.format)));
        }
        let w = file.whitener;
        let d = w.mean.len();
        if w.basis.len() != d * d || w.scales.len() != d || w.scales.iter().any(|s| !(*s > 0.0)) {
            return Err(AtlasError::format(path, "inconsistent whitener dimensions"));
        }
        Ok(w)
    }
}

/// Fits the Pₙ whitener on `num_samples` deactivated mapped sphere samples.
pub fn fit_pn_whitener(g: &GeneratorModel, num_samples: usize, seed: u64) -> Result<PnWhitener> {
    let d = g.config().latent_dim;
    if num_samples < 10 * d {
        return Err(AtlasError::Input(format!(
            "whitener needs at least {} samples, got {num_samples}",
            10 * d
        )));
    }
    let ws = mapped_samples(g, num_samples, seed, "pn-whitener")?;
    let p = Tensor::from_parts(vec![num_samples, d], deactivate(ws.data()));
    PnWhitener::fit(&p)
}

/// `[count, d]` mapped sphere samples, mapped in chunks.
pub fn mapped_samples(g: &GeneratorModel, count: usize, seed: u64, label: &str) -> Result<Tensor> {
    let d = g.config().latent_dim;
    let mut r = rng::stream(seed, label);
    let mut out = Vec::with_capacity(count * d);
    let mut left = count;
    while left > 0 {
        let chunk = left.min(4096);
        let zs = sample_z_batch(d, chunk, &mut r);
        out.extend_from_slice(g.map_batch(&zs).data());
        left -= chunk;
    }
    Tensor::new(&[count, d], out)
}

/// Mean squared norm of the whitened, deactivated per-layer codes.
pub fn pn_density_penalty(codes: &[WCode], whitener: &PnWhitener) -> f64 {
    if codes.is_empty() {
        return 0.0;
    }
    codes
        .iter()
        .map(|w| {
            whitener
                .transform(&deactivate(w.as_slice()))
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
        })
        .sum::<f64>()
        / codes.len() as f64
}

/// Principal components of a sample batch, largest variance first.
#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Column-major `d × d`.
    pub basis: Vec<f64>,
    pub variances: Vec<f64>,
}

impl Pca {
    pub fn fit(x: &Tensor) -> Result<Self> {
        let (n, d) = (x.shape()[0], x.shape()[1]);
        if n < 2 {
            return Err(AtlasError::Input("PCA needs at least two samples".into()));
        }
        let data = x.data();
        let mut mean = vec![0.0; d];
        for row in data.chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = DMatrix::<f64>::zeros(d, d);
        let mut centered = vec![0.0; d];
        for row in data.chunks(d) {
            for (c, (v, m)) in centered.iter_mut().zip(row.iter().zip(&mean)) {
                *c = v - m;
            }
            for i in 0..d {
                let ci = centered[i];
                for j in i..d {
                    cov[(i, j)] += ci * centered[j];
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[(i, j)] / (n - 1) as f64;
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut basis = Vec::with_capacity(d * d);
        let mut variances = Vec::with_capacity(d);
        for &k in &order {
            let col: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            // deterministic sign: largest-magnitude entry positive
            let pivot = col
                .iter()
                .copied()
                .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            basis.extend(col.iter().map(|v| v * sign));
            variances.push(eig.eigenvalues[k].max(0.0));
        }
        Ok(Self {
            mean,
            basis,
            variances,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn axis(&self, k: usize) -> &[f64] {
        let d = self.dim();
        &self.basis[k * d..(k + 1) * d]
    }

    /// Coordinate `k` of a sample: `V_kᵀ (x − μ)`.
    pub fn coordinate(&self, x: &[f64], k: usize) -> f64 {
        self.axis(k)
            .iter()
            .zip(x.iter().zip(&self.mean))
            .map(|(a, (v, m))| a * (v - m))
            .sum()
    }
}

const LAT_FORMAT: &str = "latent-atlas/lat-v1";

#[derive(Serialize, Deserialize)]
struct LatHeader {
    format: String,
    space: Space,
    d: usize,
    n: usize,
    m: usize,
    dtype: String,
    tensors: Vec<LatEntry>,
}

#[derive(Serialize, Deserialize)]
struct LatEntry {
    name: String,
    shape: Vec<usize>,
}

/// Writes a code as a `.lat` file: a little-endian `u32` header length, the
/// JSON header, then every tensor as little-endian `f32`.
pub fn save_latent(path: &Path, code: &LatentCode, n: usize, m: usize) -> Result<()> {
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    let d;
    match code {
        LatentCode::Z(z) => {
            d = z.dim();
            tensors.push(("codes".into(), z.row_tensor()));
        }
        LatentCode::W(w) => {
            d = w.dim();
            tensors.push(("codes".into(), w.row_tensor()));
        }
        LatentCode::ZPlus(zs) => {
            d = zs.first().map_or(0, |z| z.dim());
            tensors.push(("codes".into(), ZCode::stack(zs)));
        }
        LatentCode::WPlus(ws) => {
            d = ws.first().map_or(0, |w| w.dim());
            tensors.push(("codes".into(), WCode::stack(ws)));
        }
        LatentCode::Hybrid(h) => {
            let det = h.details.to_tensor();
            d = det.shape()[1];
            tensors.push(("f".into(), h.f.tensor().clone()));
            tensors.push(("details".into(), det));
        }
    }
    let header = LatHeader {
        format: LAT_FORMAT.into(),
        space: code.space(),
        d,
        n,
        m,
        dtype: "float32".into(),
        tensors: tensors
            .iter()
            .map(|(name, t)| LatEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, t) in &tensors {
        for &v in t.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| AtlasError::io(path, e))
}

/// Reads a `.lat` file, returning the code and the `(N, M)` it was saved with.
pub fn load_latent(path: &Path) -> Result<(LatentCode, usize, usize)> {
    let bytes = fs::read(path).map_err(|e| AtlasError::io(path, e))?;
    if bytes.len() < 4 {
        return Err(AtlasError::format(path, "truncated header"));
    }
    let hlen = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    if bytes.len() < 4 + hlen {
        return Err(AtlasError::format(path, "truncated header"));
    }
    let header: LatHeader = serde_json::from_slice(&bytes[4..4 + hlen])
        .map_err(|e| AtlasError::format(path, e.to_string()))?;
    if header.format != LAT_FORMAT {
        return Err(AtlasError::format(path, format!("format tag {:?}", header.format)));
    }
    let mut off = 4 + hlen;
    let mut tensors = Vec::new();
    for e in &header.tensors {
        let len: usize = e.shape.iter().product();
        let end = off + 4 * len;
        if end > bytes.len() {
            return Err(AtlasError::format(path, format!("truncated tensor {}", e.name)));
        }
        let data = bytes[off..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        tensors.push(Tensor::new(&e.shape, data)?);
        off = end;
    }
    let bad = || AtlasError::format(path, "tensor list does not match the space tag");
    let code = match header.space {
        Space::Z => LatentCode::Z(ZCode::new(tensors.first().ok_or_else(bad)?.data().to_vec())),
        Space::W => LatentCode::W(WCode::new(tensors.first().ok_or_else(bad)?.data().to_vec())),
        Space::ZPlus => LatentCode::ZPlus(ZCode::unstack(tensors.first().ok_or_else(bad)?)),
        Space::WPlus => LatentCode::WPlus(WCode::unstack(tensors.first().ok_or_else(bad)?)),
        sp => {
            let tag = sp.hybrid_tag().ok_or_else(bad)?;
            let (f, det) = match tensors.as_slice() {
                [f, det] => (f, det),
                _ => return Err(bad()),
            };
            let details = if tag.is_z_flavored() {
                DetailCodes::Z(ZCode::unstack(det))
            } else {
                DetailCodes::W(WCode::unstack(det))
            };
            LatentCode::Hybrid(HybridCode {
                space: tag,
                f: FCode::new(f.clone())?,
                details,
            })
        }
    };
    Ok((code, header.n, header.m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::generator::GeneratorConfig;
    use proptest::prelude::*;

    #[test]
    fn retract_scales_to_radius_sqrt_d() {
        let z = ZCode::new(vec![2.0; 512]);
        let r = retract(&z).unwrap();
        for v in r.as_slice() {
            assert!((v - 1.0).abs() < 1e-12);
        }
        assert!(retract(&ZCode::new(vec![0.0; 4])).is_err());
    }

    #[test]
    fn retract_matches_scalar_formula() {
        let mut r = rng::stream(3, "t");
        let mut v: Vec<f64> = (0..64).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        let n0 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x *= 3.7 / n0);
        let out = retract(&ZCode::new(v.clone())).unwrap();
        let k = 8.0 / 3.7;
        for (a, b) in out.as_slice().iter().zip(&v) {
            assert!((a - k * b).abs() < 1e-12);
        }
        assert!((out.norm() - 8.0).abs() < 1e-12);
    }

    #[test]
    fn deactivate_examples() {
        assert_eq!(deactivate(&[0.0]), vec![0.0]);
        assert_eq!(deactivate(&[1.0, -1.0]), vec![1.0, -5.0]);
    }

    #[test]
    fn space_parsing() {
        assert_eq!("fz_plus".parse::<Space>().unwrap(), Space::FZPlus);
        assert_eq!("F/Z+".parse::<Space>().unwrap(), Space::FZPlus);
        assert_eq!("W+".parse::<Space>().unwrap(), Space::WPlus);
        assert_eq!("FW_PLUS_PN".parse::<Space>().unwrap(), Space::FWPlusPn);
        let err = "Q".parse::<Space>().unwrap_err().to_string();
        assert!(err.contains("FZ_PLUS"));
    }

    #[test]
    fn sampling_is_seeded_and_on_sphere() {
        let g = GeneratorModel::new(GeneratorConfig::micro()).unwrap();
        let a = sample(Space::ZPlus, &g, 5).unwrap();
        let b = sample(Space::ZPlus, &g, 5).unwrap();
        assert_eq!(a, b);
        for z in a.z_codes() {
            assert!((z.norm() - 8f64.sqrt()).abs() < 1e-12);
        }
        assert!(sample(Space::FZPlus, &g, 5).is_err());
        assert!(matches!(sample(Space::WPlus, &g, 5).unwrap(), LatentCode::WPlus(v) if v.len() == 4));
    }

    #[test]
    fn latent_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("code.lat");
        let code = LatentCode::Hybrid(HybridCode {
            space: HybridTag::FZPlus,
            f: FCode::new(Tensor::new(&[1, 2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap()).unwrap(),
            details: DetailCodes::Z(vec![ZCode::new(vec![1.0, -2.0]); 3]),
        });
        save_latent(&path, &code, 4, 2).unwrap();
        let (back, n, m) = load_latent(&path).unwrap();
        assert_eq!((n, m), (4, 2));
        assert_eq!(back, code);
    }

    #[test]
    fn whitener_rejects_rank_deficient_data() {
        let x = Tensor::new(&[4, 2], vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0]).unwrap();
        assert!(PnWhitener::fit(&x).is_err());
    }

    #[test]
    fn whitener_rejects_too_few_samples() {
        let g = GeneratorModel::new(GeneratorConfig::micro()).unwrap();
        assert!(fit_pn_whitener(&g, 79, 0).is_err());
    }

    proptest! {
        #[test]
        fn retract_is_idempotent_and_scale_free(
            v in prop::collection::vec(-10.0f64..10.0, 16),
            lambda in 0.01f64..100.0,
        ) {
            prop_assume!(v.iter().map(|x| x * x).sum::<f64>() > 1e-6);
            let z = ZCode::new(v.clone());
            let once = retract(&z).unwrap();
            let twice = retract(&once).unwrap();
            let scaled = retract(&ZCode::new(v.iter().map(|x| x * lambda).collect())).unwrap();
            for i in 0..16 {
                prop_assert!((once.as_slice()[i] - twice.as_slice()[i]).abs() <= 1e-6);
                prop_assert!((once.as_slice()[i] - scaled.as_slice()[i]).abs() <= 1e-6);
            }
        }

        #[test]
        fn deactivate_activate_roundtrip(v in prop::collection::vec(-50.0f64..50.0, 1..32)) {
            let back = activate(&deactivate(&v));
            for (a, b) in back.iter().zip(&v) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }
    }
}
