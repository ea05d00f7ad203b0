//! Metrics and experiment protocols: reconstruction benchmarks across
//! spaces and editing sweeps.

use std::fmt::Write as _;
use std::sync::Mutex;

use serde::Serialize;

use crate::editing::{apply_edit, Direction};
use crate::encoder::EncoderModel;
use crate::error::{AtlasError, Result};
use crate::features::{cosine, identity_embedding, perceptual_distance};
use crate::generator::GeneratorModel;
use crate::imaging::Image;
use crate::inversion::{invert, InversionConfig, InversionResult};
use crate::spaces::{PnWhitener, Space};

const SSIM_WINDOW: usize = 7;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - c;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable Gaussian filter over the valid region of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> (Vec<f64>, usize, usize) {
    let (ho, wo) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    (out, ho, wo)
}

/// SSIM with a 7×7 Gaussian window (σ = 1.5) on images rescaled to `[0, 1]`,
/// averaged over the valid region and over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    let (c, h, w) = (a.channels(), a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(AtlasError::Input(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images")));
    }
    let k = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for ch in 0..c {
        let pa: Vec<f64> = a.data()[ch * h * w..(ch + 1) * h * w].iter().map(|v| (v + 1.0) / 2.0).collect();
        let pb: Vec<f64> = b.data()[ch * h * w..(ch + 1) * h * w].iter().map(|v| (v + 1.0) / 2.0).collect();
        let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
        let (mu_a, ho, wo) = filter_valid(&pa, h, w, &k);
        let (mu_b, _, _) = filter_valid(&pb, h, w, &k);
        let (saa, _, _) = filter_valid(&prod(&pa, &pa), h, w, &k);
        let (sbb, _, _) = filter_valid(&prod(&pb, &pb), h, w, &k);
        let (sab, _, _) = filter_valid(&prod(&pa, &pb), h, w, &k);
        let mut acc = 0.0;
        for i in 0..ho * wo {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = saa[i] - ma * ma;
            let vb = sbb[i] - mb * mb;
            let cov = sab[i] - ma * mb;
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += acc / (ho * wo) as f64;
    }
    Ok(total / c as f64)
}

/// Cosine similarity of identity-proxy embeddings.
pub fn identity_similarity(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    let ea = identity_embedding(a);
    let eb = identity_embedding(b);
    if ea.iter().all(|&v| v == 0.0) || eb.iter().all(|&v| v == 0.0) {
        return Err(AtlasError::Numeric("identity embedding is the zero vector".into()));
    }
    Ok(cosine(&ea, &eb))
}

/// One benchmark target with a stable id.
#[derive(Clone, Debug)]
pub struct Target {
    pub id: String,
    pub image: Image,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReconRow {
    pub target_id: String,
    pub space: Space,
    pub mse: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub wall_s: f64,
    /// Set when the cell failed; metrics are then NaN.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub target_id: String,
    pub space: Space,
    pub direction: String,
    pub alpha: f64,
    pub id_sim: f64,
    pub perceptual: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SpaceSummary {
    pub space: Space,
    pub cells: usize,
    pub failed: usize,
    pub median_mse: f64,
    pub mean_mse: f64,
    pub median_ssim: f64,
    pub mean_ssim: f64,
    pub median_perceptual: f64,
    pub median_wall_s: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct EvalReport {
    pub recon: Vec<ReconRow>,
    pub sweep: Vec<SweepRow>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

pub fn mean(values: &[f64]) -> f64 {
    let v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

impl EvalReport {
    pub fn summaries(&self) -> Vec<SpaceSummary> {
        let mut spaces: Vec<Space> = Vec::new();
        for r in &self.recon {
            if !spaces.contains(&r.space) {
                spaces.push(r.space);
            }
        }
        spaces
            .into_iter()
            .map(|space| {
                let rows: Vec<&ReconRow> = self.recon.iter().filter(|r| r.space == space).collect();
                let col = |f: fn(&ReconRow) -> f64| rows.iter().map(|r| f(r)).collect::<Vec<f64>>();
                SpaceSummary {
                    space,
                    cells: rows.len(),
                    failed: rows.iter().filter(|r| r.error.is_some()).count(),
                    median_mse: median(&col(|r| r.mse)),
                    mean_mse: mean(&col(|r| r.mse)),
                    median_ssim: median(&col(|r| r.ssim)),
                    mean_ssim: mean(&col(|r| r.ssim)),
                    median_perceptual: median(&col(|r| r.perceptual)),
                    median_wall_s: median(&col(|r| r.wall_s)),
                }
            })
            .collect()
    }

    /// `target_id,space,mse,ssim,perceptual,wall_s`; `wall_s` is left empty
    /// unless `timing` is set, so reruns are byte-identical by default.
    pub fn recon_csv(&self, timing: bool) -> String {
        let mut s = String::from("target_id,space,mse,ssim,perceptual,wall_s\n");
        for r in &self.recon {
            let wall = if timing { format!("{:.3}", r.wall_s) } else { String::new() };
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.target_id,
                r.space,
                fmt_metric(r.mse),
                fmt_metric(r.ssim),
                fmt_metric(r.perceptual),
                wall
            );
        }
        s
    }

    /// `target_id,space,direction,alpha,id_sim,perceptual`.
    pub fn sweep_csv(&self) -> String {
        let mut s = String::from("target_id,space,direction,alpha,id_sim,perceptual\n");
        for r in &self.sweep {
            let _ = writeln!(
                s,
                "{},{},{},{:.2},{},{}",
                r.target_id,
                r.space,
                r.direction,
                r.alpha,
                fmt_metric(r.id_sim),
                fmt_metric(r.perceptual)
            );
        }
        s
    }

    pub fn markdown(&self) -> String {
        let mut s = String::from("# Reconstruction\n\n");
        s.push_str("| space | cells | failed | median MSE | mean MSE | median SSIM | mean SSIM | median perceptual | median wall s |\n");
        s.push_str("|---|---|---|---|---|---|---|---|---|\n");
        for m in self.summaries() {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {:.5} | {:.5} | {:.4} | {:.4} | {:.4} | {:.2} |",
                m.space,
                m.cells,
                m.failed,
                m.median_mse,
                m.mean_mse,
                m.median_ssim,
                m.mean_ssim,
                m.median_perceptual,
                m.median_wall_s
            );
        }
        if !self.sweep.is_empty() {
            s.push_str("\n# Editing sweep (mean identity similarity)\n\n| space | alpha | id_sim | perceptual |\n|---|---|---|---|\n");
            let mut keys: Vec<(Space, i64)> = Vec::new();
            for r in &self.sweep {
                let k = (r.space, (r.alpha * 1000.0).round() as i64);
                if !keys.contains(&k) {
                    keys.push(k);
                }
            }
            for (space, a) in keys {
                let rows: Vec<&SweepRow> = self
                    .sweep
                    .iter()
                    .filter(|r| r.space == space && (r.alpha * 1000.0).round() as i64 == a)
                    .collect();
                let sims: Vec<f64> = rows.iter().map(|r| r.id_sim).collect();
                let pers: Vec<f64> = rows.iter().map(|r| r.perceptual).collect();
                let _ = writeln!(
                    s,
                    "| {space} | {:.2} | {:.4} | {:.4} |",
                    a as f64 / 1000.0,
                    mean(&sims),
                    mean(&pers)
                );
            }
        }
        s
    }
}

fn fmt_metric(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.9e}")
    } else {
        "nan".into()
    }
}

/// Models shared by every benchmark cell.
#[derive(Clone, Copy)]
pub struct Models<'a> {
    pub gen: &'a GeneratorModel,
    pub encoder: Option<&'a EncoderModel>,
    pub whitener: Option<&'a PnWhitener>,
}

/// Runs `f` over `0..count` on up to `jobs` threads; results keep index order.
pub fn run_parallel<T: Send>(count: usize, jobs: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let jobs = jobs.clamp(1, count.max(1));
    if jobs == 1 {
        return (0..count).map(f).collect();
    }
    let next = Mutex::new(0usize);
    let slots: Vec<Mutex<Option<T>>> = (0..count).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("job counter");
                    let i = *n;
                    *n += 1;
                    i
                };
                if i >= count {
                    break;
                }
                let out = f(i);
                *slots[i].lock().expect("result slot") = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("every job ran"))
        .collect()
}

/// Seed of the inversion cell for target `t`, independent of scheduling.
pub fn cell_seed(base: u64, t: usize) -> u64 {
    base.wrapping_add((t as u64).wrapping_mul(1_000_003))
}

/// Inverts every target into every space. Failed cells are recorded with
/// NaN metrics and the run continues. Returns rows in (target, space)
/// order and the successful results for later sweeps.
pub fn reconstruction_benchmark(
    targets: &[Target],
    spaces: &[Space],
    models: Models<'_>,
    base: &InversionConfig,
    jobs: usize,
) -> (Vec<ReconRow>, Vec<Option<InversionResult>>) {
    let cells: Vec<(usize, Space)> = (0..targets.len())
        .flat_map(|t| spaces.iter().map(move |&s| (t, s)))
        .collect();
    let out = run_parallel(cells.len(), jobs, |i| {
        let (t, space) = cells[i];
        let cfg = InversionConfig {
            space,
            seed: cell_seed(base.seed, t),
            ..base.clone()
        };
        let target = &targets[t];
        let enc = if space.is_hybrid() { models.encoder } else { None };
        let res = invert(&target.image, models.gen, enc, models.whitener, &cfg).and_then(|r| {
            let ssim = ssim(&target.image, &r.image)?;
            let per = perceptual_distance(&target.image, &r.image)?;
            let mse = r.image.mse(&target.image)?;
            Ok((mse, ssim, per, r))
        });
        match res {
            Ok((mse, ssim, perceptual, r)) => (
                ReconRow {
                    target_id: target.id.clone(),
                    space,
                    mse,
                    ssim,
                    perceptual,
                    wall_s: r.wall_s,
                    error: None,
                },
                Some(r),
            ),
            Err(e) => (
                ReconRow {
                    target_id: target.id.clone(),
                    space,
                    mse: f64::NAN,
                    ssim: f64::NAN,
                    perceptual: f64::NAN,
                    wall_s: f64::NAN,
                    error: Some(e.to_string()),
                },
                None,
            ),
        }
    });
    out.into_iter().unzip()
}

/// The 11-step grid over `[-2, 2]`.
pub fn alpha_grid() -> Vec<f64> {
    (0..11).map(|i| -2.0 + 0.4 * i as f64).map(|a: f64| (a * 10.0).round() / 10.0).collect()
}

/// Edits an inverted code along every direction at every α and compares the
/// result with the unedited reconstruction.
pub fn editing_sweep(
    target_id: &str,
    space: Space,
    result: &InversionResult,
    gen: &GeneratorModel,
    directions: &[Direction],
    alphas: &[f64],
) -> Result<Vec<SweepRow>> {
    if !alphas.contains(&0.0) {
        return Err(AtlasError::Input("the α grid must contain 0".into()));
    }
    let base = gen.synthesize(&result.code)?;
    let base_emb = identity_embedding(&base);
    let mut rows = Vec::with_capacity(directions.len() * alphas.len());
    for dir in directions {
        for &alpha in alphas {
            let edited = gen.synthesize(&apply_edit(&result.code, dir, alpha)?)?;
            let emb = identity_embedding(&edited);
            if emb.iter().all(|&v| v == 0.0) {
                return Err(AtlasError::Numeric("identity embedding is the zero vector".into()));
            }
            rows.push(SweepRow {
                target_id: target_id.to_string(),
                space,
                direction: dir.name.clone(),
                alpha,
                id_sim: cosine(&base_emb, &emb),
                perceptual: perceptual_distance(&base, &edited)?,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn random_image(seed: u64, size: usize) -> Image {
        let mut r = rng::stream(seed, "img");
        let data = (0..3 * size * size).map(|_| r.random_range(-1.0..1.0)).collect();
        Image::new(Tensor::new(&[3, size, size], data).unwrap()).unwrap()
    }

    // Direct 2-D window sums, no separability.
    fn oracle_ssim(a: &Image, b: &Image) -> f64 {
        let (h, w) = (a.height(), a.width());
        let mut g = [[0.0; 7]; 7];
        let mut s = 0.0;
        for (i, row) in g.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (x, y) = (i as f64 - 3.0, j as f64 - 3.0);
                *v = (-(x * x + y * y) / 4.5).exp();
                s += *v;
            }
        }
        let mut total = 0.0;
        for c in 0..3 {
            let px = |img: &Image, y: usize, x: usize| (img.data()[(c * h + y) * w + x] + 1.0) / 2.0;
            let mut acc = 0.0;
            for y in 0..=h - 7 {
                for x in 0..=w - 7 {
                    let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..7 {
                        for j in 0..7 {
                            let k = g[i][j] / s;
                            let (p, q) = (px(a, y + i, x + j), px(b, y + i, x + j));
                            ma += k * p;
                            mb += k * q;
                            aa += k * p * p;
                            bb += k * q * q;
                            ab += k * p * q;
                        }
                    }
                    let (c1, c2) = (1e-4, 9e-4);
                    acc += (2.0 * ma * mb + c1) * (2.0 * (ab - ma * mb) + c2)
                        / ((ma * ma + mb * mb + c1) * (aa - ma * ma + bb - mb * mb + c2));
                }
            }
            total += acc / ((h - 6) * (w - 6)) as f64;
        }
        total / 3.0
    }

    #[test]
    fn ssim_matches_direct_window_loop() {
        let a = random_image(1, 16);
        let b = random_image(2, 16);
        let got = ssim(&a, &b).unwrap();
        assert!((got - oracle_ssim(&a, &b)).abs() < 1e-9);
    }

    #[test]
    fn ssim_self_and_symmetry() {
        let a = random_image(3, 12);
        let b = random_image(4, 12);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        assert!(ssim(&a, &random_image(5, 16)).is_err());
    }

    #[test]
    fn identity_similarity_basics() {
        let a = random_image(6, 32);
        let b = random_image(7, 32);
        assert!((identity_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(identity_similarity(&a, &b).unwrap(), identity_similarity(&b, &a).unwrap());
    }

    #[test]
    fn grid_is_symmetric_with_zero() {
        let g = alpha_grid();
        assert_eq!(g.len(), 11);
        assert_eq!(g[5], 0.0);
        for i in 0..11 {
            assert_eq!(g[i], -g[10 - i]);
        }
    }

    #[test]
    fn parallel_runner_keeps_order() {
        let out = run_parallel(17, 4, |i| i * i);
        assert_eq!(out, (0..17).map(|i| i * i).collect::<Vec<_>>());
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[f64::NAN, 1.0]), 1.0);
    }
}
