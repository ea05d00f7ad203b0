use proptest::prelude::*;

use latent_atlas::editing::{apply_edit, ganspace_from_samples, interfacegan_direction, Direction, DirectionSpace, Method, SvmConfig};
use latent_atlas::encoder::{EncoderConfig, EncoderModel};
use latent_atlas::eval::ssim;
use latent_atlas::inversion::{
    base_regularizer, invert, invert_observed, objective_gradient, reconstruction_loss, total_objective, InversionConfig,
    ObjectiveContext,
};
use latent_atlas::spaces::{sample, DetailCodes};
use latent_atlas::{FCode, GeneratorConfig, GeneratorModel, HybridCode, HybridTag, Image, LatentCode, Space, Tensor, WCode, ZCode};

fn micro() -> GeneratorModel {
    GeneratorModel::new(GeneratorConfig {
        init_seed: 4,
        ..GeneratorConfig::micro()
    })
    .unwrap()
}

fn micro_encoder(g: &GeneratorModel) -> EncoderModel {
    EncoderModel::new(EncoderConfig::for_generator(g.config(), 1)).unwrap()
}

fn unit(v: Vec<f64>) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 1e-3).then(|| v.iter().map(|x| x / n).collect())
}

fn image_from(values: &[f64], size: usize) -> Image {
    Image::new(Tensor::new(&[3, size, size], values.to_vec()).unwrap()).unwrap()
}

fn w_plus(rows: &[Vec<f64>]) -> LatentCode {
    LatentCode::WPlus(rows.iter().cloned().map(WCode::new).collect())
}

fn rows_of(code: &LatentCode) -> Vec<Vec<f64>> {
    match code {
        LatentCode::WPlus(ws) => ws.iter().map(|w| w.as_slice().to_vec()).collect(),
        LatentCode::ZPlus(zs) => zs.iter().map(|z| z.as_slice().to_vec()).collect(),
        LatentCode::Hybrid(h) => match &h.details {
            DetailCodes::Z(zs) => zs.iter().map(|z| z.as_slice().to_vec()).collect(),
            DetailCodes::W(ws) => ws.iter().map(|w| w.as_slice().to_vec()).collect(),
        },
        other => panic!("unexpected layout {:?}", other.space()),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn w_edits_compose_additively(
        rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 6), 1..5),
        n in prop::collection::vec(-1.0f64..1.0, 6),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
    ) {
        let Some(n) = unit(n) else { return Ok(()) };
        let dir = Direction::new("p", DirectionSpace::W, Method::Random, n.clone()).unwrap();
        let code = w_plus(&rows);
        let once = apply_edit(&code, &dir, a + b).unwrap();
        let twice = apply_edit(&apply_edit(&code, &dir, a).unwrap(), &dir, b).unwrap();
        for (x, y) in rows_of(&once).iter().zip(rows_of(&twice)) {
            for (p, q) in x.iter().zip(&y) {
                prop_assert!((p - q).abs() <= 1e-12);
            }
        }
        // The attribute score moves by exactly α along a unit normal.
        for (before, after) in rows.iter().zip(rows_of(&apply_edit(&code, &dir, a).unwrap())) {
            let s = |v: &[f64]| v.iter().zip(&n).map(|(x, y)| x * y).sum::<f64>();
            prop_assert!((s(&after) - s(before) - a).abs() <= 1e-9);
        }
    }

    #[test]
    fn z_edits_stay_on_the_sphere(
        raw in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 8), 1..5),
        n in prop::collection::vec(-1.0f64..1.0, 8),
        alpha in -2.0f64..2.0,
        broadcast in any::<bool>(),
    ) {
        let Some(n) = unit(n) else { return Ok(()) };
        let zs: Vec<ZCode> = raw
            .into_iter()
            .filter_map(unit)
            .map(|v| ZCode::new(v.iter().map(|x| x * 8f64.sqrt()).collect()))
            .collect();
        prop_assume!(!zs.is_empty());
        let f = FCode::new(Tensor::full(&[2, 2, 2], 0.3)).unwrap();
        let code = LatentCode::Hybrid(HybridCode {
            space: if broadcast { HybridTag::FZ } else { HybridTag::FZPlus },
            f: f.clone(),
            details: DetailCodes::Z(if broadcast { zs[..1].to_vec() } else { zs }),
        });
        let dir = Direction::new("p", DirectionSpace::Z, Method::Random, n).unwrap();
        let edited = apply_edit(&code, &dir, alpha).unwrap();
        for z in edited.z_codes() {
            prop_assert!((z.norm() - 8f64.sqrt()).abs() <= 1e-6);
        }
        let LatentCode::Hybrid(h) = edited else { unreachable!() };
        prop_assert_eq!(h.f, f);
    }

    #[test]
    fn ssim_is_bounded_and_mse_vanishes_on_self(
        a in prop::collection::vec(-1.0f64..1.0, 3 * 8 * 8),
        b in prop::collection::vec(-1.0f64..1.0, 3 * 8 * 8),
    ) {
        let (x, y) = (image_from(&a, 8), image_from(&b, 8));
        let s = ssim(&x, &y).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!((s - ssim(&y, &x).unwrap()).abs() <= 1e-9);
        prop_assert_eq!(x.mse(&x).unwrap(), 0.0);
    }
}

#[test]
fn ganspace_is_order_invariant_up_to_sign() {
    let g = micro();
    let d = g.config().latent_dim;
    let mut r = latent_atlas::rng::stream(2, "perm");
    let zs = latent_atlas::spaces::sample_z_batch(d, 600, &mut r);
    let ws = g.map_batch(&zs);
    let n = 600;
    let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
    let shuffle = |t: &Tensor| {
        let mut out = Vec::with_capacity(t.len());
        for &i in &perm {
            out.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        Tensor::new(&[n, d], out).unwrap()
    };
    let (a, aw, _) = ganspace_from_samples(&zs, &ws, 3).unwrap();
    let (b, bw, _) = ganspace_from_samples(&shuffle(&zs), &shuffle(&ws), 3).unwrap();
    for (x, y) in a.iter().chain(&aw).zip(b.iter().chain(&bw)) {
        let cos: f64 = x.vector.iter().zip(&y.vector).map(|(p, q)| p * q).sum();
        assert!((cos.abs() - 1.0).abs() < 1e-9, "{cos}");
    }
}

#[test]
fn interfacegan_is_invariant_to_duplication() {
    let mut r = latent_atlas::rng::stream(5, "dup");
    use rand::Rng;
    let codes: Vec<Vec<f64>> = (0..120).map(|_| (0..5).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    let labels: Vec<bool> = codes.iter().map(|c| c[0] + 0.5 * c[2] > 0.1).collect();
    let cfg = SvmConfig::default();
    let (a, _) = interfacegan_direction(&codes, &labels, DirectionSpace::W, &cfg).unwrap();
    let doubled: Vec<Vec<f64>> = codes.iter().chain(&codes).cloned().collect();
    let dl: Vec<bool> = labels.iter().chain(&labels).copied().collect();
    let (b, _) = interfacegan_direction(&doubled, &dl, DirectionSpace::W, &cfg).unwrap();
    for (x, y) in a.vector.iter().zip(&b.vector) {
        assert!((x - y).abs() < 1e-6, "{x} {y}");
    }
    let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
    let (c, _) = interfacegan_direction(&codes, &flipped, DirectionSpace::W, &cfg).unwrap();
    let cos: f64 = a.vector.iter().zip(&c.vector).map(|(p, q)| p * q).sum();
    assert!((cos + 1.0).abs() < 1e-6);
}

#[test]
fn retraction_holds_at_every_step_for_z_flavored_spaces() {
    let g = micro();
    let enc = micro_encoder(&g);
    let target = latent_atlas::toy::ToyDataset::new(8, 0).image(0).0;
    for space in [Space::Z, Space::ZPlus, Space::FZ, Space::FZPlus] {
        let cfg = InversionConfig {
            space,
            iterations: 40,
            lr: 0.05,
            ..Default::default()
        };
        let mut steps = 0;
        invert_observed(&target, &g, Some(&enc), None, &cfg, |_, code| {
            steps += 1;
            for z in code.z_codes() {
                assert!((z.norm() - 8f64.sqrt()).abs() <= 1e-4, "{space}");
            }
        })
        .unwrap();
        assert_eq!(steps, 40);
    }
}

#[test]
fn breakdown_sums_and_lambda_reg_zero_drops_the_term() {
    let g = micro();
    let enc = micro_encoder(&g);
    let target = latent_atlas::toy::ToyDataset::new(8, 1).image(3).0;
    for lambda_reg in [0.0, 10.0] {
        let cfg = InversionConfig {
            space: Space::FZPlus,
            iterations: 3,
            lambda_reg,
            ..Default::default()
        };
        let res = invert(&target, &g, Some(&enc), None, &cfg).unwrap();
        let f0 = res.f0.clone().unwrap();
        let ctx = ObjectiveContext::new(&target, Some(&f0), None, &cfg).unwrap();
        let l = total_objective(&g, &res.code, &ctx).unwrap();
        let sum = l.mse + cfg.lambda_per * l.perceptual + lambda_reg * l.reg;
        assert!((sum - l.total).abs() < 1e-9);
        let recon = reconstruction_loss(&res.code, &target, &g, cfg.lambda_per).unwrap();
        if lambda_reg == 0.0 {
            assert!((l.total - recon.total).abs() < 1e-12);
        }
        let LatentCode::Hybrid(h) = &res.code else { panic!() };
        assert!((l.reg - base_regularizer(&h.f, &f0).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn regularizer_gradient_is_two_diff_over_count() {
    let g = micro();
    let target = Image::filled(3, 8, 0.0);
    let cfg = InversionConfig {
        space: Space::FZPlus,
        lambda_per: 0.0,
        ..Default::default()
    };
    let c = g.config();
    let mut r = latent_atlas::rng::stream(9, "reg-grad");
    let f0 = FCode::new(Tensor::randn(&c.tap_shape(), 1.0, &mut r)).unwrap();
    let f = FCode::new(Tensor::randn(&c.tap_shape(), 1.0, &mut r)).unwrap();
    let zs = (0..c.num_detail_layers()).map(|_| latent_atlas::spaces::sample_z(8, &mut r)).collect();
    let code = LatentCode::Hybrid(HybridCode {
        space: HybridTag::FZPlus,
        f: f.clone(),
        details: DetailCodes::Z(zs),
    });
    let with = ObjectiveContext::new(&target, Some(&f0), None, &cfg).unwrap();
    let without = ObjectiveContext::new(&target, None, None, &cfg).unwrap();
    let (_, ga) = objective_gradient(&g, &code, &with, true).unwrap();
    let (_, gb) = objective_gradient(&g, &code, &without, true).unwrap();
    let count = f.tensor().len() as f64;
    for i in 0..f.tensor().len() {
        let reg_grad = (ga[0].data()[i] - gb[0].data()[i]) / cfg.lambda_reg;
        let expected = 2.0 * (f.tensor().data()[i] - f0.tensor().data()[i]) / count;
        assert!((reg_grad - expected).abs() < 1e-10);
    }
}

#[test]
fn large_lambda_reg_pins_f_to_the_encoder_estimate() {
    let g = micro();
    let enc = micro_encoder(&g);
    let target = latent_atlas::toy::ToyDataset::new(8, 2).image(1).0;
    let cfg = InversionConfig {
        space: Space::FZPlus,
        lambda_reg: 1e5,
        ..Default::default()
    };
    let res = invert(&target, &g, Some(&enc), None, &cfg).unwrap();
    let LatentCode::Hybrid(h) = &res.code else { panic!() };
    let rms = base_regularizer(&h.f, res.f0.as_ref().unwrap()).unwrap().sqrt();
    assert!(rms.is_finite() && rms <= 1e-2, "{rms}");
}

#[test]
fn standalone_self_inversion_reaches_small_loss() {
    let g = micro();
    let mut totals = Vec::new();
    for seed in 0..8 {
        let code = sample(Space::WPlus, &g, 100 + seed).unwrap();
        let target = g.synthesize(&code).unwrap();
        let cfg = InversionConfig {
            space: Space::WPlus,
            iterations: 1500,
            lr: 0.02,
            seed,
            ..Default::default()
        };
        let res = invert(&target, &g, None, None, &cfg).unwrap();
        let first = res.curve.first().unwrap().losses.total;
        assert!(res.final_losses.total < first, "loss did not decrease");
        totals.push(res.final_losses.total);
    }
    let m = latent_atlas::eval::median(&totals);
    assert!(m <= 1e-2, "median total {m}");
}
