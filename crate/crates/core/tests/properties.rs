use nalgebra::DMatrix;
use nullface_core::backbones::{toy_face_layout, NoisePredictor, Timestep, ToyAttentionBackbone, ToyPointwiseBackbone};
use nullface_core::conditioning::{decoupled_attention, AdapterParams, AttentionContext, IdentityEmbedding};
use nullface_core::denoiser::{anonymize, anonymize_from_top, guidance_combine, mask_combine, AnonymizationConfig, AnonymizeInputs};
use nullface_core::evaluation::{
    frechet_distance, re_id_rate, AggregateRow, AttributeDistances, CellReport, ImageRow, MetricsReport,
};
use nullface_core::inversion::invert;
use nullface_core::masks::{preset_mask, MaskPreset, RegionMask};
use nullface_core::schedule::{NoiseSchedule, VarianceVariant};
use nullface_core::tensor::{LatentShape, LatentTensor};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

const DIM: usize = 8;

fn shape() -> LatentShape {
    LatentShape::new(4, 8, 8).unwrap()
}

fn tensor(values: Vec<f32>) -> LatentTensor {
    LatentTensor::from_vec(shape(), values).unwrap()
}

fn latent() -> impl Strategy<Value = LatentTensor> {
    prop::collection::vec(-2.0f32..2.0, shape().len()).prop_map(tensor)
}

fn raw_embedding() -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-1.0f32..1.0, DIM).prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 0.05))
}

fn backbone(kind: u8, seed: u64) -> Box<dyn NoisePredictor> {
    match kind {
        0 => Box::new(ToyPointwiseBackbone::new(seed, shape(), DIM)),
        _ => Box::new(ToyAttentionBackbone::new(seed, shape(), DIM)),
    }
}

fn timestep(sched: &NoiseSchedule, t: usize) -> Timestep {
    Timestep {
        t,
        steps: sched.steps(),
        alpha_bar: sched.alpha_bar(t),
    }
}

fn max_abs(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn posterior_mean_of_exact_noise_is_the_ddpm_posterior(
        x0 in latent(),
        eps in latent(),
        steps in 2usize..200,
        t_frac in 0.0f64..1.0,
    ) {
        let sched = NoiseSchedule::default_for_steps(steps).unwrap();
        let t = 2 + ((steps - 2) as f64 * t_frac) as usize;
        let xt = sched.add_noise(&x0, t, &eps).unwrap();
        let mean = sched.posterior_mean(&xt, &eps, t).unwrap();
        let (ab, ab_prev, beta, alpha) = (sched.alpha_bar(t), sched.alpha_bar(t - 1), sched.beta(t), sched.alpha(t));
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        for ((m, x), xt) in mean.data().iter().zip(x0.data()).zip(xt.data()) {
            let expected = c0 * *x as f64 + ct * *xt as f64;
            prop_assert!((*m as f64 - expected).abs() < 1e-5, "t={t}: {m} vs {expected}");
        }
    }

    #[test]
    fn negate_scale_is_homogeneous(raw in raw_embedding(), a in 0.0f64..3.0, b in 0.0f64..3.0) {
        let e = IdentityEmbedding::from_raw(&raw).unwrap();
        let ab = e.negate_scale(a * b).unwrap();
        let scaled = e.negate_scale(b).unwrap().scale(a).unwrap();
        prop_assert!(max_abs(ab.vector(), scaled.vector()) < 1e-6);
    }

    #[test]
    fn guidance_is_affine_in_scale(c in latent(), u in latent(), lambda in -20.0f64..20.0) {
        let g = guidance_combine(&c, &u, lambda).unwrap();
        for ((g, c), u) in g.data().iter().zip(c.data()).zip(u.data()) {
            let lhs = *g as f64 - *u as f64;
            let rhs = lambda * (*c as f64 - *u as f64);
            prop_assert!((lhs - rhs).abs() < 1e-6 * (1.0 + rhs.abs()), "{lhs} vs {rhs}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decoupled_attention_is_linear_in_image_scale(
        q in prop::collection::vec(-1.0f64..1.0, 3 * 4),
        kt in prop::collection::vec(-1.0f64..1.0, 2 * 4),
        vt in prop::collection::vec(-1.0f64..1.0, 2 * 5),
        ki in prop::collection::vec(-1.0f64..1.0, 3 * 4),
        vi in prop::collection::vec(-1.0f64..1.0, 3 * 5),
        lambda in 0.0f32..4.0,
    ) {
        let q = DMatrix::from_row_slice(3, 4, &q);
        let text = AttentionContext::new(DMatrix::from_row_slice(2, 4, &kt), DMatrix::from_row_slice(2, 5, &vt)).unwrap();
        let image = AttentionContext::new(DMatrix::from_row_slice(3, 4, &ki), DMatrix::from_row_slice(3, 5, &vi)).unwrap();
        let out = |l: f32| decoupled_attention(&q, &text, &image, AdapterParams::new(l).unwrap()).unwrap();
        let (o0, o1, ol) = (out(0.0), out(1.0), out(lambda));
        let diff = (&ol - &o0) - (&o1 - &o0) * lambda as f64;
        prop_assert!(diff.amax() < 1e-5);
    }

    #[test]
    fn null_and_zero_scaled_conditions_agree(
        kind in 0u8..2,
        seed in any::<u64>(),
        x in latent(),
        raw in raw_embedding(),
        t in 1usize..50,
        lambda_img in 0.0f32..2.0,
    ) {
        let b = backbone(kind, seed);
        let sched = NoiseSchedule::default_for_steps(50).unwrap();
        let e = IdentityEmbedding::from_raw(&raw).unwrap();
        let zero = e.negate_scale(0.0).unwrap();
        let a = b.predict(&x, timestep(&sched, t), &IdentityEmbedding::null(DIM), lambda_img).unwrap();
        let z = b.predict(&x, timestep(&sched, t), &zero, lambda_img).unwrap();
        prop_assert_eq!(a, z);
    }

    #[test]
    fn mask_combine_matches_blend(h in latent(), u in latent(), m in prop::collection::vec(0.0f32..=1.0, 64)) {
        let mask = RegionMask::from_values(8, 8, m).unwrap();
        let out = mask_combine(&h, &u, &mask).unwrap();
        let plane = 64;
        for (i, o) in out.data().iter().enumerate() {
            let w = mask.values()[i % plane] as f64;
            let expected = w * h.data()[i] as f64 + (1.0 - w) * u.data()[i] as f64;
            prop_assert!((*o as f64 - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn downsampling_preserves_mask_mass(
        values in prop::collection::vec(0.0f32..=1.0, 32 * 32),
        factor in prop::sample::select(vec![1usize, 2, 4, 8]),
    ) {
        let mask = RegionMask::from_values(32, 32, values).unwrap();
        let small = mask.downsample_to(32 / factor, 32 / factor).unwrap();
        prop_assert!((small.mean() - mask.mean()).abs() < 1e-6);
    }

    #[test]
    fn schedules_serialize_bit_exactly(
        steps in 1usize..1000,
        start in 1e-5f64..1e-2,
        span in 0.0f64..0.05,
        beta in any::<bool>(),
    ) {
        let variant = if beta { VarianceVariant::Beta } else { VarianceVariant::Posterior };
        let s = NoiseSchedule::linear(steps, start, start + span, variant).unwrap();
        let back = NoiseSchedule::from_text(&s.to_text()).unwrap();
        prop_assert_eq!(s.betas(), back.betas());
        prop_assert_eq!(s.alpha_bars(), back.alpha_bars());
        prop_assert_eq!(s.sigmas(), back.sigmas());
        prop_assert_eq!(s.fingerprint(), back.fingerprint());
        prop_assert!(s.sigma(1) == 0.0 || beta);
        for t in 2..=steps {
            prop_assert!(s.sigma(t) > 0.0);
        }
    }

    #[test]
    fn frechet_is_symmetric_and_non_negative(
        a in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 4..12),
        b in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 4..12),
    ) {
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-8, "{ab} vs {ba}");
        prop_assert!(ab >= -1e-8);
    }

    #[test]
    fn reid_is_invariant_under_gallery_permutation(
        raws in prop::collection::vec(raw_embedding(), 3..10),
        noise in prop::collection::vec(prop::collection::vec(-0.5f32..0.5, DIM), 10),
        perm_seed in any::<u64>(),
    ) {
        let n = raws.len();
        let originals: Vec<_> = raws.iter().map(|r| IdentityEmbedding::from_raw(r).unwrap()).collect();
        let anonymized: Vec<_> = raws
            .iter()
            .zip(&noise)
            .map(|(r, d)| {
                let v: Vec<f32> = r.iter().zip(d).map(|(a, b)| a + b).collect();
                IdentityEmbedding::from_raw(&v)
            })
            .collect::<Result<_, _>>()
            .map_err(|e| TestCaseError::reject(e.to_string()))?;
        let base = re_id_rate(&originals, &anonymized).unwrap();

        // Reorder identities consistently in both lists.
        let mut order: Vec<usize> = (0..n).collect();
        let mut s = perm_seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (s >> 33) as usize % (i + 1));
        }
        let po: Vec<_> = order.iter().map(|&i| originals[i].clone()).collect();
        let pa: Vec<_> = order.iter().map(|&i| anonymized[i].clone()).collect();
        let permuted = re_id_rate(&po, &pa).unwrap();
        prop_assert_eq!(base.rate_percent, permuted.rate_percent);
        for (k, &i) in order.iter().enumerate() {
            prop_assert_eq!(base.hit(i), permuted.hit(k));
        }
    }

    #[test]
    fn aggregates_recompute_from_csv_rows(
        cells in prop::collection::vec(
            prop::collection::vec((0.0f64..2.0, any::<bool>(), prop::option::of(0.0f64..90.0)), 1..6),
            1..4,
        ),
    ) {
        let report = MetricsReport {
            cells: cells
                .iter()
                .enumerate()
                .map(|(c, rows)| {
                    let rows: Vec<ImageRow> = rows
                        .iter()
                        .enumerate()
                        .map(|(i, (d, hit, pose))| ImageRow {
                            cell: c,
                            image: format!("img_{i:02}"),
                            identity_distance: *d,
                            reidentified: *hit,
                            attributes: AttributeDistances { pose: *pose, ..Default::default() },
                        })
                        .collect();
                    let refs: Vec<&ImageRow> = rows.iter().collect();
                    let aggregate = AggregateRow::from_rows(c, &refs, Some(c as f64 * 0.5));
                    CellReport { cell: c, config: None, rows, aggregate }
                })
                .collect(),
        };
        let back = MetricsReport::from_csv(report.to_csv().unwrap().as_bytes()).unwrap();
        prop_assert_eq!(&back, &report);
        for cell in &back.cells {
            let refs: Vec<&ImageRow> = cell.rows.iter().collect();
            prop_assert_eq!(&AggregateRow::from_rows(cell.cell, &refs, cell.aggregate.frechet_distance), &cell.aggregate);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn skip_equivalence(
        kind in 0u8..2,
        seed in any::<u64>(),
        x0 in latent(),
        raw in raw_embedding(),
        steps in 4usize..40,
        skip_frac in 0.0f64..=1.0,
        start_frac in 0.0f64..=1.0,
        lambda_id in 0.0f64..1.5,
        lambda_cfg in 0.0f64..12.0,
        lambda_img in 0.0f32..1.5,
    ) {
        let b = backbone(kind, seed);
        let sched = NoiseSchedule::default_for_steps(steps).unwrap();
        let rec = invert(&x0, b.as_ref(), &sched, &IdentityEmbedding::null(DIM), seed).unwrap();
        let cfg = AnonymizationConfig {
            steps,
            t_skip: (steps as f64 * skip_frac).round() as usize,
            lambda_id,
            lambda_cfg,
            lambda_img,
            mask_preset: MaskPreset::KeepEyes,
            mask_start: (steps as f64 * start_frac).round() as usize,
            seed,
        };
        let layout = toy_face_layout(16, 16).unwrap();
        let face = preset_mask(&layout, MaskPreset::WholeFace, 8, 8).unwrap();
        let user = preset_mask(&layout, MaskPreset::KeepEyes, 8, 8).unwrap();
        let embedding = IdentityEmbedding::from_raw(&raw).unwrap();
        let inputs = AnonymizeInputs {
            record: &rec,
            config: &cfg,
            user_mask: &user,
            face_mask: &face,
            embedding: &embedding,
            backbone: b.as_ref(),
            schedule: &sched,
        };
        let direct = anonymize(&inputs, false).unwrap().latent;
        let from_top = anonymize_from_top(&inputs, false).unwrap().latent;
        prop_assert!(direct.max_abs_diff(&from_top).unwrap() <= 1e-5);

        // The lean record replays its intermediate latents.
        let lean = rec.clone().into_lean();
        let inputs = AnonymizeInputs { record: &lean, ..inputs };
        prop_assert!(anonymize(&inputs, false).unwrap().latent.max_abs_diff(&direct).unwrap() <= 1e-5);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn forward_draws_are_independent_across_steps(seed in any::<u64>(), x0_fill in -1.0f32..1.0) {
        let shape = LatentShape::new(4, 32, 32).unwrap();
        let b = ToyPointwiseBackbone::new(seed, shape, DIM);
        let sched = NoiseSchedule::default_for_steps(20).unwrap();
        let x0 = LatentTensor::filled(shape, x0_fill);
        let rec = invert(&x0, &b, &sched, &IdentityEmbedding::null(DIM), seed).unwrap();
        let residual = |t: usize| -> Vec<f64> {
            let a = sched.alpha_bar(t).sqrt();
            rec.latent(t).unwrap().data().iter().map(|&x| x as f64 - a * x0_fill as f64).collect()
        };
        for t in 3..=20 {
            let (p, q) = (residual(t - 1), residual(t));
            let n = p.len() as f64;
            let (mp, mq) = (p.iter().sum::<f64>() / n, q.iter().sum::<f64>() / n);
            let cov: f64 = p.iter().zip(&q).map(|(a, b)| (a - mp) * (b - mq)).sum();
            let vp: f64 = p.iter().map(|a| (a - mp).powi(2)).sum();
            let vq: f64 = q.iter().map(|b| (b - mq).powi(2)).sum();
            let rho = cov / (vp * vq).sqrt();
            prop_assert!(rho.abs() < 0.1, "t={t}: rho={rho}");
        }
    }
}
