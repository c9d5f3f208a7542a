use proptest::prelude::*;
use scoredistill::backends::MixtureDenoiser;
use scoredistill::conditioning::{ConditionSet, TextCondition};
use scoredistill::guidance::{apply_cfg, apply_pag, GuidanceConfig, PredictionBundle};
use scoredistill::inversion::plan_inversion;
use scoredistill::losses::{decomposed_gradient, sds_gradient, LossConfig, LossMode};
use scoredistill::render::CameraPose;
use scoredistill::sgc::{composite, pearson_with_grad, smooth_image, split_composite};
use scoredistill::tensor::{from_vec, rel_l2};

fn vec2() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, 2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sds_splits_into_dif_and_cfg(x0 in vec2(), eps in vec2(), t in 20usize..980, label in 0usize..4, lambda in 0.0f64..20.0) {
        let b = MixtureDenoiser::standard().unwrap();
        let x0 = from_vec(&[2], x0).unwrap();
        let eps = from_vec(&[2], eps).unwrap();
        let c = ConditionSet::text(TextCondition::Token(label));
        let cfg = |mode| {
            let mut c = LossConfig::new(mode);
            c.guidance.cfg_scale = lambda;
            c
        };
        let sds = sds_gradient(&x0, t, &c, &eps, &b, &cfg(LossMode::Sds)).unwrap();
        let dif = decomposed_gradient(&x0, t, &c, &eps, &b, &cfg(LossMode::DifOnly)).unwrap();
        let cf = decomposed_gradient(&x0, t, &c, &eps, &b, &cfg(LossMode::CfgOnly)).unwrap();
        prop_assert!(rel_l2(&(dif.grad + cf.grad), &sds.grad) < 1e-8);
    }

    #[test]
    fn zero_scales_return_the_conditional_prediction(c in vec2(), u in vec2(), p in vec2()) {
        let ec = from_vec(&[2], c).unwrap();
        let bundle = PredictionBundle::from_predictions(
            ec.clone(),
            Some(from_vec(&[2], u).unwrap()),
            Some(from_vec(&[2], p).unwrap()),
        ).unwrap();
        let g = GuidanceConfig { cfg_scale: 0.0, pag_scale: 0.0, ..GuidanceConfig::default() };
        prop_assert_eq!(apply_cfg(&bundle, &g).unwrap(), ec.clone());
        prop_assert_eq!(apply_pag(&bundle, &g).unwrap(), ec);
    }

    #[test]
    fn pearson_ignores_positive_affine_maps(seed in 0u64..1000, a in 0.01f64..100.0, b in -10.0f64..10.0) {
        let x = smooth_image(6, 5, seed).mapv(|v| v * v);
        let y = smooth_image(6, 5, seed + 1);
        let (r, _) = pearson_with_grad(&x, &y);
        let (r2, _) = pearson_with_grad(&x.mapv(|v| a * v + b), &y);
        prop_assert!((r - r2).abs() < 1e-10);
        prop_assert!(r.abs() <= 1.0 + 1e-12);
    }

    #[test]
    fn composite_round_trips(seed in 0u64..1000) {
        let views: Vec<_> = (0..4).map(|k| smooth_image(4, 3, seed * 4 + k)).collect();
        let grid = composite(&views);
        prop_assert_eq!(grid.shape(), &[8, 6, 3]);
        prop_assert_eq!(split_composite(&grid), views);
    }

    #[test]
    fn inversion_ladder_is_regular(target in 1usize..=1000, dt in 1usize..=200) {
        let plan = plan_inversion(target, dt, 1000).unwrap();
        prop_assert_eq!(*plan.ladder.last().unwrap(), target);
        prop_assert!(plan.ladder[0] >= 1 && plan.ladder[0] <= dt);
        prop_assert!(plan.ladder.windows(2).all(|w| w[1] - w[0] == dt));
    }

    #[test]
    fn azimuths_wrap(az in -1000.0f64..1000.0, el in -80.0f64..80.0) {
        let p = CameraPose::new(az, el).unwrap();
        prop_assert!((0.0..360.0).contains(&p.azimuth));
        let turns = (az - p.azimuth) / 360.0;
        prop_assert!((turns - turns.round()).abs() < 1e-9);
    }
}
