use std::f64::consts::LN_2;

use dpo_lab::field::{sample_field, sample_landscape, Axis, FieldSample, GridSpec, Spacing, Thresholds};
use dpo_lab::flow::{integrate_flow, IntegratorConfig};
use dpo_lab::loss::{
    dpo_gradient, dpo_loss, dpo_loss_sigmoid_form, finite_diff_gradient, LossParams, RatioPoint,
    ReferencePair,
};
use dpo_lab::policy::{
    dpo_policy_gradient, dpo_policy_loss, train, PreferenceTriple, Response, TabularPolicy,
    TrainConfig,
};
use dpo_lab::verify::relative_error;
use proptest::prelude::*;

fn ratio() -> impl Strategy<Value = f64> {
    0.01f64..=2.0
}

fn beta() -> impl Strategy<Value = f64> {
    0.01f64..=2.0
}

fn pt(x1: f64, x2: f64) -> RatioPoint {
    RatioPoint::new(x1, x2).unwrap()
}

fn prm(b: f64) -> LossParams {
    LossParams::new(b).unwrap()
}

proptest! {
    #[test]
    fn gradient_matches_central_differences(x1 in ratio(), x2 in ratio(), b in beta()) {
        let p = pt(x1, x2);
        let err = relative_error(
            &dpo_gradient(&p, &prm(b)).unwrap(),
            &finite_diff_gradient(&p, &prm(b), 1e-6).unwrap(),
        );
        prop_assert!(err < 1e-6, "rel err {}", err);
    }

    #[test]
    fn update_rate_is_x2_over_x1_for_any_beta(x1 in ratio(), x2 in ratio(), b in beta()) {
        let g = dpo_gradient(&pt(x1, x2), &prm(b)).unwrap();
        let rate = g.d_x1.abs() / g.d_x2;
        let exact = x2 / x1;
        prop_assert!((rate - exact).abs() <= 8.0 * f64::EPSILON * exact);
    }

    #[test]
    fn sigmoid_and_ratio_forms_agree(
        pi_w in 0.001f64..=1.0,
        pi_l in 0.001f64..=1.0,
        ref_w in 0.001f64..=1.0,
        ref_l in 0.001f64..=1.0,
        b in beta(),
    ) {
        let refs = ReferencePair::new(ref_w, ref_l).unwrap();
        let a = dpo_loss_sigmoid_form(pi_w, pi_l, &refs, &prm(b)).unwrap();
        let r = dpo_loss(&RatioPoint::from_probabilities(pi_w, pi_l, refs).unwrap(), &prm(b));
        prop_assert!((a - r).abs() <= 1e-12 * r);
    }

    #[test]
    fn gradient_signs(x1 in ratio(), x2 in ratio(), b in beta()) {
        let g = dpo_gradient(&pt(x1, x2), &prm(b)).unwrap();
        prop_assert!(g.d_x1 < 0.0 && g.d_x2 > 0.0);
        let (d1, d2) = g.descent_direction().unwrap();
        prop_assert!(d1 > 0.0 && d2 < 0.0);
        prop_assert!((d1.hypot(d2) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_falls_in_x1_and_rises_in_x2(x1 in ratio(), x2 in ratio(), b in beta()) {
        let l = dpo_loss(&pt(x1, x2), &prm(b));
        prop_assert!(dpo_loss(&pt(x1 * 1.5, x2), &prm(b)) < l);
        prop_assert!(dpo_loss(&pt(x1, x2 * 1.5), &prm(b)) > l);
        prop_assert!(l > 0.0);
    }

    #[test]
    fn diagonal_loss_is_log_two(c in 1e-6f64..=1e3, b in beta()) {
        prop_assert_eq!(dpo_loss(&pt(c, c), &prm(b)), LN_2);
    }

    #[test]
    fn field_sample_is_consistent(x1 in ratio(), x2 in ratio(), b in beta()) {
        let t = Thresholds::new(0.5, 1.5).unwrap();
        let s = FieldSample::at(pt(x1, x2), &prm(b), &t).unwrap();
        prop_assert!((s.unit_dir.0.hypot(s.unit_dir.1) - 1.0).abs() < 1e-12);
        prop_assert!((s.grad_norm - s.grad.d_x1.hypot(s.grad.d_x2)).abs() <= 1e-15 * s.grad_norm);
        prop_assert_eq!(s.ratio, x2 / x1);
    }

    #[test]
    fn landscape_differences_reproduce_field(x1 in 0.1f64..=2.0, x2 in 0.1f64..=2.0, b in beta()) {
        let h = 1e-4;
        let grid = GridSpec::new(
            Axis::new(x1 - h, x1 + h, 3).unwrap(),
            Axis::new(x2 - h, x2 + h, 3).unwrap(),
            Spacing::Linear,
        );
        let land = sample_landscape(&grid, &prm(b));
        let field = sample_field(&grid, &prm(b)).unwrap();
        // Row-major 3x3: centre is 4, x1 neighbours 3/5, x2 neighbours 1/7.
        let dx1 = land[5].point.x1() - land[3].point.x1();
        let dx2 = land[7].point.x2() - land[1].point.x2();
        let g1 = (land[5].loss - land[3].loss) / dx1;
        let g2 = (land[7].loss - land[1].loss) / dx2;
        let c = field[4].grad;
        prop_assert!((g1 - c.d_x1).abs() <= 1e-6 * c.d_x1.abs() + 1e-11, "{} vs {}", g1, c.d_x1);
        prop_assert!((g2 - c.d_x2).abs() <= 1e-6 * c.d_x2.abs() + 1e-11, "{} vs {}", g2, c.d_x2);
    }

    #[test]
    fn points_below_floor_are_rejected(x in -1.0f64..1e-8) {
        prop_assert!(RatioPoint::new(x, 1.0).is_err());
        prop_assert!(RatioPoint::new(1.0, x).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn flow_is_monotone_and_keeps_radius(x1 in 0.05f64..=2.0, x2 in 0.05f64..=2.0, b in beta()) {
        let r = x1.hypot(x2);
        // Speeds reach ~beta / min(x1, x2), so scale the step to the fastest coordinate.
        let m = x1.min(x2);
        let cfg = IntegratorConfig { step: 1e-3 * m * m, max_steps: 20_000, ..Default::default() };
        let tr = integrate_flow(pt(x1, x2), &prm(b), &cfg).unwrap();
        let bad = tr.monotonicity_violations(1e-9);
        prop_assert!(bad.is_empty(), "{:?}", bad.first());
        // Away from the extinction endpoint the circle is followed closely.
        for s in tr.steps.iter().filter(|s| s.point.x2() >= 0.1 * r) {
            prop_assert!((s.point.x1().hypot(s.point.x2()) - r).abs() < 1e-10 * r);
        }
        if x2 < x1 {
            prop_assert!(tr.speed_asymmetry_violations().is_empty());
        }
    }

    #[test]
    fn policy_gradient_matches_finite_differences(
        vocab in 2usize..=4,
        max_len in 1usize..=3,
        raw_w in prop::collection::vec(0u32..4, 1..=3),
        raw_l in prop::collection::vec(0u32..4, 1..=3),
        seed_logits in prop::collection::vec(-1.5f64..1.5, 80),
        b in beta(),
    ) {
        let clip = |raw: &[u32]| -> Vec<u32> {
            raw.iter().take(max_len).map(|t| t % vocab as u32).collect()
        };
        let (y_w, y_l) = (Response(clip(&raw_w)), Response(clip(&raw_l)));
        prop_assume!(y_w != y_l);
        let triple = PreferenceTriple::new("p", y_w, y_l).unwrap();
        let mut pol = TabularPolicy::autoregressive(vec!["p".into()], vocab, max_len).unwrap();
        let reference = pol.clone();
        for (w, s) in pol.logits_mut().iter_mut().zip(seed_logits.iter().cycle()) {
            *w = *s;
        }
        let params = prm(b);
        let g = dpo_policy_gradient(&pol, &reference, &triple, &params).unwrap();
        let h = 1e-6;
        let mut probe = pol.clone();
        let mut worst: f64 = 0.0;
        let scale = g.0.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..g.0.len() {
            let w = pol.logits()[i];
            probe.logits_mut()[i] = w + h;
            let up = dpo_policy_loss(&probe, &reference, &triple, &params).unwrap();
            probe.logits_mut()[i] = w - h;
            let down = dpo_policy_loss(&probe, &reference, &triple, &params).unwrap();
            probe.logits_mut()[i] = w;
            worst = worst.max(((up - down) / (2.0 * h) - g.0[i]).abs());
        }
        prop_assert!(worst <= 1e-5 * scale, "abs err {} vs scale {}", worst, scale);
    }

    #[test]
    fn atomic_training_conserves_probability(
        k in 3usize..=8,
        lr in 0.0f64..=1.0,
        b in beta(),
    ) {
        let ds = vec![PreferenceTriple::new("p", Response::atomic(0), Response::atomic(1)).unwrap()];
        let pol = TabularPolicy::atomic(vec!["p".into()], k).unwrap();
        let cfg = TrainConfig { lr, steps: 20, params: prm(b), tracked: 0 };
        let tr = train(&pol, &pol, &ds, &cfg).unwrap();
        for r in &tr.records {
            prop_assert!((r.pi_w + r.pi_l + r.rest_mass - 1.0).abs() < 1e-12);
        }
        for w in tr.records.windows(2) {
            prop_assert!(w[1].pi_w >= w[0].pi_w && w[1].pi_l <= w[0].pi_l);
        }
    }
}
