use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use purerisk::calibrate::{calibrate_weights, combination_scalars, Distance, NegativeWeightPolicy};
use purerisk::cox::{design_breslow, design_influence, fit_design, pure_risk, CoxDesign, CoxOptions};
use purerisk::data::{EventTime, Source, SurvivalRecord, WeightedSample};
use purerisk::io::{read_sample, write_sample};
use purerisk::propensity::{ipw_pseudoweights, LogisticOptions, PropensityModelSpec};

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 48,
        ..ProptestConfig::default()
    }
}

/// `(z, time, event, weight)` rows with at least a few events.
fn survival_rows(p: usize) -> impl Strategy<Value = Vec<(Vec<f64>, f64, bool, f64)>> {
    prop::collection::vec(
        (
            prop::collection::vec(-2.0..2.0f64, p),
            0.1..10.0f64,
            any::<bool>(),
            0.2..5.0f64,
        ),
        15..60,
    )
    .prop_filter("need events", |rows| rows.iter().filter(|r| r.2).count() >= 5)
}

fn design(rows: &[(Vec<f64>, f64, bool, f64)]) -> CoxDesign {
    let p = rows[0].0.len();
    CoxDesign::new(
        p,
        rows.iter().flat_map(|r| r.0.clone()).collect(),
        rows.iter().map(|r| r.1).collect(),
        rows.iter().map(|r| r.2).collect(),
        rows.iter().map(|r| r.3).collect(),
    )
    .unwrap()
}

fn record(id: usize, z: Vec<f64>, d: bool, x: f64, dt: bool, xt: f64, with_incidence: bool) -> SurvivalRecord {
    SurvivalRecord {
        id: id.to_string(),
        z,
        incidence: with_incidence.then_some(EventTime::new(d, x)),
        mortality: EventTime::new(dt, xt),
        imputed: None,
        entry_offset: 0.0,
        stratum: None,
        psu: None,
        group: "all".into(),
    }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn cox_fit_is_invariant_to_weight_scale(rows in survival_rows(2), c in 0.01..100.0f64) {
        let d = design(&rows);
        let Ok(fit) = fit_design(&d, None, &CoxOptions::default()) else { return Ok(()) };
        let scaled = d.reweighted(rows.iter().map(|r| r.3 * c).collect()).unwrap();
        let fit2 = fit_design(&scaled, None, &CoxOptions::default()).unwrap();
        for (a, b) in fit.beta.iter().zip(&fit2.beta) {
            prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
    }

    #[test]
    fn mirrored_sample_has_zero_coefficient(rows in survival_rows(1)) {
        let mirrored: Vec<_> = rows
            .iter()
            .flat_map(|r| [r.clone(), (vec![-r.0[0]], r.1, r.2, r.3)])
            .collect();
        let fit = fit_design(&design(&mirrored), None, &CoxOptions::default()).unwrap();
        prop_assert!(fit.beta[0].abs() < 1e-8);
    }

    #[test]
    fn influence_weighted_sum_vanishes(rows in survival_rows(2)) {
        let d = design(&rows);
        let opts = CoxOptions { tol: 1e-12, ..CoxOptions::default() };
        let Ok(fit) = fit_design(&d, None, &opts) else { return Ok(()) };
        let infl = design_influence(&d, &fit.beta).unwrap();
        let w: Vec<f64> = rows.iter().map(|r| r.3).collect();
        let scale = infl.values.amax().max(1.0);
        for s in infl.weighted_sum(&w) {
            prop_assert!(s.abs() <= 1e-7 * scale * w.len() as f64);
        }
    }

    #[test]
    fn breslow_is_a_nondecreasing_curve_from_zero(rows in survival_rows(2), b in prop::collection::vec(-1.0..1.0f64, 2)) {
        let h = design_breslow(&design(&rows), &b).unwrap();
        prop_assert_eq!(h.eval(0.0), 0.0);
        prop_assert!(h.cumulative().windows(2).all(|w| w[1] >= w[0]));
        let mut last = 0.0;
        for k in 0..=40 {
            let r = pure_risk(&h, &b, &[0.3, -0.2], k as f64 * 0.3).unwrap();
            prop_assert!((0.0..=1.0).contains(&r) && r >= last);
            last = r;
        }
    }

    #[test]
    fn calibration_meets_constraints(
        base in prop::collection::vec(0.5..10.0f64, 20..50),
        shift in prop::collection::vec(-0.1..0.1f64, 2),
        seed in any::<u64>(),
    ) {
        let n = base.len();
        let v = DMatrix::from_fn(n, 3, |i, j| match j {
            0 => 1.0,
            1 => ((i as u64).wrapping_mul(seed | 1) % 97) as f64 / 97.0,
            _ => (i as f64 / n as f64 - 0.5).powi(2),
        });
        let totals = v.transpose() * DVector::from_vec(base.clone());
        let target = DVector::from_fn(3, |j, _| if j == 0 { totals[0] } else { totals[j] * (1.0 + shift[j - 1]) });
        match calibrate_weights(&base, &v, &target, Distance::ChiSquared, NegativeWeightPolicy::Permit) {
            Ok(res) => {
                for (r, t) in res.achieved_constraints.iter().zip(target.iter()) {
                    prop_assert!(r.abs() <= 1e-9 * t.abs().max(1.0));
                }
                for ((w, f), b) in res.calibrated_weights.iter().zip(&res.factors).zip(&base) {
                    prop_assert!((w - f * b).abs() <= 1e-12 * w.abs().max(1.0));
                }
            }
            Err(purerisk::Error::CollinearAuxiliaries { .. }) => {}
            Err(e) => prop_assert!(false, "{e}"),
        }
    }

    #[test]
    fn combination_totals_halve(
        wc in prop::collection::vec(0.01..1e3f64, 1..100),
        ws in prop::collection::vec(0.01..1e4f64, 1..100),
    ) {
        let s = combination_scalars(&wc, &ws).unwrap();
        let (tc, ts): (f64, f64) = (wc.iter().sum(), ws.iter().sum());
        prop_assert!(s.a_c > 0.0 && s.a_s > 0.0);
        prop_assert!((s.a_c * tc + s.a_s * ts - (tc + ts) / 2.0).abs() <= 1e-12 * (tc + ts));
    }

    #[test]
    fn pseudoweights_ignore_affine_covariate_rescaling(
        zc in prop::collection::vec(-1.0..1.5f64, 30..60),
        zs in prop::collection::vec(-1.5..1.0f64, 30..60),
        a in 0.1..10.0f64,
        b in -5.0..5.0f64,
    ) {
        let build = |z: &[f64], src: Source, f: &dyn Fn(f64) -> f64, w: f64| {
            let recs = z.iter().enumerate().map(|(i, &v)| record(i, vec![f(v)], false, 1.0, false, 1.0, src == Source::Cohort)).collect();
            WeightedSample::new(recs, vec![w; z.len()], src).unwrap()
        };
        let spec = PropensityModelSpec::parse(&["z1"]).unwrap();
        let id = |v: f64| v;
        let aff = |v: f64| a * v + b;
        let r1 = ipw_pseudoweights(&build(&zc, Source::Cohort, &id, 1.0), &build(&zs, Source::Survey, &id, 20.0), &spec, &LogisticOptions::default());
        let r2 = ipw_pseudoweights(&build(&zc, Source::Cohort, &aff, 1.0), &build(&zs, Source::Survey, &aff, 20.0), &spec, &LogisticOptions::default());
        if let (Ok((s1, _)), Ok((s2, _))) = (r1, r2) {
            for (x, y) in s1.weights().iter().zip(s2.weights()) {
                prop_assert!((x - y).abs() <= 1e-6 * x.abs());
            }
        }
    }

    #[test]
    fn sample_csv_round_trip(
        rows in prop::collection::vec(
            (prop::collection::vec(-1e6..1e6f64, 3), any::<bool>(), 0.0..15.0f64, 0.0..15.0f64, 1e-3..1e4f64, any::<bool>()),
            1..30,
        ),
    ) {
        let recs: Vec<_> = rows
            .iter()
            .enumerate()
            .map(|(i, (z, d, x, gap, _, has))| {
                let inc = *has || i == 0;
                let mut r = record(i, z.clone(), *d, *x, *d && *gap < 5.0, x + gap, inc);
                r.stratum = (i % 3 == 0).then(|| format!("s{}", i % 2));
                r
            })
            .collect();
        let w: Vec<f64> = rows.iter().map(|r| r.4).collect();
        let s = WeightedSample::new(recs, w, Source::Cohort).unwrap();
        let mut buf = Vec::new();
        write_sample(&mut buf, &s).unwrap();
        let back = read_sample(buf.as_slice(), Source::Cohort).unwrap().sample;
        prop_assert_eq!(back.records(), s.records());
        prop_assert_eq!(back.weights(), s.weights());
    }
}
