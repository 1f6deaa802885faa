use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use nidslab::algorithms::{nids_init, nids_step_dz, nids_step_primal, NidsForm, StepSizes};
use nidslab::analysis::{audit_nids_run, certify_point};
use nidslab::linalg::sym_eigenvalues;
use nidslab::netgraph::{consensus_power, generate_graph, laplacian_weights, metropolis_weights, validate_mixing, GraphModel};
use nidslab::objectives::{centralized_reference, least_squares_term, ProblemInstance, ProxTerm};
use nidslab::stackmat::{max_admissible_c, DiagonalWeight, StackedMatrix};

fn model(kind: u8, prob: f64) -> GraphModel {
    match kind % 3 {
        0 => GraphModel::Ring,
        1 => GraphModel::Complete,
        _ => GraphModel::ErdosRenyi { prob },
    }
}

fn sorted_desc(m: &DMatrix<f64>) -> Vec<f64> {
    let mut v: Vec<f64> = sym_eigenvalues(m).unwrap().iter().cloned().collect();
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn generated_mixing_matrices_satisfy_assumptions(n in 2usize..50, kind in 0u8..3, prob in 0.2f64..0.9, seed in any::<u64>()) {
        let g = generate_graph(n, model(kind, prob), seed).unwrap();
        for w in [metropolis_weights(&g).unwrap(), laplacian_weights(&g, None).unwrap()] {
            let m = w.matrix();
            prop_assert!((m - m.transpose()).amax() <= 1e-12);
            for i in 0..n {
                prop_assert!((m.row(i).sum() - 1.0).abs() <= 1e-12);
            }
            let ev = sorted_desc(m);
            prop_assert!((ev[0] - 1.0).abs() <= 1e-10);
            prop_assert!(ev[1] < 1.0 - 1e-10);
            prop_assert!(ev[n - 1] > -1.0 + 1e-10);
            prop_assert!(validate_mixing(&w).all_passed());
        }
        let w = metropolis_weights(&g).unwrap();
        prop_assert!(w.matrix().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn consensus_power_spectrum_is_elementwise_power(n in 2usize..20, prob in 0.3f64..0.9, seed in any::<u64>(), t in 1u32..6) {
        let g = generate_graph(n, GraphModel::ErdosRenyi { prob }, seed).unwrap();
        let w = metropolis_weights(&g).unwrap();
        let wt = consensus_power(&w, t).unwrap();
        let mut base: Vec<f64> = sorted_desc(w.matrix()).iter().map(|l| l.powi(t as i32)).collect();
        base.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in sorted_desc(wt.matrix()).iter().zip(&base) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn nids_run_invariants(seed in any::<u64>(), n in 2usize..7, p in 1usize..5, scale in 0.2f64..1.95) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut smooth = vec![];
        let mut prox = vec![];
        for _ in 0..n {
            let m = rng.random_range(1..=5);
            let a = DMatrix::from_fn(m, p, |_, _| rng.sample::<f64, _>(StandardNormal)) / (m as f64).sqrt();
            let y = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
            smooth.push(least_squares_term(a, y).unwrap());
            prox.push(if rng.random_bool(0.5) { ProxTerm::Zero } else { ProxTerm::l1(0.05).unwrap() });
        }
        let mut prob = ProblemInstance::new(smooth, prox).unwrap();
        // A tiny ridge keeps the reference well defined for any draw.
        for s in &mut prob.smooth {
            let mut h = s.matrix().clone().insert_rows(0, p, 0.0);
            for j in 0..p {
                h[(j, j)] = 0.1;
            }
            let mut y = s.y().clone().insert_rows(0, p, 0.0);
            y.rows_mut(0, p).fill(0.0);
            *s = least_squares_term(h, y).unwrap();
        }
        prob.reference = Some(centralized_reference(&prob, 1e-14, 2_000_000).unwrap());
        let g = generate_graph(n, GraphModel::ErdosRenyi { prob: 0.6 }, seed).unwrap();
        let w = metropolis_weights(&g).unwrap();
        let alpha = DiagonalWeight::new(prob.lipschitz().iter().map(|l| scale / l).collect()).unwrap();
        let c = 0.9 * max_admissible_c(&w, &alpha).unwrap();
        let steps = StepSizes::checked(&prob, &w, alpha, c, false).unwrap();
        let x0 = StackedMatrix::zeros(n, p);

        let mut a = nids_init(&prob, &steps, &x0).unwrap();
        let mut b = a.clone();
        for _ in 0..60 {
            a = nids_step_primal(&a, &prob, &steps).unwrap();
            b = nids_step_dz(&b, &prob, &steps).unwrap();
            let scale = 1.0 + a.x.amax().max(a.z.amax());
            prop_assert!((a.x.as_matrix() - b.x.as_matrix()).amax() <= 1e-12 * scale);
            prop_assert!((a.z.as_matrix() - b.z.as_matrix()).amax() <= 1e-12 * scale);
            let col = a.d.column_mean();
            prop_assert!(col.amax() * n as f64 <= 1e-10 * (1.0 + a.d.amax()));
        }

        let x_star = StackedMatrix::consensual(n, prob.reference_x().unwrap());
        let target = certify_point(&x_star, &prob, steps.alpha(), &w).unwrap();
        let audit = audit_nids_run(&prob, &steps, &w, &x0, &target, 150, NidsForm::Primal).unwrap();
        for (k, slack) in audit.descent_slack.iter().enumerate() {
            let r = audit.delta_roundoff[k];
            let tol = 1e-10 * audit.v_general[k] + 4.0 * r * audit.v_general[k].sqrt() + 1e-14;
            prop_assert!(*slack >= -tol, "descent slack {} at k={}", slack, k + 1);
        }
        for k in 0..audit.deltas.len() - 1 {
            let (d0, d1) = (audit.deltas[k], audit.deltas[k + 1]);
            let r = audit.delta_roundoff[k];
            prop_assert!(d1 <= d0 * (1.0 + 1e-10) + 2.0 * d0.sqrt() * r + r * r, "delta rose at k={}", k + 1);
        }
        for ineq in &audit.inequality {
            prop_assert!(ineq.slack() >= -1e-8);
        }
    }
}
