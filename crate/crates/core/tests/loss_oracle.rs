mod support;

use cored::losses::{self, LossTerms, LossWeights};
use cored::repmem;
use cored::{BlockSpec, Tape};
use proptest::prelude::*;
use rand::Rng;
use support::fixtures::{random_logit_batch, rng, rows_tensor};
use support::oracle;

struct BatchValues {
    student: f64,
    distillation: f64,
    representation: f64,
    total: f64,
}

fn tape_losses(t: &[[f64; 2]], s: &[[f64; 2]], labels: &[u8], weights: &LossWeights, spec: &BlockSpec) -> BatchValues {
    let mut tape = Tape::new();
    let tv = tape.constant(rows_tensor(t));
    let sv = tape.param(rows_tensor(s));
    let ls = losses::student_loss(&mut tape, sv, labels).unwrap();
    let ld = losses::distillation_loss(&mut tape, tv, sv, weights.tau).unwrap();
    let tp = tape.softmax(tv, 1.0).unwrap();
    let sp = tape.softmax(sv, 1.0).unwrap();
    let (lr, _) = repmem::representation_loss_on_tape(&mut tape, tp, sp, labels, spec).unwrap();
    let terms = LossTerms { student: Some(ls), distillation: Some(ld), representation: Some(lr), penalty: None };
    let (_, b) = losses::combine(&mut tape, terms, weights).unwrap();
    BatchValues { student: b.student, distillation: b.distillation, representation: b.representation, total: b.total }
}

fn oracle_losses(
    t: &[[f64; 2]],
    s: &[[f64; 2]],
    labels: &[u8],
    weights: &LossWeights,
    spec: &BlockSpec,
) -> BatchValues {
    let tp: Vec<[f64; 2]> = t.iter().map(|&z| oracle::softmax2(z, 1.0)).collect();
    let sp: Vec<[f64; 2]> = s.iter().map(|&z| oracle::softmax2(z, 1.0)).collect();
    let student = oracle::student_loss(s, labels);
    let distillation = oracle::distillation_loss(t, s, weights.tau);
    let representation = oracle::representation_loss(&tp, &sp, labels, spec.blocks, spec.width, spec.start);
    let total = weights.alpha * student + weights.beta * distillation + weights.gamma * representation;
    BatchValues { student, distillation, representation, total }
}

#[test]
fn batched_losses_equal_per_sample_oracle_on_100_batches() {
    let mut r = rng(77);
    for batch in 0..100 {
        let n = r.random_range(1..=24);
        let (t, s, labels) = random_logit_batch(&mut r, n, 4.0);
        let weights = LossWeights {
            alpha: r.random_range(0.0..2.0),
            beta: r.random_range(0.0..2.0),
            gamma: r.random_range(0.0..2.0),
            tau: [1.0, 2.0, 5.0, 20.0][batch % 4],
            ..Default::default()
        };
        let spec = if batch % 5 == 0 { BlockSpec::single() } else { BlockSpec::default() };
        let got = tape_losses(&t, &s, &labels, &weights, &spec);
        let want = oracle_losses(&t, &s, &labels, &weights, &spec);
        for (name, g, w) in [
            ("student", got.student, want.student),
            ("distillation", got.distillation, want.distillation),
            ("representation", got.representation, want.representation),
            ("total", got.total, want.total),
        ] {
            assert!((g - w).abs() < 1e-10, "batch {batch} {name}: {g} vs {w}");
        }
    }
}

#[test]
fn two_sample_batch_is_mean_of_singles() {
    let rows = [[1.5, -0.3], [-2.0, 0.7]];
    let labels = [1u8, 0];
    let mut tape = Tape::new();
    let both = tape.param(rows_tensor(&rows));
    let l = losses::student_loss(&mut tape, both, &labels).unwrap();
    let mean = (oracle::student_loss_one(rows[0], 1) + oracle::student_loss_one(rows[1], 0)) / 2.0;
    assert!((tape.value(l).item() - mean).abs() < 1e-12);
}

fn tape_student(rows: &[[f64; 2]], labels: &[u8]) -> f64 {
    let mut tape = Tape::new();
    let v = tape.param(rows_tensor(rows));
    let l = losses::student_loss(&mut tape, v, labels).unwrap();
    tape.value(l).item()
}

fn tape_distill(t: &[[f64; 2]], s: &[[f64; 2]], tau: f64) -> f64 {
    let mut tape = Tape::new();
    let tv = tape.constant(rows_tensor(t));
    let sv = tape.param(rows_tensor(s));
    let l = losses::distillation_loss(&mut tape, tv, sv, tau).unwrap();
    tape.value(l).item()
}

fn tape_representation(t: &[[f64; 2]], s: &[[f64; 2]], labels: &[u8], spec: &BlockSpec) -> f64 {
    let mut tape = Tape::new();
    let tp = tape.constant(rows_tensor(t));
    let tp = tape.softmax(tp, 1.0).unwrap();
    let sp = tape.param(rows_tensor(s));
    let sp = tape.softmax(sp, 1.0).unwrap();
    let (l, _) = repmem::representation_loss_on_tape(&mut tape, tp, sp, labels, spec).unwrap();
    tape.value(l).item()
}

fn logit_rows(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<[f64; 2]>> {
    prop::collection::vec([-8.0..8.0f64, -8.0..8.0f64], n)
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in logit_rows(1..12), t in 0.05..50.0f64) {
        let mut tape = Tape::new();
        let v = tape.constant(rows_tensor(&rows));
        let p = tape.softmax(v, t).unwrap();
        for row in tape.value(p).data().chunks(2) {
            prop_assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn huge_temperature_is_uniform(rows in logit_rows(1..8)) {
        let mut tape = Tape::new();
        let v = tape.constant(rows_tensor(&rows));
        let p = tape.softmax(v, 1e6).unwrap();
        prop_assert!(tape.value(p).data().iter().all(|&x| (x - 0.5).abs() < 1e-4));
    }

    #[test]
    fn distillation_obeys_gibbs(t in logit_rows(1..10), s_seed in logit_rows(10..11), tau in 0.5..30.0f64) {
        let s = &s_seed[..t.len()];
        let entropy: f64 = t.iter().map(|&z| oracle::entropy(oracle::softmax2(z, tau))).sum::<f64>() / t.len() as f64;
        prop_assert!(tape_distill(&t, s, tau) >= entropy - 1e-12);
        prop_assert!((tape_distill(&t, &t, tau) - entropy).abs() < 1e-12);
    }

    #[test]
    fn row_shift_changes_nothing(
        t in logit_rows(2..10),
        s_seed in logit_rows(10..11),
        labels_seed in prop::collection::vec(0..2u8, 10),
        shift in -50.0..50.0f64,
    ) {
        let n = t.len();
        let (s, labels) = (&s_seed[..n], &labels_seed[..n]);
        let shifted = |rows: &[[f64; 2]]| rows.iter().map(|r| [r[0] + shift, r[1] + shift]).collect::<Vec<_>>();
        let (ts, ss) = (shifted(&t), shifted(s));
        let spec = BlockSpec::default();
        prop_assert!((tape_student(s, labels) - tape_student(&ss, labels)).abs() < 1e-9);
        prop_assert!((tape_distill(&t, s, 20.0) - tape_distill(&ts, &ss, 20.0)).abs() < 1e-9);
        prop_assert!((tape_representation(&t, s, labels, &spec) - tape_representation(&ts, &ss, labels, &spec)).abs() < 1e-9);
    }

    #[test]
    fn batch_order_is_irrelevant(
        t in logit_rows(2..12),
        s_seed in logit_rows(12..13),
        labels_seed in prop::collection::vec(0..2u8, 12),
        rotate in 0usize..12,
    ) {
        let n = t.len();
        let (s, labels) = (&s_seed[..n], &labels_seed[..n]);
        let k = rotate % n;
        let rot = |v: &[[f64; 2]]| { let mut v = v.to_vec(); v.rotate_left(k); v };
        let mut lr = labels.to_vec();
        lr.rotate_left(k);
        let mut rev_s = s.to_vec();
        rev_s.reverse();
        let mut rev_l = labels.to_vec();
        rev_l.reverse();
        prop_assert!((tape_student(s, labels) - tape_student(&rot(s), &lr)).abs() < 1e-12);
        prop_assert!((tape_student(s, labels) - tape_student(&rev_s, &rev_l)).abs() < 1e-12);
        let spec = BlockSpec::default();
        let a = tape_representation(&t, s, labels, &spec);
        prop_assert!((a - tape_representation(&rot(&t), &rot(s), &lr, &spec)).abs() < 1e-12);
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn single_block_is_global_gap(
        t in logit_rows(2..16),
        s_seed in logit_rows(16..17),
        labels_seed in prop::collection::vec(0..2u8, 16),
    ) {
        let n = t.len();
        let (s, labels) = (&s_seed[..n], &labels_seed[..n]);
        let mut want = 0.0;
        for class in 0..2u8 {
            let members: Vec<usize> = (0..n)
                .filter(|&i| labels[i] == class && oracle::softmax2(t[i], 1.0)[class as usize] >= 0.5)
                .collect();
            if members.is_empty() {
                continue;
            }
            let mean = |rows: &[[f64; 2]]| members.iter().map(|&i| oracle::softmax2(rows[i], 1.0)[class as usize]).sum::<f64>() / members.len() as f64;
            want += (mean(s) - mean(&t)).powi(2);
        }
        prop_assert!((tape_representation(&t, s, labels, &BlockSpec::single()) - want).abs() < 1e-12);
    }
}
