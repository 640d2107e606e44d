use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use chirality_core::harness::suite::{random_layout, random_tensor, recurrent_step_violation};
use chirality_core::recurrent::{gates_have_negation, CellKind, GateSharing, RecurrentCell};
use chirality_core::Tensor;

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn pre(cell: &RecurrentCell, kx: &str, kh: &str, x: &Tensor, h: &Tensor) -> Vec<f64> {
    let a = cell.affine(kx).unwrap().forward(x).unwrap();
    let b = cell.affine(kh).unwrap().forward(h).unwrap();
    a.data().iter().zip(b.data()).map(|(p, q)| p + q).collect()
}

#[test]
fn lstm_step_matches_textbook_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let il = random_layout(&mut rng, "i", 8, 3);
        let hl = random_layout(&mut rng, "h", 8, 3);
        let cell = RecurrentCell::random(
            CellKind::Lstm,
            &il,
            &hl,
            GateSharing::NegationInvariant,
            &mut rng,
        );
        let x = random_tensor(&mut rng, vec![3, il.size()]);
        let h = random_tensor(&mut rng, vec![3, hl.size()]);
        let c = random_tensor(&mut rng, vec![3, hl.size()]);
        let i: Vec<f64> = pre(&cell, "ii", "hi", &x, &h)
            .into_iter()
            .map(sigmoid)
            .collect();
        let o: Vec<f64> = pre(&cell, "io", "ho", &x, &h)
            .into_iter()
            .map(sigmoid)
            .collect();
        let f: Vec<f64> = pre(&cell, "if", "hf", &x, &h)
            .into_iter()
            .map(sigmoid)
            .collect();
        let g: Vec<f64> = pre(&cell, "ig", "hg", &x, &h)
            .into_iter()
            .map(f64::tanh)
            .collect();
        let c_next: Vec<f64> = (0..c.len())
            .map(|k| f[k] * c.data()[k] + i[k] * g[k])
            .collect();
        let h_next: Vec<f64> = (0..c.len()).map(|k| o[k] * c_next[k].tanh()).collect();
        let (h1, c1) = cell.lstm_step(&x, &h, &c).unwrap();
        for k in 0..c.len() {
            assert!((h1.data()[k] - h_next[k]).abs() < 1e-13);
            assert!((c1.data()[k] - c_next[k]).abs() < 1e-13);
        }
    }
}

#[test]
fn gru_step_matches_textbook_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let il = random_layout(&mut rng, "i", 8, 3);
        let hl = random_layout(&mut rng, "h", 8, 3);
        let cell = RecurrentCell::random(
            CellKind::Gru,
            &il,
            &hl,
            GateSharing::NegationInvariant,
            &mut rng,
        );
        let x = random_tensor(&mut rng, vec![2, il.size()]);
        let h = random_tensor(&mut rng, vec![2, hl.size()]);
        let r: Vec<f64> = pre(&cell, "ir", "hr", &x, &h)
            .into_iter()
            .map(sigmoid)
            .collect();
        let z: Vec<f64> = pre(&cell, "iz", "hz", &x, &h)
            .into_iter()
            .map(sigmoid)
            .collect();
        let xn = cell.affine("in").unwrap().forward(&x).unwrap();
        let hn = cell.affine("hn").unwrap().forward(&h).unwrap();
        let h1 = cell.gru_step(&x, &h).unwrap();
        for k in 0..h.len() {
            let n = (xn.data()[k] + r[k] * hn.data()[k]).tanh();
            let expected = (1.0 - z[k]) * n + z[k] * h.data()[k];
            assert!((h1.data()[k] - expected).abs() < 1e-13);
        }
    }
}

#[test]
fn unroll_feeds_state_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let il = random_layout(&mut rng, "i", 6, 2);
    let hl = random_layout(&mut rng, "h", 6, 2);
    for kind in [CellKind::Lstm, CellKind::Gru] {
        let cell = RecurrentCell::random(kind, &il, &hl, GateSharing::NegationInvariant, &mut rng);
        let x = random_tensor(&mut rng, vec![2, 4, il.size()]);
        let y = cell.unroll(&x, None, None).unwrap();
        assert_eq!(y.shape(), &[2, 4, hl.size()]);
        for b in 0..2 {
            let mut h = Tensor::zeros(vec![1, hl.size()]);
            let mut c = Tensor::zeros(vec![1, hl.size()]);
            for t in 0..4 {
                let xt = Tensor::row(
                    x.data()[(b * 4 + t) * il.size()..(b * 4 + t + 1) * il.size()].to_vec(),
                );
                match kind {
                    CellKind::Lstm => (h, c) = cell.lstm_step(&xt, &h, &c).unwrap(),
                    CellKind::Gru => h = cell.gru_step(&xt, &h).unwrap(),
                }
                let got = &y.data()[(b * 4 + t) * hl.size()..(b * 4 + t + 1) * hl.size()];
                for (p, q) in got.iter().zip(h.data()) {
                    assert!((p - q).abs() < 1e-13);
                }
            }
        }
    }
}

#[test]
fn gates_carry_no_negation_and_naive_gates_break_equivariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let il = chirality_core::JointLayout::synthetic("i", 2, 1, 2, &[0]).unwrap();
    let hl = chirality_core::JointLayout::synthetic("h", 2, 1, 3, &[1]).unwrap();
    let good = RecurrentCell::random(
        CellKind::Lstm,
        &il,
        &hl,
        GateSharing::NegationInvariant,
        &mut rng,
    );
    let naive = RecurrentCell::random(CellKind::Lstm, &il, &hl, GateSharing::FullChiral, &mut rng);
    assert!(!gates_have_negation(&good));
    assert!(gates_have_negation(&naive));
    let (step, gates) = recurrent_step_violation(&good, 20, &mut rng).unwrap();
    assert!(step < 1e-12 && gates < 1e-12);
    let (step, _) = recurrent_step_violation(&naive, 20, &mut rng).unwrap();
    assert!(step > 1e-3);
}
