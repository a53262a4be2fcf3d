//! Value-level kernels and the recurrent cell shared by decoders and the
//! external language model.

use super::tape::{self, Tape, Var};
use super::tensor::{ParamId, ParamSet, Tensor};
use crate::error::{shape_err, Result};

/// `y = W x (+ b)` on plain tensors.
pub fn affine(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    if w.shape().len() != 2 || w.cols() != x.len() {
        return Err(shape_err(
            "affine",
            format!("W has shape {:?}, x has length {}", w.shape(), x.len()),
        ));
    }
    if let Some(b) = b {
        if b.len() != w.rows() {
            return Err(shape_err(
                "affine",
                format!("bias length {} != output rows {}", b.len(), w.rows()),
            ));
        }
    }
    let y = (0..w.rows())
        .map(|r| {
            let dot: f64 = w.row(r).iter().zip(x.data()).map(|(a, c)| a * c).sum();
            dot + b.map_or(0.0, |b| b.data()[r])
        })
        .collect();
    Ok(Tensor::vector(y))
}

pub fn log_softmax(v: &Tensor) -> Result<Tensor> {
    tape::log_softmax_values(v.data()).map(Tensor::vector)
}

pub fn sigmoid(v: &Tensor) -> Tensor {
    Tensor::vector(v.data().iter().map(|x| tape::sigmoid(*x)).collect())
}

/// Parameters of one LSTM cell. Gate layout in the stacked matrices is
/// input, forget, cell candidate, output.
#[derive(Debug, Clone, Copy)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn register<R: rand::Rng>(
        params: &mut ParamSet,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w_ih = params.insert_uniform(format!("{prefix}.w_ih"), vec![4 * hidden, input], rng)?;
        let w_hh = params.insert_uniform(format!("{prefix}.w_hh"), vec![4 * hidden, hidden], rng)?;
        let bias = params.insert(format!("{prefix}.bias"), Tensor::zeros(vec![4 * hidden]))?;
        Ok(Self {
            w_ih,
            w_hh,
            bias,
            hidden,
        })
    }
}

/// Recurrent state `(h, c)`.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(tape: &mut Tape<'_>, hidden: usize) -> Self {
        Self {
            h: tape.zeros(hidden),
            c: tape.zeros(hidden),
        }
    }
}

/// One gated recurrent update. Returns the new state and its output `h'`.
pub fn recurrent_step(tape: &mut Tape<'_>, cell: &LstmCell, state: LstmState, input: Var) -> Result<(LstmState, Var)> {
    let n = cell.hidden;
    if tape.dim(state.h) != n || tape.dim(state.c) != n {
        return Err(shape_err(
            "recurrent_step",
            format!(
                "state dims ({}, {}) != hidden size {n}",
                tape.dim(state.h),
                tape.dim(state.c)
            ),
        ));
    }
    let from_input = tape.affine(cell.w_ih, input, Some(cell.bias))?;
    let from_state = tape.affine(cell.w_hh, state.h, None)?;
    let gates = tape.add(from_input, from_state);
    let i = tape.slice(gates, 0, n);
    let f = tape.slice(gates, n, n);
    let g = tape.slice(gates, 2 * n, n);
    let o = tape.slice(gates, 3 * n, n);
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let keep = tape.mul(f, state.c);
    let write = tape.mul(i, g);
    let c = tape.add(keep, write);
    let squashed = tape.tanh(c);
    let h = tape.mul(o, squashed);
    Ok((LstmState { h, c }, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn affine_examples() {
        let w = Tensor::from_rows(&[vec![2.0, 3.0], vec![4.0, 5.0]]).unwrap();
        let y = affine(&Tensor::vector(vec![1.0, 0.0]), &w, None).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0]);

        let b = Tensor::vector(vec![7.0, -1.0]);
        let y = affine(&Tensor::vector(vec![0.0, 0.0]), &w, Some(&b)).unwrap();
        assert_eq!(y.data(), &[7.0, -1.0]);

        let w = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::vector(vec![0.0, 0.0]);
        let y = affine(&Tensor::vector(vec![1.0, 1.0]), &w, Some(&b)).unwrap();
        assert_eq!(y.data(), &[3.0, 7.0]);

        let err = affine(&Tensor::vector(vec![1.0; 3]), &w, None).unwrap_err();
        assert!(err.to_string().contains("[2, 2]"));
    }

    #[test]
    fn tape_affine_matches_value_kernel() {
        let mut ps = ParamSet::new();
        let w = ps
            .insert("w", Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap())
            .unwrap();
        let b = ps.insert("b", Tensor::vector(vec![0.5, -0.5])).unwrap();
        let mut tape = Tape::new(&ps);
        let x = tape.constant(vec![1.0, 1.0]);
        let y = tape.affine(w, x, Some(b)).unwrap();
        assert_eq!(tape.value(y), &[3.5, 6.5]);
        let bad = tape.constant(vec![1.0]);
        assert!(tape.affine(w, bad, None).is_err());
    }

    #[test]
    fn log_softmax_examples() {
        let o = log_softmax(&Tensor::vector(vec![0.0, 0.0])).unwrap();
        for v in o.data() {
            assert!((v + std::f64::consts::LN_2).abs() < 1e-15);
        }
        let o = log_softmax(&Tensor::vector(vec![1000.0, 0.0])).unwrap();
        assert!(o.data()[0].abs() < 1e-12);
        assert!((o.data()[1] + 1000.0).abs() < 1e-9);

        // reference by direct summation: ln(e + e^2 + e^3)
        let z: f64 = (1..=3).map(|k| (k as f64).exp()).sum();
        let o = log_softmax(&Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        for (k, v) in o.data().iter().enumerate() {
            assert!((v - ((k + 1) as f64 - z.ln())).abs() < 1e-14);
        }
        let total: f64 = o.data().iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);

        assert!(log_softmax(&Tensor::vector(vec![])).is_err());
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(&Tensor::vector(vec![0.0])).data()[0], 0.5);
        let s = tape::sigmoid(-50.0);
        assert!(s > 0.0 && s < 1e-20);
        assert!(tape::log_sigmoid(-50.0).is_finite());
        assert!((tape::log_sigmoid(-50.0) + 50.0).abs() < 1e-12);
        assert!((tape::sigmoid(1.0) - 0.731_058_578_630_004_9).abs() < 1e-15);
        for x in [-3.0, -0.2, 0.7, 12.0] {
            assert!((tape::sigmoid(-x) - (1.0 - tape::sigmoid(x))).abs() < 1e-15);
        }
    }

    fn lstm_fixture(seed: u64, zero: bool) -> (ParamSet, LstmCell) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let cell = LstmCell::register(&mut ps, "lstm", 3, 4, &mut rng).unwrap();
        if zero {
            for p in ps.iter_mut() {
                p.tensor.data_mut().fill(0.0);
            }
        } else {
            let b = ps.get_mut(cell.bias);
            for (k, v) in b.tensor.data_mut().iter_mut().enumerate() {
                *v = 0.1 * (k as f64 % 3.0 - 1.0);
            }
        }
        (ps, cell)
    }

    fn run_lstm(ps: &ParamSet, cell: &LstmCell, inputs: &[Vec<f64>]) -> (Vec<f64>, crate::numerics::Gradients) {
        let mut tape = Tape::new(ps);
        let mut st = LstmState::zeros(&mut tape, cell.hidden);
        let mut outs = Vec::new();
        for x in inputs {
            let xv = tape.constant(x.clone());
            let (s, h) = recurrent_step(&mut tape, cell, st, xv).unwrap();
            st = s;
            outs.push(h);
        }
        let sums: Vec<_> = outs.iter().map(|h| (tape.sum(*h), 1.0)).collect();
        let total = tape.combine(&sums);
        let g = tape.backward(total);
        (tape.value(st.h).to_vec(), g)
    }

    #[test]
    fn zero_lstm_outputs_zero() {
        let (ps, cell) = lstm_fixture(0, true);
        let (h, _) = run_lstm(&ps, &cell, &[vec![1.0, -2.0, 3.0], vec![0.5, 0.5, 0.5]]);
        assert!(h.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lstm_deterministic() {
        let (ps, cell) = lstm_fixture(3, false);
        let inputs = [vec![0.3, -0.1, 0.8], vec![-0.4, 0.2, 0.0]];
        let (a, ga) = run_lstm(&ps, &cell, &inputs);
        let (b, gb) = run_lstm(&ps, &cell, &inputs);
        assert_eq!(a, b);
        assert_eq!(ga, gb);
    }

    #[test]
    fn lstm_gradient_matches_finite_differences() {
        let inputs = [vec![0.3, -0.1, 0.8], vec![-0.4, 0.2, 0.0], vec![1.0, 0.5, -0.5]];
        for seed in 0..20 {
            let (ps, cell) = lstm_fixture(seed, false);
            let err = grad_check(
                |p| {
                    let mut tape = Tape::new(p);
                    let mut st = LstmState::zeros(&mut tape, cell.hidden);
                    let mut terms = Vec::new();
                    for x in &inputs {
                        let xv = tape.constant(x.clone());
                        let (s, h) = recurrent_step(&mut tape, &cell, st, xv)?;
                        st = s;
                        terms.push((tape.sum(h), 1.0));
                    }
                    let total = tape.combine(&terms);
                    Ok((tape.scalar(total), tape.backward(total)))
                },
                &ps,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn lstm_rejects_bad_state() {
        let (ps, cell) = lstm_fixture(1, false);
        let mut tape = Tape::new(&ps);
        let st = LstmState::zeros(&mut tape, 3);
        let x = tape.constant(vec![0.0; 3]);
        assert!(recurrent_step(&mut tape, &cell, st, x).is_err());
    }
}
