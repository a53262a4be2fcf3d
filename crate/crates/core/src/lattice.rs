//! The `T x (U+1)` transducer alignment lattice.
//!
//! Cell `(t, u)` means frame `t` is being consumed after `u` labels have been
//! emitted. A blank moves to `(t+1, u)`; a label emits `y_{u+1}` and moves to
//! `(t, u+1)`. Every path ends with the blank out of `(T-1, U)`, so it holds
//! exactly `T` blanks and `U` labels.

use rand::Rng;

use crate::error::{Error, Result};
use crate::models::{network, ModelParams};
use crate::numerics::{log_add, log_sum_exp, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct LatticeGrid {
    frames: usize,
    labels: usize,
    blank_lp: Vec<f64>,
    label_lp: Vec<f64>,
}

impl LatticeGrid {
    /// `blank_lp` and `label_lp` are row-major `T x (U+1)`; label entries in
    /// the last column are ignored and stored as `-inf`.
    pub fn new(frames: usize, labels: usize, blank_lp: Vec<f64>, mut label_lp: Vec<f64>) -> Result<Self> {
        let n = frames * (labels + 1);
        if frames == 0 || blank_lp.len() != n || label_lp.len() != n {
            return Err(Error::Shape {
                op: "lattice",
                detail: format!(
                    "T={frames}, U={labels} needs {n} cells, got {} blank / {} label",
                    blank_lp.len(),
                    label_lp.len()
                ),
            });
        }
        for t in 0..frames {
            label_lp[t * (labels + 1) + labels] = f64::NEG_INFINITY;
        }
        if blank_lp
            .iter()
            .chain(&label_lp)
            .any(|v| v.is_nan() || *v == f64::INFINITY)
        {
            return Err(Error::NonFinite("lattice entries must be finite or -inf".into()));
        }
        Ok(Self {
            frames,
            labels,
            blank_lp,
            label_lp,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    fn idx(&self, t: usize, u: usize) -> usize {
        t * (self.labels + 1) + u
    }

    /// `log b_{t,u}`
    pub fn blank(&self, t: usize, u: usize) -> f64 {
        self.blank_lp[self.idx(t, u)]
    }

    /// `log[(1 - b_{t,u}) P(y_{u+1} | ...)]`, `-inf` for `u == U`.
    pub fn label(&self, t: usize, u: usize) -> f64 {
        self.label_lp[self.idx(t, u)]
    }

    pub fn set_blank(&mut self, t: usize, u: usize, v: f64) {
        let i = self.idx(t, u);
        self.blank_lp[i] = v;
    }

    pub fn set_label(&mut self, t: usize, u: usize, v: f64) {
        let i = self.idx(t, u);
        if u < self.labels {
            self.label_lp[i] = v;
        }
    }

    /// Checks that blank and transcript-label mass at each cell is at most 1.
    pub fn check_mass(&self) -> bool {
        (0..self.frames)
            .all(|t| (0..=self.labels).all(|u| self.blank(t, u).exp() + self.label(t, u).exp() <= 1.0 + 1e-9))
    }
}

/// A grid with blank probability `b ~ U(0.05, 0.95)` and transcript label
/// probability `(1 - b) p` with `p ~ U(0.05, 1)` at every cell.
pub fn random_grid<R: Rng>(rng: &mut R, frames: usize, labels: usize) -> LatticeGrid {
    let n = frames * (labels + 1);
    let mut blank = Vec::with_capacity(n);
    let mut label = Vec::with_capacity(n);
    for _ in 0..n {
        let b: f64 = rng.random_range(0.05..0.95);
        let p: f64 = rng.random_range(0.05..1.0);
        blank.push(b.ln());
        label.push(((1.0 - b) * p).ln());
    }
    LatticeGrid::new(frames, labels, blank, label).expect("well-formed random grid")
}

/// Posterior arc occupancies `d loglik / d (arc log-prob)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Occupancy {
    pub blank: Vec<f64>,
    pub label: Vec<f64>,
}

impl Occupancy {
    pub fn total(&self) -> f64 {
        self.blank.iter().chain(&self.label).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardBackward {
    pub loglik: f64,
    pub occupancy: Occupancy,
    /// `false` when no alignment has non-zero probability.
    pub reachable: bool,
}

pub fn forward_backward(grid: &LatticeGrid) -> ForwardBackward {
    let (tn, un) = (grid.frames, grid.labels);
    let cells = tn * (un + 1);
    let mut alpha = vec![f64::NEG_INFINITY; cells];
    let mut beta = vec![f64::NEG_INFINITY; cells];
    let ix = |t: usize, u: usize| t * (un + 1) + u;

    for t in 0..tn {
        for u in 0..=un {
            alpha[ix(t, u)] = if t == 0 && u == 0 {
                0.0
            } else {
                let from_blank = if t > 0 {
                    alpha[ix(t - 1, u)] + grid.blank(t - 1, u)
                } else {
                    f64::NEG_INFINITY
                };
                let from_label = if u > 0 {
                    alpha[ix(t, u - 1)] + grid.label(t, u - 1)
                } else {
                    f64::NEG_INFINITY
                };
                log_add(from_blank, from_label)
            };
        }
    }
    let loglik = alpha[ix(tn - 1, un)] + grid.blank(tn - 1, un);

    for t in (0..tn).rev() {
        for u in (0..=un).rev() {
            let via_blank = if t + 1 < tn {
                grid.blank(t, u) + beta[ix(t + 1, u)]
            } else if u == un {
                grid.blank(t, u)
            } else {
                f64::NEG_INFINITY
            };
            let via_label = if u < un {
                grid.label(t, u) + beta[ix(t, u + 1)]
            } else {
                f64::NEG_INFINITY
            };
            beta[ix(t, u)] = log_add(via_blank, via_label);
        }
    }

    let reachable = loglik > f64::NEG_INFINITY;
    let mut blank = vec![0.0; cells];
    let mut label = vec![0.0; cells];
    if reachable {
        for t in 0..tn {
            for u in 0..=un {
                let a = alpha[ix(t, u)];
                if a == f64::NEG_INFINITY {
                    continue;
                }
                let after_blank = if t + 1 < tn {
                    beta[ix(t + 1, u)]
                } else if u == un {
                    0.0
                } else {
                    f64::NEG_INFINITY
                };
                blank[ix(t, u)] = (a + grid.blank(t, u) + after_blank - loglik).exp();
                if u < un {
                    label[ix(t, u)] = (a + grid.label(t, u) + beta[ix(t, u + 1)] - loglik).exp();
                }
            }
        }
    }
    ForwardBackward {
        loglik,
        occupancy: Occupancy { blank, label },
        reachable,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Move {
    Blank,
    Label,
}

/// A monotone lattice path from `(0, 0)` through the terminal blank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment(pub Vec<Move>);

impl Alignment {
    /// Every alignment of `frames` frames and `labels` labels.
    pub fn enumerate(frames: usize, labels: usize) -> Vec<Alignment> {
        fn rec(blanks: usize, labels: usize, cur: &mut Vec<Move>, out: &mut Vec<Alignment>) {
            if blanks == 0 && labels == 0 {
                let mut path = cur.clone();
                path.push(Move::Blank);
                out.push(Alignment(path));
                return;
            }
            if blanks > 0 {
                cur.push(Move::Blank);
                rec(blanks - 1, labels, cur, out);
                cur.pop();
            }
            if labels > 0 {
                cur.push(Move::Label);
                rec(blanks, labels - 1, cur, out);
                cur.pop();
            }
        }
        let mut out = Vec::new();
        if frames > 0 {
            rec(frames - 1, labels, &mut Vec::new(), &mut out);
        }
        out
    }

    pub fn log_prob(&self, grid: &LatticeGrid) -> f64 {
        let (mut t, mut u) = (0, 0);
        let mut lp = 0.0;
        for m in &self.0 {
            match m {
                Move::Blank => {
                    lp += grid.blank(t, u);
                    t += 1;
                }
                Move::Label => {
                    lp += grid.label(t, u);
                    u += 1;
                }
            }
        }
        lp
    }
}

/// Log-likelihood by explicit enumeration of all `C(T-1+U, U)` alignments.
pub fn brute_force_likelihood(grid: &LatticeGrid) -> Result<f64> {
    let size = grid.frames + grid.labels;
    if size > 20 {
        return Err(Error::TooLarge(size));
    }
    let scores: Vec<f64> = Alignment::enumerate(grid.frames, grid.labels)
        .iter()
        .map(|a| a.log_prob(grid))
        .collect();
    Ok(log_sum_exp(&scores))
}

/// Tape nodes of a filled lattice; `label[t][U]` is absent.
pub(crate) struct GridVars {
    frames: usize,
    labels: usize,
    blank: Vec<Var>,
    label: Vec<Option<Var>>,
}

impl GridVars {
    fn to_grid(&self, tape: &Tape<'_>) -> LatticeGrid {
        let blank = self.blank.iter().map(|v| tape.scalar(*v)).collect();
        let label = self
            .label
            .iter()
            .map(|v| v.map_or(f64::NEG_INFINITY, |v| tape.scalar(v)))
            .collect();
        LatticeGrid::new(self.frames, self.labels, blank, label).expect("consistent grid")
    }
}

pub(crate) fn build_grid(
    tape: &mut Tape<'_>,
    mp: &ModelParams,
    frames: &[Var],
    transcript: &[usize],
) -> Result<GridVars> {
    if frames.is_empty() {
        return Err(Error::Shape {
            op: "fill_grid",
            detail: "at least one frame required".into(),
        });
    }
    let g = network::label_decoder_outputs(tape, mp, transcript)?;
    let gb = match mp.config.blank_decoder_dim {
        Some(_) => Some(network::blank_decoder_outputs(tape, mp, transcript)?),
        None => None,
    };
    let w = network::blank_vector(tape, mp);
    let frame_proj = frames
        .iter()
        .map(|f| network::project_frame(tape, mp, *f))
        .collect::<Result<Vec<_>>>()?;
    let label_proj = (0..=transcript.len())
        .map(|u| network::project_label(tape, mp, g[u], gb.as_ref().map(|b| b[u])))
        .collect::<Result<Vec<_>>>()?;

    let un = transcript.len();
    let mut blank = Vec::with_capacity(frames.len() * (un + 1));
    let mut label = Vec::with_capacity(frames.len() * (un + 1));
    for fp in &frame_proj {
        for (u, lp) in label_proj.iter().enumerate() {
            let cell = network::joint_cell(tape, mp, w, fp, lp)?;
            blank.push(cell.blank);
            label.push(if u < un {
                let y = tape.pick(cell.labels, transcript[u])?;
                Some(tape.add(cell.emit, y))
            } else {
                None
            });
        }
    }
    Ok(GridVars {
        frames: frames.len(),
        labels: un,
        blank,
        label,
    })
}

/// `log P(Y | frames)` as a differentiable tape node.
pub(crate) fn transducer_loglik(
    tape: &mut Tape<'_>,
    mp: &ModelParams,
    frames: &[Var],
    transcript: &[usize],
) -> Result<Var> {
    let vars = build_grid(tape, mp, frames, transcript)?;
    let grid = vars.to_grid(tape);
    let fb = forward_backward(&grid);
    if !fb.reachable {
        return Err(Error::Unreachable {
            frames: grid.frames,
            labels: grid.labels,
        });
    }
    let mut partials = Vec::with_capacity(2 * vars.blank.len());
    for (k, v) in vars.blank.iter().enumerate() {
        partials.push((*v, fb.occupancy.blank[k]));
    }
    for (k, v) in vars.label.iter().enumerate() {
        if let Some(v) = v {
            partials.push((*v, fb.occupancy.label[k]));
        }
    }
    Ok(tape.custom_scalar(fb.loglik, partials))
}

/// Lattice scores for one utterance from the model.
pub fn fill_grid(mp: &ModelParams, features: &Tensor, transcript: &[usize]) -> Result<LatticeGrid> {
    let mut tape = Tape::new(&mp.params);
    let frames = network::encode_vars(&mut tape, mp, features)?;
    let vars = build_grid(&mut tape, mp, &frames, transcript)?;
    Ok(vars.to_grid(&tape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{self, ModelConfig, Variant};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid_from(t: usize, u: usize, blank: &[f64], label: &[f64]) -> LatticeGrid {
        LatticeGrid::new(t, u, blank.to_vec(), label.to_vec()).unwrap()
    }

    #[test]
    fn single_frame_no_labels() {
        let g = grid_from(1, 0, &[-0.3], &[f64::NEG_INFINITY]);
        let fb = forward_backward(&g);
        assert_eq!(fb.loglik, -0.3);
        assert_eq!(fb.occupancy.total(), 1.0);
    }

    #[test]
    fn two_frames_one_label_by_hand() {
        // cells (t,u): (0,0) (0,1) (1,0) (1,1)
        let blank = [0.6f64.ln(), 0.7f64.ln(), 0.2f64.ln(), 0.9f64.ln()];
        let label = [0.3f64.ln(), 0.0, 0.5f64.ln(), 0.0];
        let g = grid_from(2, 1, &blank, &label);
        // label at t=0 then blanks: 0.3 * 0.7 * 0.9; blank, label at t=1, blank: 0.6 * 0.5 * 0.9
        let expected = (0.3f64 * 0.7 * 0.9 + 0.6 * 0.5 * 0.9).ln();
        let fb = forward_backward(&g);
        assert!((fb.loglik - expected).abs() < 1e-14);
        assert_eq!(Alignment::enumerate(2, 1).len(), 2);
        assert!((fb.occupancy.total() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn path_counts() {
        // T-1 free blanks interleaved with U labels
        assert_eq!(Alignment::enumerate(3, 2).len(), 6);
        assert_eq!(Alignment::enumerate(4, 3).len(), 20);
        assert_eq!(Alignment::enumerate(1, 4).len(), 1);
    }

    #[test]
    fn dp_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let t = rng.random_range(1..=7);
            let u = rng.random_range(0..=5);
            let g = random_grid(&mut rng, t, u);
            let dp = forward_backward(&g).loglik;
            let bf = brute_force_likelihood(&g).unwrap();
            worst = worst.max((dp - bf).abs());
        }
        assert!(worst < 1e-9, "{worst}");
    }

    #[test]
    fn single_certain_path() {
        let ninf = f64::NEG_INFINITY;
        let blank = [ninf, 0.0, -5.0, 0.0];
        let label = [0.0, ninf, -1.0, ninf];
        let g = grid_from(2, 1, &blank, &label);
        assert_eq!(forward_backward(&g).loglik, 0.0);
        assert_eq!(brute_force_likelihood(&g).unwrap(), 0.0);
    }

    #[test]
    fn unreachable_flagged() {
        let ninf = f64::NEG_INFINITY;
        let g = grid_from(2, 1, &[0.0, 0.0, 0.0, 0.0], &[ninf, ninf, ninf, ninf]);
        let fb = forward_backward(&g);
        assert!(!fb.reachable);
        assert_eq!(fb.loglik, ninf);
        assert_eq!(fb.occupancy.total(), 0.0);
    }

    #[test]
    fn too_large_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_grid(&mut rng, 12, 9);
        assert!(matches!(brute_force_likelihood(&g), Err(Error::TooLarge(21))));
    }

    #[test]
    fn occupancy_is_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = random_grid(&mut rng, 4, 3);
        let fb = forward_backward(&g);
        let eps = 1e-6;
        for t in 0..4 {
            for u in 0..=3 {
                let mut p = g.clone();
                p.set_blank(t, u, g.blank(t, u) + eps);
                let mut m = g.clone();
                m.set_blank(t, u, g.blank(t, u) - eps);
                let num = (forward_backward(&p).loglik - forward_backward(&m).loglik) / (2.0 * eps);
                assert!((num - fb.occupancy.blank[t * 4 + u]).abs() < 1e-7);
            }
        }
    }

    proptest! {
        #[test]
        fn occupancy_sums_to_path_length(seed in 0u64..10_000, t in 1usize..8, u in 0usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_grid(&mut rng, t, u);
            let fb = forward_backward(&g);
            prop_assert!((fb.occupancy.total() - (t + u) as f64).abs() < 1e-9);
        }

        #[test]
        fn more_arc_mass_never_lowers_likelihood(
            seed in 0u64..10_000, t in 1usize..6, u in 0usize..5, bump in 0.0f64..2.0, blank_arc: bool,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_grid(&mut rng, t, u);
            let (ct, cu) = (rng.random_range(0..t), rng.random_range(0..=u));
            let mut h = g.clone();
            if blank_arc || cu == u {
                h.set_blank(ct, cu, g.blank(ct, cu) + bump);
            } else {
                h.set_label(ct, cu, g.label(ct, cu) + bump);
            }
            prop_assert!(forward_backward(&h).loglik >= forward_backward(&g).loglik);
        }
    }

    fn utterance(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Tensor {
        Tensor::new(vec![t, d], (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn fill_grid_blank_only_column() {
        let mp = ModelParams::init(&ModelConfig::tiny(Variant::Hat, 4, 3), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = fill_grid(&mp, &utterance(&mut rng, 3, 3), &[]).unwrap();
        assert_eq!((g.frames(), g.labels()), (3, 0));
        assert!((0..3).all(|t| g.label(t, 0) == f64::NEG_INFINITY));
        assert!(g.check_mass());
        assert!(matches!(
            fill_grid(&mp, &utterance(&mut rng, 3, 3), &[7]),
            Err(Error::InvalidToken { .. })
        ));
    }

    #[test]
    fn mhat_grid_is_definitional() {
        let mp = ModelParams::init(&ModelConfig::tiny(Variant::Mhat, 4, 3), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = utterance(&mut rng, 3, 3);
        let y = [2, 0];
        let g = fill_grid(&mp, &x, &y).unwrap();
        let f = models::encode(&x, &mp).unwrap();
        for t in 0..3 {
            for u in 0..=2 {
                let gl = models::label_decode(&y[..u], &mp).unwrap();
                let gb = models::blank_decode(&y[..u], &mp).unwrap();
                let s = models::mhat_scores(&Tensor::vector(f.row(t).to_vec()), &gl, &gb, &mp).unwrap();
                assert!((g.blank(t, u) - s.blank_logprob).abs() < 1e-14);
                if u < 2 {
                    let expected = (1.0 - s.blank_logprob.exp()).ln() + s.label_logprobs.data()[y[u]];
                    assert!((g.label(t, u) - expected).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fill_grid_regression_checksum() {
        let mp = ModelParams::init(&ModelConfig::tiny(Variant::Mhat, 4, 3), 21).unwrap();
        let x = Tensor::new(vec![4, 3], (0..12).map(|k| (k as f64 * 0.91).cos()).collect()).unwrap();
        let g = fill_grid(&mp, &x, &[1, 3]).unwrap();
        let ll = forward_backward(&g).loglik;
        assert!((ll - GRID_LOGLIK).abs() < 1e-12, "{ll:.15}");
    }

    // Captured from the first verified build.
    const GRID_LOGLIK: f64 = -4.651_849_811_712_125;
}
