//! Seeded stand-in backbone for hermetic tests and benchmarks.
//!
//! The input is cut into an `h x w` grid of cells. Each cell is summarised by
//! the mean of every channel over its four quadrants (12 statistics), and
//! channel `k` of the feature map is `tanh(P_k . s + b_k)` for fixed Gaussian
//! `P` and `b` drawn from the seed. Cells only see their own pixels, so the
//! maps keep the spatial layout that class activation maps rely on.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::preprocess::ModelInput;
use super::FeatureShape;
use crate::error::{Error, Result};
use crate::par;

const STATS: usize = 12;
const GAIN: f64 = 1.5;

#[derive(Debug, Clone)]
pub(crate) struct SyntheticBackbone {
    shape: FeatureShape,
    projection: Vec<f64>,
    bias: Vec<f64>,
}

impl SyntheticBackbone {
    pub(crate) fn new(seed: u64, shape: FeatureShape, input_side: usize) -> Result<Self> {
        if shape.k == 0 || shape.h == 0 || shape.w == 0 {
            return Err(Error::invalid("test backbone dimensions must be positive"));
        }
        if shape.h * 2 > input_side || shape.w * 2 > input_side {
            return Err(Error::invalid(format!(
                "test backbone grid {}x{} is too fine for a {input_side}px input",
                shape.h, shape.w
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weight = Normal::new(0.0, GAIN / (STATS as f64).sqrt()).expect("valid sigma");
        let offset = Normal::new(0.0, 0.1).expect("valid sigma");
        let projection = (0..shape.k * STATS).map(|_| weight.sample(&mut rng)).collect();
        let bias = (0..shape.k).map(|_| offset.sample(&mut rng)).collect();
        Ok(Self { shape, projection, bias })
    }

    /// Returns the `k`-major feature maps.
    pub(crate) fn run(&self, input: &ModelInput) -> Vec<f32> {
        let FeatureShape { h, w, k } = self.shape;
        let side = input.side();
        let cells = par::map_range(h * w, |cell| {
            let (i, j) = (cell / w, cell % w);
            let stats = cell_stats(input, (i * side / h, (i + 1) * side / h), (j * side / w, (j + 1) * side / w));
            (0..k)
                .map(|ch| {
                    let row = &self.projection[ch * STATS..(ch + 1) * STATS];
                    let z: f64 = row.iter().zip(&stats).map(|(p, s)| p * s).sum::<f64>() + self.bias[ch];
                    z.tanh() as f32
                })
                .collect::<Vec<f32>>()
        });
        let mut maps = vec![0f32; k * h * w];
        for (cell, activations) in cells.into_iter().enumerate() {
            for (ch, a) in activations.into_iter().enumerate() {
                maps[ch * h * w + cell] = a;
            }
        }
        maps
    }
}

fn cell_stats(input: &ModelInput, rows: (usize, usize), cols: (usize, usize)) -> [f64; STATS] {
    let mid_r = (rows.0 + rows.1) / 2;
    let mid_c = (cols.0 + cols.1) / 2;
    let quadrants = [
        (rows.0, mid_r, cols.0, mid_c),
        (rows.0, mid_r, mid_c, cols.1),
        (mid_r, rows.1, cols.0, mid_c),
        (mid_r, rows.1, mid_c, cols.1),
    ];
    let mut out = [0.0; STATS];
    for (q, &(r0, r1, c0, c1)) in quadrants.iter().enumerate() {
        let mut sum = [0.0f64; 3];
        for y in r0..r1 {
            for x in c0..c1 {
                for (c, s) in sum.iter_mut().enumerate() {
                    *s += input.at(y, x, c) as f64;
                }
            }
        }
        let n = ((r1 - r0) * (c1 - c0)) as f64;
        for c in 0..3 {
            out[q * 3 + c] = sum[c] / n;
        }
    }
    out
}
