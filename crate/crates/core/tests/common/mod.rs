#![allow(dead_code)]

use proptest::prelude::*;
use sentinel_core::model::{ActionChunk, ChunkBatch, Matrix, Rollout, RolloutHeader, RolloutStep};

/// Shape of a random rollout.
#[derive(Debug, Clone, Copy)]
pub struct Shape {
    pub h: usize,
    pub k: usize,
    pub d: usize,
    pub b: usize,
    pub steps: usize,
    pub emb_dim: Option<usize>,
}

impl Shape {
    fn len(&self) -> usize {
        self.steps * (self.b * self.h * self.d + self.k * self.d + self.emb_dim.unwrap_or(0))
    }
}

pub fn build(shape: Shape, values: &[f64], success: bool) -> Rollout {
    let Shape { h, k, d, b, steps, emb_dim } = shape;
    let mut it = values.iter().copied();
    let mut take = |n: usize| -> Vec<f64> { (&mut it).take(n).collect() };
    let steps = (0..steps)
        .map(|j| RolloutStep {
            batch: ChunkBatch::new(
                j * k,
                (0..b).map(|_| ActionChunk(Matrix::new(h, d, take(h * d)).unwrap())).collect(),
            )
            .unwrap(),
            executed: Matrix::new(k, d, take(k * d)).unwrap(),
            embedding: emb_dim.map(|e| take(e)),
        })
        .collect::<Vec<_>>();
    let n = steps.len();
    Rollout::new(
        RolloutHeader {
            episode_id: format!("ep-{h}-{k}-{d}-{b}-{n}"),
            h,
            k,
            d,
            horizon: n * k,
            dt: 0.1,
        },
        steps,
        if success { 1.0 } else { -1.0 },
        success,
    )
    .unwrap()
}

pub fn shape_strategy() -> impl Strategy<Value = Shape> {
    (2usize..=6, 1usize..=3, 2usize..=6, 1usize..=6, prop::option::of(1usize..=3))
        .prop_flat_map(|(h, d, b, steps, emb_dim)| {
            (1..h).prop_map(move |k| Shape { h, k, d, b, steps, emb_dim })
        })
}

/// Random rollouts with finite entries. Some entries are repeated to
/// exercise ties and zero distances.
pub fn rollout_strategy() -> impl Strategy<Value = Rollout> {
    (shape_strategy(), any::<bool>()).prop_flat_map(|(shape, success)| {
        prop::collection::vec(
            prop_oneof![4 => -5.0f64..5.0, 1 => Just(0.0), 1 => Just(1.0)],
            shape.len(),
        )
        .prop_map(move |v| build(shape, &v, success))
    })
}
