//! Fixed sinusoidal features for token positions and timesteps.

use crate::error::Result;
use crate::layout::{SegmentKind, SequenceLayout};
use crate::numerics::Tensor;

use super::ModelConfig;

/// Position of one token: image tokens on a 2-D grid, text tokens on a line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Position {
    Grid { y: f32, x: f32 },
    Seq(f32),
}

/// Noise tokens sit on the target grid; condition `k` image tokens sit on
/// their own grid shifted right by `(k+1)·image_edge`; text tokens count up
/// from 0 within their segment.
pub fn embed_positions(layout: &SequenceLayout, config: &ModelConfig) -> Result<Vec<Position>> {
    let cg = config.cond_grid();
    let g = config.grid();
    let mut out = Vec::with_capacity(layout.total());
    for i in 0..layout.total() {
        let kind = layout.classify(i)?;
        let pos = match kind {
            SegmentKind::ConditionImage(k) => {
                let local = i - layout.condition_image(k).start;
                Position::Grid {
                    y: (local / cg) as f32,
                    x: (local % cg + (k + 1) * config.image_edge) as f32,
                }
            }
            SegmentKind::ConditionText(k) => Position::Seq((i - layout.condition_text(k).start) as f32),
            SegmentKind::Prompt => Position::Seq((i - layout.prompt().start) as f32),
            SegmentKind::Noise => {
                let local = i - layout.noise().start;
                Position::Grid {
                    y: (local / g) as f32,
                    x: (local % g) as f32,
                }
            }
        };
        out.push(pos);
    }
    Ok(out)
}

/// `dim` sin/cos features of `value` at geometric frequencies.
pub fn sinusoid(value: f32, dim: usize, max_period: f32) -> Vec<f32> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for f in 0..half {
        let freq = (-(max_period.ln()) * f as f32 / half.max(1) as f32).exp();
        let a = value * freq;
        out[f] = a.sin();
        out[half + f] = a.cos();
    }
    out
}

/// `L × d` features: half the width for each grid axis; text tokens use the
/// first half only.
pub fn position_features(positions: &[Position], d: usize) -> Tensor {
    let half = d / 2;
    let mut data = Vec::with_capacity(positions.len() * d);
    for p in positions {
        let (a, b) = match *p {
            Position::Grid { y, x } => (sinusoid(y, half, 256.0), sinusoid(x, d - half, 256.0)),
            Position::Seq(s) => (sinusoid(s, half, 256.0), vec![0.0; d - half]),
        };
        data.extend(a);
        data.extend(b);
    }
    Tensor::matrix(positions.len(), d, data).expect("sized")
}

/// Raw timestep features; the model maps them through two learned layers.
pub fn timestep_features(t: f32, d: usize) -> Tensor {
    Tensor::matrix(1, d, sinusoid(t * 1000.0, d, 10_000.0)).expect("sized")
}
