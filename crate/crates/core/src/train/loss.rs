use ndarray::{Array2, Array3, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::masking::MaskSpec;
use crate::nn::log_softmax;
use crate::quantizer::LabelFrames;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossStats {
    /// Mean cross-entropy over masked valid frames.
    pub loss: f64,
    /// Top-1 accuracy over the same frames.
    pub accuracy: f64,
    pub positions: usize,
}

/// Counts masked frames that are also valid.
pub fn masked_positions(mask: &MaskSpec, valid_frames: &[usize]) -> usize {
    mask.mask
        .rows()
        .into_iter()
        .zip(valid_frames)
        .map(|(row, &v)| row.iter().take(v).filter(|&&m| m).count())
        .sum()
}

fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Summed cross-entropy and correct count for one item. When `d_logits` is
/// given, writes `(softmax - onehot) / norm` at scored rows.
pub(crate) fn item_ce(
    logits: ArrayView2<f64>,
    labels: ArrayView1<u32>,
    mask: ArrayView1<bool>,
    valid: usize,
    norm: f64,
    mut d_logits: Option<&mut Array2<f64>>,
) -> (f64, usize) {
    let mut loss = 0.0;
    let mut correct = 0;
    for t in 0..valid.min(logits.nrows()) {
        if !mask[t] {
            continue;
        }
        let label = labels[t] as usize;
        let row = logits.row(t);
        let logp = log_softmax(row);
        loss -= logp[label];
        if argmax(row) == label {
            correct += 1;
        }
        if let Some(d) = d_logits.as_deref_mut() {
            let mut drow = d.row_mut(t);
            drow.assign(&logp.mapv(|v| v.exp() / norm));
            drow[label] -= 1.0 / norm;
        }
    }
    (loss, correct)
}

/// Mean cross-entropy at masked valid frames; everything else is ignored.
pub fn masked_ce_loss(logits: &Array3<f64>, labels: &LabelFrames, mask: &MaskSpec) -> Result<LossStats> {
    let (b, t, _) = logits.dim();
    if labels.labels.dim() != (b, t) || mask.mask.dim() != (b, t) {
        return Err(Error::Shape(format!(
            "logits {b}x{t}, labels {:?}, mask {:?}",
            labels.labels.dim(),
            mask.mask.dim()
        )));
    }
    let n = masked_positions(mask, &labels.valid_frames);
    if n == 0 {
        return Err(Error::NoMaskedPositions);
    }
    let mut loss = 0.0;
    let mut correct = 0;
    for i in 0..b {
        let (l, c) = item_ce(
            logits.index_axis(Axis(0), i),
            labels.labels.row(i),
            mask.mask.row(i),
            labels.valid_frames[i],
            n as f64,
            None,
        );
        loss += l;
        correct += c;
    }
    Ok(LossStats {
        loss: loss / n as f64,
        accuracy: correct as f64 / n as f64,
        positions: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(b: usize, t: usize, v: usize) -> (Array3<f64>, LabelFrames, MaskSpec) {
        let labels = LabelFrames {
            labels: Array2::from_shape_fn((b, t), |(i, j)| ((i * 7 + j * 3) % v) as u32),
            valid_frames: vec![t; b],
        };
        let mut mask = MaskSpec::empty(b, t, 1);
        mask.mask.fill(true);
        (Array3::zeros((b, t, v)), labels, mask)
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let (logits, labels, mask) = setup(2, 5, 8192);
        let s = masked_ce_loss(&logits, &labels, &mask).unwrap();
        assert!((s.loss - 8192f64.ln()).abs() < 1e-9);
        assert!((s.loss - 9.0109).abs() < 1e-4);
    }

    #[test]
    fn confident_correct_logits() {
        let (mut logits, labels, mask) = setup(2, 4, 16);
        for i in 0..2 {
            for j in 0..4 {
                logits[[i, j, labels.labels[[i, j]] as usize]] = 50.0;
            }
        }
        let s = masked_ce_loss(&logits, &labels, &mask).unwrap();
        assert!(s.loss < 1e-12);
        assert_eq!(s.accuracy, 1.0);
    }

    #[test]
    fn unmasked_and_padding_positions_are_ignored() {
        let (mut logits, mut labels, mut mask) = setup(1, 6, 4);
        mask.mask.row_mut(0).iter_mut().skip(3).for_each(|m| *m = false);
        let base = masked_ce_loss(&logits, &labels, &mask).unwrap();
        for j in 3..6 {
            logits[[0, j, 0]] = -40.0;
            logits[[0, j, 3]] = 17.0;
        }
        assert_eq!(masked_ce_loss(&logits, &labels, &mask).unwrap(), base);

        labels.valid_frames = vec![2];
        let s = masked_ce_loss(&logits, &labels, &mask).unwrap();
        assert_eq!(s.positions, 2);
    }

    #[test]
    fn empty_mask_is_error() {
        let (logits, labels, _) = setup(1, 3, 4);
        let mask = MaskSpec::empty(1, 3, 1);
        assert!(matches!(masked_ce_loss(&logits, &labels, &mask), Err(Error::NoMaskedPositions)));
    }
}
