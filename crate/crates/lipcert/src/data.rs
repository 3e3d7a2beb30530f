//! Dataset ingestion and generation: MNIST IDX files, synthetic Boolean
//! datasets, normalization, and edge-padded random-crop augmentation.

use crate::constructions::BooleanFunction;
use crate::error::{Error, Result};
use crate::rng::Stream;
use std::path::Path;

/// A labeled dataset of flat feature vectors.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Feature dimension.
    pub dim: usize,
    /// (mean, std) applied by [`normalize`], if any.
    pub normalization: Option<(f64, f64)>,
    /// Raw per-coordinate value range (lo, hi) before normalization.
    pub value_range: (f64, f64),
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.inputs.len() != self.labels.len() {
            return Err(Error::CountMismatch {
                images: self.inputs.len(),
                labels: self.labels.len(),
            });
        }
        for &l in &self.labels {
            if l >= self.num_classes {
                return Err(Error::InvalidArgument(format!(
                    "label {l} out of range (num_classes {})",
                    self.num_classes
                )));
            }
        }
        Ok(())
    }

    /// Export as CSV, one row per sample: label, then features.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for (x, y) in self.inputs.iter().zip(&self.labels) {
            s.push_str(&y.to_string());
            for v in x {
                s.push(',');
                s.push_str(&format!("{v}"));
            }
            s.push('\n');
        }
        std::fs::write(path, s).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// A Boolean dataset: inputs in {0,1}^d with binary labels. Distinct Boolean
/// vectors are automatically at pairwise ℓ∞ distance exactly 1.
pub type BooleanDataset = LabeledDataset;

const IDX_IMAGE_MAGIC: u32 = 2051;
const IDX_LABEL_MAGIC: u32 = 2049;

fn read_be_u32(data: &[u8], pos: usize, ctx: &'static str) -> Result<u32> {
    data.get(pos..pos + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Truncated {
            context: ctx,
            needed: pos + 4 - data.len(),
        })
}

/// Load an MNIST-style IDX image/label file pair. Pixels are scaled to
/// [0,1] by dividing by 255.
pub fn load_mnist(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let img =
        std::fs::read(images_path).map_err(|e| Error::io(images_path.display().to_string(), e))?;
    let magic = read_be_u32(&img, 0, "idx image magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::BadIdxMagic {
            path: images_path.display().to_string(),
            expected: IDX_IMAGE_MAGIC,
            actual: magic,
        });
    }
    let n = read_be_u32(&img, 4, "idx image count")? as usize;
    let rows = read_be_u32(&img, 8, "idx image rows")? as usize;
    let cols = read_be_u32(&img, 12, "idx image cols")? as usize;
    let dim = rows * cols;
    if img.len() < 16 + n * dim {
        return Err(Error::Truncated {
            context: "idx image payload",
            needed: 16 + n * dim - img.len(),
        });
    }

    let lbl =
        std::fs::read(labels_path).map_err(|e| Error::io(labels_path.display().to_string(), e))?;
    let magic = read_be_u32(&lbl, 0, "idx label magic")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::BadIdxMagic {
            path: labels_path.display().to_string(),
            expected: IDX_LABEL_MAGIC,
            actual: magic,
        });
    }
    let n_lbl = read_be_u32(&lbl, 4, "idx label count")? as usize;
    if n_lbl != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: n_lbl,
        });
    }
    if lbl.len() < 8 + n {
        return Err(Error::Truncated {
            context: "idx label payload",
            needed: 8 + n - lbl.len(),
        });
    }

    let inputs = (0..n)
        .map(|i| {
            img[16 + i * dim..16 + (i + 1) * dim]
                .iter()
                .map(|&b| b as f64 / 255.0)
                .collect()
        })
        .collect();
    let labels: Vec<usize> = lbl[8..8 + n].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let ds = LabeledDataset {
        inputs,
        labels,
        num_classes,
        dim,
        normalization: None,
        value_range: (0.0, 1.0),
    };
    ds.validate()?;
    Ok(ds)
}

/// Which points of {0,1}^d a generated Boolean dataset contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BooleanMode {
    /// All 2^d points.
    Full,
    /// The adjacent levels S_p ∪ S_q (points with exactly p or q ones).
    Levels { p: usize, q: usize },
    /// The compact ≤ d+1-point dataset: one anchor on the smaller adjacent
    /// level plus all its Hamming-1 neighbors on the other level.
    Compact,
}

/// Generate a Boolean dataset labeled by `f`.
pub fn gen_boolean_dataset(f: &BooleanFunction, mode: BooleanMode) -> Result<BooleanDataset> {
    let d = f.arity();
    let point = |bits: usize| -> Vec<f64> { (0..d).map(|i| ((bits >> i) & 1) as f64).collect() };
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    match mode {
        BooleanMode::Full => {
            for bits in 0..1usize << d {
                inputs.push(point(bits));
                labels.push(f.eval_bits(bits) as usize);
            }
        }
        BooleanMode::Levels { p, q } => {
            if f.is_constant() {
                return Err(Error::InvalidArgument(
                    "levels dataset requires a non-constant function".into(),
                ));
            }
            for bits in 0..1usize << d {
                let ones = (bits as u64).count_ones() as usize;
                if ones == p || ones == q {
                    inputs.push(point(bits));
                    labels.push(f.eval_bits(bits) as usize);
                }
            }
        }
        BooleanMode::Compact => {
            // Adjacent levels (p, q) = (q+1, q) with opposite labels. The
            // anchor sits on the side giving the larger set of Hamming-1
            // neighbor pairs (at least ⌈d/2⌉ of them, which is what drives
            // the 1/d radius cap); the anchor itself is the
            // lexicographically smallest valid bit pattern for
            // reproducibility.
            let (p, q) = f.adjacent_separating_levels()?;
            if p >= d.div_ceil(2) {
                // Anchor in S_p; neighbors are all p points of S_q obtained
                // by clearing one of its set bits.
                let anchor = smallest_with_ones(p);
                inputs.push(point(anchor));
                labels.push(f.eval_bits(anchor) as usize);
                for i in 0..d {
                    if (anchor >> i) & 1 == 1 {
                        let v = anchor & !(1 << i);
                        inputs.push(point(v));
                        labels.push(f.eval_bits(v) as usize);
                    }
                }
            } else {
                // Anchor in S_q; neighbors are all d−q points of S_p
                // obtained by setting one of its clear bits.
                let anchor = smallest_with_ones(q);
                inputs.push(point(anchor));
                labels.push(f.eval_bits(anchor) as usize);
                for i in 0..d {
                    if (anchor >> i) & 1 == 0 {
                        let v = anchor | (1 << i);
                        inputs.push(point(v));
                        labels.push(f.eval_bits(v) as usize);
                    }
                }
            }
        }
    }
    let ds = LabeledDataset {
        inputs,
        labels,
        num_classes: 2,
        dim: d,
        normalization: None,
        value_range: (0.0, 1.0),
    };
    ds.validate()?;
    Ok(ds)
}

/// Smallest bit pattern with exactly `ones` ones (low bits set first).
fn smallest_with_ones(ones: usize) -> usize {
    (1usize << ones) - 1
}

/// Normalize all features in place by a scalar (mean, std), recording the
/// transform so certification radii can be rescaled consistently: a pixel-
/// space ε corresponds to ε/std in normalized space.
pub fn normalize(ds: &mut LabeledDataset, mean: f64, std: f64) -> Result<()> {
    if std == 0.0 {
        return Err(Error::InvalidArgument(
            "normalize: std must be nonzero".into(),
        ));
    }
    for x in ds.inputs.iter_mut() {
        for v in x.iter_mut() {
            *v = (*v - mean) / std;
        }
    }
    ds.normalization = Some((mean, std));
    ds.value_range = (
        (ds.value_range.0 - mean) / std,
        (ds.value_range.1 - mean) / std,
    );
    Ok(())
}

/// Edge-pad a rows×cols image by `pad` on every side, then crop a random
/// rows×cols window. Edge padding introduces no new values, so the output
/// stays within the input's value range.
pub fn augment_crop(
    image: &[f64],
    rows: usize,
    cols: usize,
    pad: usize,
    rng: &mut Stream,
) -> Vec<f64> {
    assert_eq!(image.len(), rows * cols, "image shape mismatch");
    if pad == 0 {
        return image.to_vec();
    }
    let dy = rng.next_index(2 * pad + 1) as isize - pad as isize;
    let dx = rng.next_index(2 * pad + 1) as isize - pad as isize;
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            // Edge padding == clamped source coordinates.
            let sr = (r as isize + dy).clamp(0, rows as isize - 1) as usize;
            let sc = (c as isize + dx).clamp(0, cols as isize - 1) as usize;
            out[r * cols + c] = image[sr * cols + sc];
        }
    }
    out
}
