//! CSI samples, the synthetic WSSUS generator, normalization and splitting.

mod csib;
mod synth;

pub use csib::{read_adversarial_batch, read_csib, write_adversarial_batch, write_csib, AdversarialBatch};
pub use synth::{moving_average_time, synth_generate, ChannelParams, PdpKind};

use std::collections::BTreeMap;

use log::warn;
use rand::seq::SliceRandom;

use crate::error::{CsiError, Result};
use crate::rng;
use crate::Tensor;

/// Tensor dimensions `(antennas, subcarriers, packets)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    pub antennas: usize,
    pub subcarriers: usize,
    pub packets: usize,
}

impl Dims {
    pub const fn new(antennas: usize, subcarriers: usize, packets: usize) -> Self {
        Self {
            antennas,
            subcarriers,
            packets,
        }
    }

    pub fn len(&self) -> usize {
        self.antennas * self.subcarriers * self.packets
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of (antenna, subcarrier) channels.
    pub fn channels(&self) -> usize {
        self.antennas * self.subcarriers
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.antennas, self.subcarriers, self.packets]
    }

    pub fn validate(&self) -> Result<()> {
        if self.antennas == 0 || self.subcarriers == 0 || self.packets == 0 {
            return Err(CsiError::invalid("dims", format!("{self:?} must be positive")));
        }
        Ok(())
    }
}

impl Default for Dims {
    fn default() -> Self {
        Self::new(3, 30, 250)
    }
}

/// One amplitude tensor `(A, K, T)` and its class label.
#[derive(Clone, Debug, PartialEq)]
pub struct CsiSample {
    pub amplitudes: Tensor,
    pub label: usize,
}

/// Samples sharing one shape and label space.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dims: Dims,
    pub n_classes: usize,
    pub samples: Vec<CsiSample>,
}

impl Dataset {
    pub fn new(dims: Dims, n_classes: usize, samples: Vec<CsiSample>) -> Result<Self> {
        dims.validate()?;
        for (i, s) in samples.iter().enumerate() {
            if s.amplitudes.shape() != dims.shape() {
                return Err(CsiError::invalid(
                    "samples",
                    format!("sample {i} has shape {:?}, expected {:?}", s.amplitudes.shape(), dims),
                ));
            }
            if s.label >= n_classes {
                return Err(CsiError::invalid(
                    "samples",
                    format!("sample {i} label {} >= {n_classes} classes", s.label),
                ));
            }
        }
        Ok(Self {
            dims,
            n_classes,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Batch tensor `(B, A, K, T)` of the chosen samples.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.dims.len());
        for &i in indices {
            data.extend_from_slice(self.samples[i].amplitudes.data());
        }
        let [a, k, t] = self.dims.shape();
        Tensor::new(vec![indices.len(), a, k, t], data).expect("finite sample data")
    }

    /// The whole dataset as one batch.
    pub fn as_batch(&self) -> Tensor {
        let all: Vec<usize> = (0..self.len()).collect();
        self.batch(&all)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            dims: self.dims,
            n_classes: self.n_classes,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

/// Train/validation/test partition.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub seed: u64,
    pub ratios: [f64; 3],
    /// Source indices of each part, in order.
    pub membership: [Vec<usize>; 3],
}

/// Stratified, seeded three-way split.
///
/// Each class is shuffled independently and its members receive evenly
/// spaced positions in `[0, 1)`; the globally sorted order is then cut at the
/// rounded split sizes, so every part holds each class in proportion to
/// within one sample.
pub fn split(data: &Dataset, ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if ratios.iter().any(|&r| !(r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CsiError::invalid(
            "ratios",
            format!("{ratios:?} must be positive and sum to 1"),
        ));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in data.samples.iter().enumerate() {
        by_class.entry(s.label).or_default().push(i);
    }
    for (c, members) in &by_class {
        if members.len() < 3 {
            return Err(CsiError::invalid(
                "split",
                format!("class {c} has {} samples, fewer than the 3 splits", members.len()),
            ));
        }
    }
    let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(data.len());
    for (&c, members) in &by_class {
        let mut members = members.clone();
        members.shuffle(&mut rng::stream(seed, "split", c as u64));
        let n = members.len() as f64;
        for (j, idx) in members.into_iter().enumerate() {
            keyed.push(((j as f64 + 0.5) / n, c, idx));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let n = data.len();
    let n_train = (n as f64 * ratios[0]).round() as usize;
    let n_val = ((n as f64 * ratios[1]).round() as usize).min(n - n_train);
    let order: Vec<usize> = keyed.into_iter().map(|k| k.2).collect();
    let membership = [
        order[..n_train].to_vec(),
        order[n_train..n_train + n_val].to_vec(),
        order[n_train + n_val..].to_vec(),
    ];
    Ok(DatasetSplit {
        train: data.subset(&membership[0]),
        val: data.subset(&membership[1]),
        test: data.subset(&membership[2]),
        seed,
        ratios,
        membership,
    })
}

/// Per-(antenna, subcarrier) z-score statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Channels whose variance was zero and whose std was clamped.
    pub clamped: Vec<usize>,
}

pub const STD_FLOOR: f64 = 1e-8;

impl NormStats {
    /// Fits statistics over every sample and packet of `data`.
    pub fn fit(data: &Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(CsiError::invalid("normalize", "empty sample set"));
        }
        let ch = data.dims.channels();
        let t = data.dims.packets;
        let count = (data.len() * t) as f64;
        let mut mean = vec![0.0; ch];
        for s in &data.samples {
            for (c, row) in s.amplitudes.data().chunks(t).enumerate() {
                mean[c] += row.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; ch];
        for s in &data.samples {
            for (c, row) in s.amplitudes.data().chunks(t).enumerate() {
                var[c] += row.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
            }
        }
        let mut clamped = Vec::new();
        let std = var
            .into_iter()
            .enumerate()
            .map(|(c, v)| {
                let s = (v / count).sqrt();
                if s < STD_FLOOR {
                    clamped.push(c);
                    STD_FLOOR
                } else {
                    s
                }
            })
            .collect();
        if !clamped.is_empty() {
            warn!("{} zero-variance channel(s) clamped to std {STD_FLOOR:e}", clamped.len());
        }
        Ok(Self { mean, std, clamped })
    }

    pub fn apply(&self, data: &Dataset) -> Dataset {
        let t = data.dims.packets;
        let samples = data
            .samples
            .iter()
            .map(|s| {
                let mut amp = s.amplitudes.clone();
                for (c, row) in amp.data_mut().chunks_mut(t).enumerate() {
                    for v in row {
                        *v = (*v - self.mean[c]) / self.std[c];
                    }
                }
                CsiSample {
                    amplitudes: amp,
                    label: s.label,
                }
            })
            .collect();
        Dataset {
            dims: data.dims,
            n_classes: data.n_classes,
            samples,
        }
    }
}

/// Fits statistics on the training part and applies them unchanged to all
/// three parts.
pub fn normalize(split: &DatasetSplit) -> Result<(DatasetSplit, NormStats)> {
    let stats = NormStats::fit(&split.train)?;
    let out = DatasetSplit {
        train: stats.apply(&split.train),
        val: stats.apply(&split.val),
        test: stats.apply(&split.test),
        seed: split.seed,
        ratios: split.ratios,
        membership: split.membership.clone(),
    };
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(labels: &[usize], dims: Dims, f: impl Fn(usize, usize) -> f64) -> Dataset {
        let samples = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| CsiSample {
                amplitudes: Tensor::new(dims.shape().to_vec(), (0..dims.len()).map(|j| f(i, j)).collect())
                    .unwrap(),
                label: l,
            })
            .collect();
        Dataset::new(dims, 4, samples).unwrap()
    }

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let d = toy(&[0, 1, 0], Dims::new(1, 2, 3), |_, _| 5.0);
        let stats = NormStats::fit(&d).unwrap();
        assert_eq!(stats.clamped, vec![0, 1]);
        let n = stats.apply(&d);
        assert!(n.samples.iter().all(|s| s.amplitudes.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn two_value_channel_maps_to_unit_z_scores() {
        let d = toy(&[0, 1], Dims::new(1, 1, 1), |i, _| if i == 0 { 1.0 } else { 3.0 });
        let n = NormStats::fit(&d).unwrap().apply(&d);
        assert_eq!(n.samples[0].amplitudes.data(), &[-1.0]);
        assert_eq!(n.samples[1].amplitudes.data(), &[1.0]);
    }

    #[test]
    fn empty_set_is_rejected() {
        let d = Dataset::new(Dims::new(1, 1, 1), 2, vec![]).unwrap();
        assert!(NormStats::fit(&d).is_err());
    }

    #[test]
    fn split_sizes_and_rejection() {
        let labels: Vec<usize> = (0..100).map(|i| i % 4).collect();
        let d = toy(&labels, Dims::new(1, 1, 2), |i, j| (i * 2 + j) as f64);
        let s = split(&d, [0.7, 0.1, 0.2], 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 10, 20));
        let again = split(&d, [0.7, 0.1, 0.2], 3).unwrap();
        assert_eq!(s.membership, again.membership);

        let few = toy(&[0, 0, 0, 1, 1], Dims::new(1, 1, 1), |i, _| i as f64);
        assert!(split(&few, [0.7, 0.1, 0.2], 1).is_err());
        assert!(split(&d, [0.5, 0.1, 0.2], 1).is_err());
    }
}
