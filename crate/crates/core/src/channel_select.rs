//! Ranking of channel combinations by mutual information with the ground-truth mask.
//!
//! Continuous channel values are discretized into uniform bins over each channel's
//! nominal range. For a combination of one to three channels the bin tuple becomes the
//! random variable `X`, the binary mask value is `Y`, and
//! `I(X; Y) = H(X) + H(Y) - H(X, Y)` is measured in bits.

use std::collections::HashMap;
use std::io::Write;

use crate::colorspace::{ChannelId, ChannelImage};
use crate::dataset::LabeledImage;
use crate::error::{Error, Result};

/// Sparse joint counts of (channel bin tuple, label).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscreteJointHistogram {
    arity: usize,
    bins_per_channel: usize,
    counts: HashMap<u64, [u64; 2]>,
    total: u64,
}

impl DiscreteJointHistogram {
    pub fn new(arity: usize, bins_per_channel: usize) -> Result<Self> {
        if !(1..=3).contains(&arity) {
            return Err(Error::Config(format!("arity must be 1, 2 or 3, got {arity}")));
        }
        if bins_per_channel < 2 || bins_per_channel > u16::MAX as usize {
            return Err(Error::Config(format!("bins must be in 2..=65535, got {bins_per_channel}")));
        }
        Ok(DiscreteJointHistogram { arity, bins_per_channel, counts: HashMap::new(), total: 0 })
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn bins_per_channel(&self) -> usize {
        self.bins_per_channel
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    fn key(&self, bins: &[u16]) -> u64 {
        debug_assert_eq!(bins.len(), self.arity);
        bins.iter().fold(0u64, |acc, &b| {
            debug_assert!((b as usize) < self.bins_per_channel);
            acc * self.bins_per_channel as u64 + b as u64
        })
    }

    pub fn add(&mut self, bins: &[u16], label: bool) {
        self.add_key(self.key(bins), label);
    }

    fn add_key(&mut self, key: u64, label: bool) {
        self.counts.entry(key).or_insert([0, 0])[label as usize] += 1;
        self.total += 1;
    }

    /// Adds every count of `other`. Associative and commutative.
    pub fn merge(&mut self, other: &DiscreteJointHistogram) -> Result<()> {
        if other.arity != self.arity || other.bins_per_channel != self.bins_per_channel {
            return Err(Error::Shape("cannot merge histograms with different binning".into()));
        }
        for (key, c) in &other.counts {
            let e = self.counts.entry(*key).or_insert([0, 0]);
            e[0] += c[0];
            e[1] += c[1];
        }
        self.total += other.total;
        Ok(())
    }

    /// Rows of the contingency table `(x cell) -> [count(y=0), count(y=1)]`, in key order.
    pub fn contingency(&self) -> Vec<[u64; 2]> {
        let mut keys: Vec<_> = self.counts.keys().copied().collect();
        keys.sort_unstable();
        keys.into_iter().map(|k| self.counts[&k]).collect()
    }

    pub fn marginal_x(&self) -> Vec<u64> {
        self.contingency().into_iter().map(|c| c[0] + c[1]).collect()
    }

    pub fn marginal_y(&self) -> [u64; 2] {
        self.counts.values().fold([0, 0], |acc, c| [acc[0] + c[0], acc[1] + c[1]])
    }
}

/// Shannon entropy in bits of an empirical distribution given as counts.
pub fn entropy(counts: &[u64]) -> Result<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Data("entropy of an empty histogram".into()));
    }
    let n = total as f64;
    let h = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum::<f64>();
    Ok(h.max(0.0))
}

/// Mutual information in bits of a two-way contingency table (`table[x][y]`).
pub fn mutual_information_table(table: &[Vec<u64>]) -> Result<f64> {
    let cols = table.first().map_or(0, |r| r.len());
    if table.iter().any(|r| r.len() != cols) {
        return Err(Error::Shape("ragged contingency table".into()));
    }
    let rows: Vec<u64> = table.iter().map(|r| r.iter().sum()).collect();
    let columns: Vec<u64> = (0..cols).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let joint: Vec<u64> = table.iter().flatten().copied().collect();
    let mi = entropy(&rows)? + entropy(&columns)? - entropy(&joint)?;
    debug_assert!(mi > -1e-9, "negative mutual information {mi}");
    Ok(if mi < 0.0 { 0.0 } else { mi })
}

pub fn mutual_information(hist: &DiscreteJointHistogram) -> Result<f64> {
    let table: Vec<Vec<u64>> = hist.contingency().into_iter().map(|c| c.to_vec()).collect();
    mutual_information_table(&table)
}

/// Uniform bin index of `value` over the channel's nominal range.
pub fn bin_index(id: ChannelId, value: f32, bins: usize) -> u16 {
    let (lo, hi) = id.nominal_range();
    let t = ((value - lo) / (hi - lo)) as f64;
    let b = (t * bins as f64).floor();
    b.clamp(0.0, (bins - 1) as f64) as u16
}

/// 256 bins for single channels, 64 per channel for pairs and triples.
pub fn default_bins(arity: usize) -> usize {
    if arity == 1 {
        256
    } else {
        64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pooling {
    /// One distribution over every pixel of every image.
    #[default]
    Pooled,
    /// Mean of per-image mutual information.
    PerImageMean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiEntry {
    pub combination: Vec<ChannelId>,
    pub mi_bits: f64,
}

impl MiEntry {
    pub fn label(&self) -> String {
        self.combination.iter().map(|c| c.name()).collect::<Vec<_>>().join("+")
    }
}

/// Entries sorted by descending mutual information.
#[derive(Debug, Clone, PartialEq)]
pub struct MiRanking {
    entries: Vec<MiEntry>,
}

impl MiRanking {
    pub fn new(mut entries: Vec<MiEntry>) -> Self {
        entries.sort_by(|a, b| b.mi_bits.total_cmp(&a.mi_bits));
        MiRanking { entries }
    }

    pub fn entries(&self) -> &[MiEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn best(&self) -> Option<&MiEntry> {
        self.entries.first()
    }

    /// MI of a specific combination, in any order of its members.
    pub fn get(&self, combination: &[ChannelId]) -> Option<f64> {
        let mut want = combination.to_vec();
        want.sort();
        self.entries.iter().find_map(|e| {
            let mut have = e.combination.clone();
            have.sort();
            (have == want).then_some(e.mi_bits)
        })
    }

    /// Square matrix over `ids` filled from a pair ranking; the diagonal comes from
    /// `singles` when given and is NaN otherwise.
    pub fn pair_matrix(&self, ids: &[ChannelId], singles: Option<&MiRanking>) -> Vec<Vec<f64>> {
        ids.iter()
            .map(|&a| {
                ids.iter()
                    .map(|&b| {
                        if a == b {
                            singles.and_then(|s| s.get(&[a])).unwrap_or(f64::NAN)
                        } else {
                            self.get(&[a, b]).unwrap_or(f64::NAN)
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// CSV with columns `combination,mi_bits,rank`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "combination,mi_bits,rank")?;
        for (i, e) in self.entries.iter().enumerate() {
            writeln!(out, "{},{:.9},{}", e.label(), e.mi_bits, i + 1)?;
        }
        Ok(())
    }
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if k <= n {
        rec(0, n, k, &mut Vec::with_capacity(k), &mut out);
    }
    out
}

fn binned_planes(img: &ChannelImage, bins: usize) -> Vec<Vec<u16>> {
    img.planes()
        .iter()
        .map(|(id, plane)| plane.iter().map(|&v| bin_index(*id, v, bins)).collect())
        .collect()
}

fn histogram_for(
    binned: &[Vec<u16>],
    labels: &[u8],
    combo: &[usize],
    arity: usize,
    bins: usize,
) -> Result<DiscreteJointHistogram> {
    let mut hist = DiscreteJointHistogram::new(arity, bins)?;
    let mut tuple = [0u16; 3];
    for (p, &label) in labels.iter().enumerate() {
        for (slot, &c) in combo.iter().enumerate() {
            tuple[slot] = binned[c][p];
        }
        hist.add(&tuple[..arity], label != 0);
    }
    Ok(hist)
}

/// Scores every `arity`-combination of the channels present in the images
/// (C(10,1)=10, C(10,2)=45, C(10,3)=120 for the full ten-plane stack).
pub fn rank_combinations(
    images: &[LabeledImage],
    arity: usize,
    bins: usize,
    pooling: Pooling,
) -> Result<MiRanking> {
    let first = images.first().ok_or_else(|| Error::Data("no images to rank".into()))?;
    let ids = first.channels().ids();
    if !(1..=3).contains(&arity) || arity > ids.len() {
        return Err(Error::Config(format!("arity {arity} invalid for {} channels", ids.len())));
    }
    // Validate up front so failures do not depend on iteration order.
    DiscreteJointHistogram::new(arity, bins)?;
    for img in images {
        if img.channels().ids() != ids {
            return Err(Error::Shape("images carry different channel sets".into()));
        }
    }
    let prepared: Vec<(Vec<Vec<u16>>, &[u8])> = images
        .iter()
        .map(|img| (binned_planes(img.channels(), bins), img.mask().data()))
        .collect();

    let mut entries = Vec::new();
    for combo in combinations(ids.len(), arity) {
        let mi = match pooling {
            Pooling::Pooled => {
                let mut pooled = DiscreteJointHistogram::new(arity, bins)?;
                for (binned, labels) in &prepared {
                    pooled.merge(&histogram_for(binned, labels, &combo, arity, bins)?)?;
                }
                mutual_information(&pooled)?
            }
            Pooling::PerImageMean => {
                let mut sum = 0.0;
                for (binned, labels) in &prepared {
                    sum += mutual_information(&histogram_for(binned, labels, &combo, arity, bins)?)?;
                }
                sum / prepared.len() as f64
            }
        };
        entries.push(MiEntry { combination: combo.iter().map(|&i| ids[i]).collect(), mi_bits: mi });
    }
    Ok(MiRanking::new(entries))
}
