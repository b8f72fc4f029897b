//! Channel-wise region alignment.
//!
//! The `D` channels of a feature map are split into `H·W` contiguous groups,
//! one per spatial cell. Every channel in group `j` is trained so that its
//! flattened `H·W` map, read as logits, classifies to cell `j`. Cells are
//! flattened row-major: region `j` is cell `(j / W, j % W)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::FeatureMap;
use crate::error::{RaplError, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelGrouping {
    pub channels: usize,
    pub regions: usize,
    pub group_of_channel: Vec<usize>,
    pub group_sizes: Vec<usize>,
}

/// Partitions `d` channels over `h·w` regions. With `d = q·(h·w) + r`, the
/// first `h·w − r` groups get `q` channels and the last `r` get `q + 1`.
pub fn build_grouping(d: usize, h: usize, w: usize) -> Result<ChannelGrouping> {
    let regions = h * w;
    if regions == 0 {
        return Err(RaplError::Config("grouping needs at least one region".into()));
    }
    if d < regions {
        return Err(RaplError::Config(format!(
            "{d} channels cannot cover {regions} regions"
        )));
    }
    let (q, r) = (d / regions, d % regions);
    let group_sizes: Vec<usize> = (0..regions)
        .map(|j| if j < regions - r { q } else { q + 1 })
        .collect();
    let group_of_channel = group_sizes
        .iter()
        .enumerate()
        .flat_map(|(j, &n)| std::iter::repeat(j).take(n))
        .collect();
    Ok(ChannelGrouping {
        channels: d,
        regions,
        group_of_channel,
        group_sizes,
    })
}

impl ChannelGrouping {
    /// Channel range `[start, end)` of group `j`.
    pub fn channels_of(&self, j: usize) -> std::ops::Range<usize> {
        let start: usize = self.group_sizes[..j].iter().sum();
        start..start + self.group_sizes[j]
    }
}

/// Region labels for an `n`-sample batch, one per `(sample, channel)` row.
fn region_targets(grouping: &ChannelGrouping, n: usize) -> Vec<usize> {
    (0..n)
        .flat_map(|_| grouping.group_of_channel.iter().copied())
        .collect()
}

/// Mean over samples and channels of `−log softmax(flatten(z))[region]`.
pub fn cra_loss_on(tape: &mut Tape, fm: Var, grouping: &ChannelGrouping) -> Result<Var> {
    let (n, d, hw) = match tape.value(fm).shape() {
        [n, d, h, w] => (*n, *d, h * w),
        s => return Err(RaplError::Dimension(format!("CRA expects N×D×H×W, got {s:?}"))),
    };
    if d != grouping.channels || hw != grouping.regions {
        return Err(RaplError::Dimension(format!(
            "feature map {d}×{hw} does not match grouping {}×{}",
            grouping.channels, grouping.regions
        )));
    }
    let logits = tape.reshape(fm, &[n * d, hw])?;
    let logp = tape.log_softmax_rows(logits)?;
    let picked = tape.gather_cols(logp, &region_targets(grouping, n))?;
    let mean = tape.mean(picked)?;
    tape.scale(mean, -1.0)
}

pub fn cra_loss(fm: &FeatureMap, grouping: &ChannelGrouping) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(fm.values())?;
    let loss = cra_loss_on(&mut tape, v, grouping)?;
    Ok(tape.value(loss).item())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub region_scores: Vec<f64>,
    pub blank_mask: Vec<bool>,
    pub topk_regions: Vec<usize>,
}

/// Score of region `i` is the largest activation over every channel of group
/// `i` and every cell; blank regions score 0 and are never ranked. Ties in the
/// ranking go to the lower region index.
pub fn region_saliency(
    sample: &Tensor,
    grouping: &ChannelGrouping,
    blank_mask: &[bool],
    k: usize,
) -> Result<SaliencyMap> {
    let (d, hw) = match sample.shape() {
        [d, h, w] => (*d, h * w),
        s => return Err(RaplError::Dimension(format!("saliency expects D×H×W, got {s:?}"))),
    };
    if d != grouping.channels || hw != grouping.regions || blank_mask.len() != hw {
        return Err(RaplError::Dimension("saliency inputs disagree on extents".into()));
    }
    let open = blank_mask.iter().filter(|b| !**b).count();
    if k > open {
        return Err(RaplError::InvalidArgument(format!(
            "top-{k} requested from {open} non-blank regions"
        )));
    }
    let data = sample.data();
    let region_scores: Vec<f64> = (0..hw)
        .map(|i| {
            if blank_mask[i] {
                return 0.0;
            }
            grouping
                .channels_of(i)
                .flat_map(|c| data[c * hw..(c + 1) * hw].iter().copied())
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let mut order: Vec<usize> = (0..hw).filter(|&i| !blank_mask[i]).collect();
    order.sort_by(|&a, &b| region_scores[b].total_cmp(&region_scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(SaliencyMap {
        region_scores,
        blank_mask: blank_mask.to_vec(),
        topk_regions: order,
    })
}

#[derive(Serialize)]
struct SaliencyRecord<'a> {
    sample: usize,
    region_scores: &'a [f64],
    topk_regions: &'a [usize],
}

/// Writes `[{sample, region_scores, topk_regions}, ...]` as JSON.
pub fn write_saliency_dump(path: &Path, maps: &[(usize, SaliencyMap)]) -> Result<()> {
    let records: Vec<SaliencyRecord> = maps
        .iter()
        .map(|(i, m)| SaliencyRecord {
            sample: *i,
            region_scores: &m.region_scores,
            topk_regions: &m.topk_regions,
        })
        .collect();
    let text = serde_json::to_string_pretty(&records)?;
    std::fs::write(path, text).map_err(|e| RaplError::io(path, e))
}
