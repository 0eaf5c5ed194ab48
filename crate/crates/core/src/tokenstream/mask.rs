use serde::{Deserialize, Serialize};

use super::{Role, TokenRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct MaskOptions {
    /// Let noise records attend to earlier noise records of other groups.
    pub inter_group_noise: bool,
}

/// Dense boolean matrix; `allowed(i, j)` means record `i` may attend to `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub n: usize,
    bits: Vec<bool>,
}

impl AttentionMask {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            bits: vec![false; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::new(n);
        for i in 0..n {
            m.set(i, i, true);
        }
        m
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.bits[i * self.n + j] = v;
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.n..(i + 1) * self.n]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

fn allow(records: &[TokenRecord], i: usize, j: usize, opts: &MaskOptions) -> bool {
    let (a, b) = (&records[i], &records[j]);
    if a.sample != b.sample {
        return false;
    }
    match a.role {
        Role::Text => j <= i && !b.role.is_noise(),
        Role::VisUnd | Role::VisClean => {
            if b.role.is_visual() && a.frame.is_some() && a.frame == b.frame {
                true
            } else {
                j < i && !b.role.is_noise()
            }
        }
        Role::VisNoise | Role::ActNoise => {
            if b.role.is_noise() && a.group == b.group {
                true
            } else if b.role.is_noise() {
                opts.inter_group_noise && j < i
            } else {
                j < i && (b.target_of.is_none() || b.target_of != a.group)
            }
        }
    }
}

/// Applies the attention rules pairwise. Records of different samples never
/// see each other.
pub fn build_attention_mask(records: &[TokenRecord], opts: &MaskOptions) -> AttentionMask {
    let n = records.len();
    let mut m = AttentionMask::new(n);
    // Samples are contiguous, so only diagonal blocks can be non-zero.
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && records[end].sample == records[start].sample {
            end += 1;
        }
        for i in start..end {
            for j in start..end {
                if allow(records, i, j, opts) {
                    m.set(i, j, true);
                }
            }
        }
        start = end;
    }
    m
}

#[derive(Debug, Clone)]
pub struct PackedSequence {
    pub records: Vec<TokenRecord>,
    pub mask: AttentionMask,
    /// `(sample id, start, len)` for each member.
    pub samples: Vec<(u32, usize, usize)>,
}

impl PackedSequence {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn single(records: Vec<TokenRecord>, opts: &MaskOptions) -> Self {
        let mask = build_attention_mask(&records, opts);
        let n = records.len();
        let id = records.first().map_or(0, |r| r.sample);
        Self {
            records,
            mask,
            samples: vec![(id, 0, n)],
        }
    }
}

/// First-fit-decreasing packing. Each input sequence keeps its order and gets
/// sample id = its input index.
pub fn pack_samples(
    sequences: Vec<Vec<TokenRecord>>,
    max_len: usize,
    opts: &MaskOptions,
) -> Result<Vec<PackedSequence>> {
    if let Some((i, s)) = sequences.iter().enumerate().find(|(_, s)| s.len() > max_len) {
        return Err(Error::Input(format!(
            "sequence {i} has {} records, more than max_len {max_len}; lower context frames, latent grid or patch count, or raise max_len",
            s.len()
        )));
    }
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    order.sort_by(|&a, &b| sequences[b].len().cmp(&sequences[a].len()).then(a.cmp(&b)));
    let mut bins: Vec<(usize, Vec<usize>)> = Vec::new();
    for i in order {
        let len = sequences[i].len();
        match bins.iter_mut().find(|(used, _)| used + len <= max_len) {
            Some(bin) => {
                bin.0 += len;
                bin.1.push(i);
            }
            None => bins.push((len, vec![i])),
        }
    }
    let mut slots: Vec<Option<Vec<TokenRecord>>> = sequences.into_iter().map(Some).collect();
    Ok(bins
        .into_iter()
        .map(|(_, members)| {
            let mut records = Vec::new();
            let mut samples = Vec::new();
            for i in members {
                let seq = slots[i].take().unwrap();
                samples.push((i as u32, records.len(), seq.len()));
                records.extend(seq.into_iter().map(|mut r| {
                    r.sample = i as u32;
                    r
                }));
            }
            let mask = build_attention_mask(&records, opts);
            PackedSequence { records, mask, samples }
        })
        .collect())
}

/// Binary PGM, white = allowed.
pub fn mask_to_pgm(mask: &AttentionMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.n, mask.n).into_bytes();
    out.extend(mask.bits.iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

pub fn mask_to_csv(mask: &AttentionMask) -> String {
    let mut s = String::with_capacity(mask.n * mask.n * 2);
    for i in 0..mask.n {
        let row: Vec<&str> = mask.row(i).iter().map(|&b| if b { "1" } else { "0" }).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}
