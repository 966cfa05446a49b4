//! Storage tiers for the whitened system and the `CFG1` stream format.
//!
//! Byte accounting covers the stored values and per-factor metadata only;
//! the stream header and factor-presence mask are format overhead and are not
//! counted.
//!
//! Stream layout, all integers and scalars little-endian:
//!
//! ```text
//! "CFG1" | tier u8 | layout u8 | n u32 | presence u8 × n | payload_len u32 | f64 × payload_len
//! ```
//!
//! Presence bit 0 is the GPS factor at that keyframe, bit 1 the between
//! factor to the next keyframe, bit 2 the motion factor.

use std::collections::BTreeMap;
use std::fmt;

use crate::blockla::Mat;
use crate::error::{Error, Result};
use crate::factors::{jacobian_template, whiten, Factor, FactorKind, KeyframeState, RawRow, Slot, StateLayout, WhitenedBlockRow};
use crate::graph::ChainFactorGraph;

pub const MAGIC: &[u8; 4] = b"CFG1";
const HEADER_LEN: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StorageTier {
    Dense,
    SparseTyped,
    SequentialChain,
    CompressedChain,
}

impl StorageTier {
    pub const ALL: [StorageTier; 4] = [
        StorageTier::Dense,
        StorageTier::SparseTyped,
        StorageTier::SequentialChain,
        StorageTier::CompressedChain,
    ];

    pub fn code(self) -> u8 {
        match self {
            StorageTier::Dense => 0,
            StorageTier::SparseTyped => 1,
            StorageTier::SequentialChain => 2,
            StorageTier::CompressedChain => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }

    /// CLI name.
    pub fn name(self) -> &'static str {
        match self {
            StorageTier::Dense => "dense",
            StorageTier::SparseTyped => "step1",
            StorageTier::SequentialChain => "step2",
            StorageTier::CompressedChain => "step3",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }
}

impl fmt::Display for StorageTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FootprintReport {
    pub tier: StorageTier,
    pub bytes: usize,
    /// `values`, `types`, `indices`.
    pub breakdown: BTreeMap<&'static str, usize>,
}

fn free_count(tpl: &[Vec<Slot>]) -> usize {
    tpl.iter().flatten().filter(|s| matches!(s, Slot::Free)).count()
}

/// Scalars one factor occupies in the compressed tier: residual, whitening
/// root lower triangle, free Jacobian entries.
fn compressed_scalars(kind: FactorKind, layout: StateLayout, rows: usize) -> usize {
    rows + rows * (rows + 1) / 2 + free_count(&jacobian_template(kind, layout))
}

fn factor_rows(kind: FactorKind, layout: StateLayout) -> usize {
    match kind {
        FactorKind::Gps => 2,
        FactorKind::Between => layout.between_dim(),
        FactorKind::Motion => layout.motion_dim(),
    }
}

fn block_count(kind: FactorKind) -> usize {
    if kind == FactorKind::Gps {
        1
    } else {
        2
    }
}

pub fn footprint(graph: &ChainFactorGraph, tier: StorageTier, scalar_bytes: usize) -> Result<FootprintReport> {
    if scalar_bytes != 4 && scalar_bytes != 8 {
        return Err(Error::InvalidArgument(format!("scalar size {scalar_bytes} is not 4 or 8")));
    }
    let layout = graph.layout;
    let d = layout.dim();
    let kinds: Vec<FactorKind> = graph.factors().iter().map(|f| f.kind()).collect();
    let mut values = 0usize;
    let mut types = 0usize;
    let mut indices = 0usize;
    match tier {
        StorageTier::Dense => {
            let rows: usize = kinds.iter().map(|k| factor_rows(*k, layout)).sum();
            values = (rows * graph.n * d + rows) * scalar_bytes;
        }
        StorageTier::SparseTyped | StorageTier::SequentialChain => {
            for &k in &kinds {
                let rows = factor_rows(k, layout);
                values += (rows * block_count(k) * d + rows) * scalar_bytes;
                if tier == StorageTier::SparseTyped {
                    types += 1;
                    indices += 4 * block_count(k);
                }
            }
        }
        StorageTier::CompressedChain => {
            for &k in &kinds {
                values += compressed_scalars(k, layout, factor_rows(k, layout)) * scalar_bytes;
            }
        }
    }
    let mut breakdown = BTreeMap::new();
    breakdown.insert("values", values);
    breakdown.insert("types", types);
    breakdown.insert("indices", indices);
    Ok(FootprintReport {
        tier,
        bytes: values + types + indices,
        breakdown,
    })
}

fn presence(graph: &ChainFactorGraph, j: usize) -> u8 {
    let mut m = 0;
    if graph.gps.contains_key(&j) {
        m |= FactorKind::Gps.tag();
    }
    if graph.between.contains_key(&j) {
        m |= FactorKind::Between.tag();
    }
    if graph.motion.contains_key(&j) {
        m |= FactorKind::Motion.tag();
    }
    m
}

fn kinds_of(mask: u8) -> impl Iterator<Item = FactorKind> {
    [FactorKind::Gps, FactorKind::Between, FactorKind::Motion]
        .into_iter()
        .filter(move |k| mask & k.tag() != 0)
}

fn payload_scalars(kind: FactorKind, layout: StateLayout, tier: StorageTier) -> usize {
    let rows = factor_rows(kind, layout);
    match tier {
        StorageTier::CompressedChain => compressed_scalars(kind, layout, rows),
        _ => rows * block_count(kind) * layout.dim() + rows,
    }
}

/// Serializes the linearization of `graph` at `states`. Only the two chain
/// tiers have a stream form.
pub fn encode(graph: &ChainFactorGraph, states: &[KeyframeState], tier: StorageTier) -> Result<Vec<u8>> {
    if !matches!(tier, StorageTier::SequentialChain | StorageTier::CompressedChain) {
        return Err(Error::InvalidArgument(format!("tier {tier} has no stream encoding")));
    }
    if graph.n > 0 {
        graph.check()?;
    }
    if states.len() != graph.n {
        return Err(Error::InvalidArgument(format!("{} states for {} keyframes", states.len(), graph.n)));
    }
    let n = u32::try_from(graph.n).map_err(|_| Error::InvalidArgument("too many keyframes".into()))?;
    let layout = graph.layout;
    let mut payload: Vec<f64> = Vec::new();
    for f in graph.factors() {
        match tier {
            StorageTier::SequentialChain => {
                let w = f.linearize(layout, states)?;
                payload.extend_from_slice(&w.residual);
                for (_, b) in &w.blocks {
                    payload.extend_from_slice(b.as_col_major());
                }
            }
            _ => push_compressed(&f, layout, states, &mut payload)?,
        }
    }
    let mut out = Vec::with_capacity(HEADER_LEN + graph.n + 4 + 8 * payload.len());
    out.extend_from_slice(MAGIC);
    out.push(tier.code());
    out.push(layout.code());
    out.extend_from_slice(&n.to_le_bytes());
    for j in 1..=graph.n {
        out.push(presence(graph, j));
    }
    let len = u32::try_from(payload.len()).map_err(|_| Error::InvalidArgument("payload too large".into()))?;
    out.extend_from_slice(&len.to_le_bytes());
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn push_compressed(f: &Factor, layout: StateLayout, states: &[KeyframeState], out: &mut Vec<f64>) -> Result<()> {
    let raw = f.raw(layout, states)?;
    let w = f.whitening()?;
    let white = whiten(f.kind(), &w, &raw);
    out.extend_from_slice(&white.residual);
    for r in 0..w.nrows() {
        for c in 0..=r {
            out.push(w[(r, c)]);
        }
    }
    let d = layout.dim();
    let tpl = jacobian_template(f.kind(), layout);
    for (b, grid) in tpl.iter().enumerate() {
        let j = &raw.blocks[b].1;
        for (pos, slot) in grid.iter().enumerate() {
            if *slot == Slot::Free {
                out.push(j[(pos / d, pos % d)]);
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub tier: StorageTier,
    pub layout: StateLayout,
    pub n: usize,
    /// Whitened factors in stacking order.
    pub rows: Vec<WhitenedBlockRow>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, k: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < k {
            return Err(Error::Format {
                offset: self.pos,
                reason: format!("truncated {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + k];
        self.pos += k;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, "payload")?.try_into().expect("8 bytes")))
    }

    fn fail<T>(&self, offset: usize, reason: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset,
            reason: reason.into(),
        })
    }
}

pub fn decode(bytes: &[u8]) -> Result<Decoded> {
    let mut rd = Reader { buf: bytes, pos: 0 };
    if rd.take(4, "magic")? != MAGIC {
        return rd.fail(0, "bad magic");
    }
    let tier_at = rd.pos;
    let tier = match StorageTier::from_code(rd.u8("tier")?) {
        Some(t @ (StorageTier::SequentialChain | StorageTier::CompressedChain)) => t,
        _ => return rd.fail(tier_at, "unknown or non-stream tier"),
    };
    let layout_at = rd.pos;
    let layout = StateLayout::from_code(rd.u8("layout")?).or_else(|_| rd.fail(layout_at, "bad layout code"))?;
    let n = rd.u32("keyframe count")? as usize;
    let mask_at = rd.pos;
    let masks = rd.take(n, "presence mask")?;
    let mut expected = 0usize;
    for (k, &m) in masks.iter().enumerate() {
        let j = k + 1;
        if m & !7 != 0 {
            return rd.fail(mask_at + k, "unknown presence bits");
        }
        if j == n && m & 6 != 0 {
            return rd.fail(mask_at + k, "binary factor past the last keyframe");
        }
        if m & FactorKind::Motion.tag() != 0 && !layout.has_velocity() {
            return rd.fail(mask_at + k, "motion factor in a layout without velocity");
        }
        expected += kinds_of(m).map(|kd| payload_scalars(kd, layout, tier)).sum::<usize>();
    }
    let len_at = rd.pos;
    let len = rd.u32("payload length")? as usize;
    if len != expected {
        return rd.fail(len_at, format!("payload length {len} but the presence mask implies {expected}"));
    }
    let want_total = rd.pos + 8 * len;
    if bytes.len() != want_total {
        return rd.fail(
            bytes.len().min(want_total),
            format!("stream is {} bytes, expected {want_total}", bytes.len()),
        );
    }

    let d = layout.dim();
    let mut rows = Vec::new();
    for (k, &m) in masks.iter().enumerate() {
        let j = k + 1;
        for kind in kinds_of(m) {
            let r = factor_rows(kind, layout);
            let indices: Vec<usize> = if kind == FactorKind::Gps { vec![j] } else { vec![j, j + 1] };
            let row = match tier {
                StorageTier::SequentialChain => {
                    let residual = (0..r).map(|_| rd.f64()).collect::<Result<Vec<_>>>()?;
                    let mut blocks = Vec::with_capacity(indices.len());
                    for &i in &indices {
                        let vals = (0..r * d).map(|_| rd.f64()).collect::<Result<Vec<_>>>()?;
                        blocks.push((i, Mat::from_col_major(r, d, vals)?));
                    }
                    WhitenedBlockRow { kind, residual, blocks }
                }
                _ => read_compressed(&mut rd, kind, layout, &indices)?,
            };
            rows.push(row);
        }
    }
    Ok(Decoded { tier, layout, n, rows })
}

fn read_compressed(rd: &mut Reader<'_>, kind: FactorKind, layout: StateLayout, indices: &[usize]) -> Result<WhitenedBlockRow> {
    let d = layout.dim();
    let r = factor_rows(kind, layout);
    let residual = (0..r).map(|_| rd.f64()).collect::<Result<Vec<_>>>()?;
    let mut w = Mat::zeros(r, r);
    for i in 0..r {
        for c in 0..=i {
            w[(i, c)] = rd.f64()?;
        }
    }
    let tpl = jacobian_template(kind, layout);
    let mut blocks: Vec<Mat> = vec![Mat::zeros(r, d); tpl.len()];
    for (b, grid) in tpl.iter().enumerate() {
        for (pos, slot) in grid.iter().enumerate() {
            let v = match slot {
                Slot::Free => rd.f64()?,
                Slot::One => 1.0,
                Slot::MinusOne => -1.0,
                Slot::Zero | Slot::Mirror { .. } => continue,
            };
            blocks[b][(pos / d, pos % d)] = v;
        }
    }
    // Mirrors point at entries that are already filled in.
    for (b, grid) in tpl.iter().enumerate() {
        for (pos, slot) in grid.iter().enumerate() {
            if let Slot::Mirror { block, row, col, negate } = *slot {
                let v = blocks[block][(row, col)];
                blocks[b][(pos / d, pos % d)] = if negate { -v } else { v };
            }
        }
    }
    let raw = RawRow {
        residual: vec![0.0; r],
        blocks: indices.iter().copied().zip(blocks).collect(),
    };
    let mut white = whiten(kind, &w, &raw);
    white.residual = residual;
    Ok(white)
}
